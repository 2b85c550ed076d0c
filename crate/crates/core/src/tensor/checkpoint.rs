//! Named-array store and its on-disk container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "TYRCKPT\n"
//! version  u32      1
//! count    u32
//! entries  count times, sorted by name:
//!   name_len u32, name (UTF-8)
//!   dtype    u8     1 = f64, 2 = f32
//!   ndim     u32, dims u64 * ndim
//!   values   product(dims) * sizeof(dtype) bytes
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::array::Array;
use super::graph::{Graph, Grads, Var};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TYRCKPT\n";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const DTYPE_F32: u8 = 2;

/// Ordered collection of named parameter arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Array>,
}

/// Graph handles for every array of a [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Panics on an unknown name; parameter names are fixed by the model
    /// layout, so a miss is a programming error.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name} is not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Array> {
        self.params.remove(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.params.values().map(Array::len).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn filtered(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Registers every array as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone(), trainable)))
                .collect(),
        }
    }

    /// Collects gradients for every bound parameter; unused ones get zeros.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Grads) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| {
                    let g = bound
                        .try_get(k)
                        .and_then(|var| grads.take(var))
                        .unwrap_or_else(|| Array::zeros(v.shape()));
                    (k.clone(), g)
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_values() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, arr) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(arr.ndim() as u32).to_le_bytes());
            for &d in arr.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in arr.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match dtype {
                DTYPE_F64 => r
                    .take(n * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DTYPE_F32 => r
                    .take(n * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                other => return Err(Error::Checkpoint(format!("unknown dtype tag {other} for {name}"))),
            };
            if params.insert(name.clone(), Array::new(&shape, data)?).is_some() {
                return Err(Error::Checkpoint(format!("duplicate array {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ParamStore { params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("b.bias", Array::new(&[2], vec![0.5, -1.25]).unwrap());
        p.insert("a.weight", Array::from_fn(&[2, 3], |i| i as f64 / 7.0));
        p.insert("scalar", Array::scalar(3.0));
        p
    }

    #[test]
    fn bytes_roundtrip_is_identical() {
        let p = sample();
        let bytes = p.to_bytes();
        let q = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.to_bytes(), bytes);
    }

    #[test]
    fn reads_f32_entries() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'w');
        bytes.push(DTYPE_F32);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_le_bytes());
        let p = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(ParamStore::from_bytes(b"NOTACKPT").is_err());
    }
}
