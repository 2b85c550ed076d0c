//! Recording graph for reverse-mode differentiation.
//!
//! Every op appends one node whose value is computed eagerly. Because nodes
//! are only ever appended, index order is a topological order and the
//! backward pass is a single reverse sweep that visits each op once.

use super::array::{inverse_perm, Array};
use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddSuffix(Var, Var),
    AddChannel(Var, Var),
    Linear(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Silu(Var),
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Upsample2x(Var),
    Gather { table: Var, index: Vec<usize> },
    SumAll(Var),
    SoftCrossEntropy { logits: Var, target: Array, probs: Array },
    Dice { probs: Var, onehot: Array, smooth: f64, inter: Vec<f64>, denom: Vec<f64> },
    MaskedL1 { pred: Var, target: Array, weight: Array, total_weight: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddSuffix(..) => "add_broadcast",
            Op::AddChannel(..) => "add_channel_bias",
            Op::Linear(..) => "linear",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GroupNorm { .. } => "group_norm",
            Op::Gelu(_) => "gelu",
            Op::Silu(_) => "silu",
            Op::Conv2d { .. } => "conv2d",
            Op::Permute(..) => "permute",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Upsample2x(_) => "nearest_upsample2x",
            Op::Gather { .. } => "gather",
            Op::SumAll(_) => "sum",
            Op::SoftCrossEntropy { .. } => "soft_cross_entropy",
            Op::Dice { .. } => "dice",
            Op::MaskedL1 { .. } => "masked_l1",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Array>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<'a>(grads: &'a mut [Option<Array>], v: Var, shape: &[usize]) -> &'a mut Array {
    grads[v.0].get_or_insert_with(|| Array::zeros(shape))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Array, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name().to_string() });
        }
        let requires_grad = self.inputs_require_grad(&op);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_require_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Mul(a, b) | Op::AddSuffix(a, b) | Op::AddChannel(a, b) => {
                rg(a) || rg(b)
            }
            Op::Linear(a, b) => rg(a) || rg(b),
            Op::BatchMatMul { a, b, .. } => rg(a) || rg(b),
            Op::Scale(x, _)
            | Op::Softmax { x, .. }
            | Op::Gelu(x)
            | Op::Silu(x)
            | Op::Permute(x, _)
            | Op::Reshape(x)
            | Op::Narrow { x, .. }
            | Op::Upsample2x(x)
            | Op::SumAll(x) => rg(x),
            Op::LayerNorm { x, gamma, beta, .. } | Op::GroupNorm { x, gamma, beta, .. } => {
                rg(x) || rg(gamma) || rg(beta)
            }
            Op::Conv2d { x, k, .. } => rg(x) || rg(k),
            Op::Concat { parts, .. } => parts.iter().any(rg),
            Op::Gather { table, .. } => rg(table),
            Op::SoftCrossEntropy { logits, .. } => rg(logits),
            Op::Dice { probs, .. } => rg(probs),
            Op::MaskedL1 { pred, .. } => rg(pred),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("operand shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = Array::new(self.shape(a), data)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim(
                "add_broadcast",
                format!("bias shape {sb:?} is not a trailing suffix of {sa:?}"),
            ));
        }
        let m = self.value(b).len();
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(m) {
            for (o, bv) in chunk.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        self.push(out, Op::AddSuffix(a, b))
    }

    /// Adds a per-channel bias `[C]` to an `[N,C,...]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sb = self.shape(b);
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::dim(
                "add_channel_bias",
                format!("bias {sb:?} does not match channel axis 1 of {sx:?}"),
            ));
        }
        let (outer, c, inner) = kernels::split_axis(sx, 1);
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for (ci, bv) in bias.iter().enumerate().take(c) {
                let base = (o * c + ci) * inner;
                for v in &mut d[base..base + inner] {
                    *v += bv;
                }
            }
        }
        self.push(out, Op::AddChannel(x, b))
    }

    /// `x[..., K] @ w[K, N]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w);
        if sw.len() != 2 || sx.is_empty() || sx[sx.len() - 1] != sw[0] {
            return Err(Error::dim(
                "linear",
                format!("input last axis {:?} vs weight axis 0 of {sw:?}", sx.last()),
            ));
        }
        let (k, n) = (sw[0], sw[1]);
        let rows = self.value(x).len() / k;
        let mut data = vec![0.0; rows * n];
        kernels::matmul_nn(self.value(x).data(), self.value(w).data(), &mut data, rows, k, n);
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let out = Array::new(&shape, data)?;
        self.push(out, Op::Linear(x, w))
    }

    /// Batched product of `a[B,M,K]` with `b[B,K,N]` (or `b[B,N,K]` transposed).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim("batch_matmul", format!("batch axes of {sa:?} and {sb:?}")));
        }
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::dim(
                "batch_matmul",
                format!("contraction axes differ: a axis 2 = {k}, b = {kb}"),
            ));
        }
        let mut data = vec![0.0; bsz * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..bsz {
            let ai = &av[i * m * k..(i + 1) * m * k];
            let bi = &bv[i * k * n..(i + 1) * k * n];
            let ci = &mut data[i * m * n..(i + 1) * m * n];
            if trans_b {
                kernels::matmul_nt(ai, bi, ci, m, k, n);
            } else {
                kernels::matmul_nn(ai, bi, ci, m, k, n);
            }
        }
        let out = Array::new(&[bsz, m, n], data)?;
        self.push(out, Op::BatchMatMul { a, b, trans_b })
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, c, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |ci: usize| (o * c + ci) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for ci in 0..c {
                    mx = mx.max(src[at(ci)]);
                }
                let mut z = 0.0;
                for ci in 0..c {
                    let e = (src[at(ci)] - mx).exp();
                    out[at(ci)] = e;
                    z += e;
                }
                for ci in 0..c {
                    out[at(ci)] /= z;
                }
            }
        }
        let out = Array::new(&shape, out)?;
        self.push(out, Op::Softmax { x, axis })
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("layer_norm", format!("affine params must be [{c}]")));
        }
        let src = self.value(x).data();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / c;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * gm[j] + bt[j];
            }
        }
        let out = Array::new(&shape, out)?;
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Group normalization of an `[N,C,H,W]` tensor with per-channel affine.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim("group_norm", format!("expected NCHW, got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::dim("group_norm", format!("{c} channels not divisible into {groups} groups")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("group_norm", format!("affine params must be [{c}]")));
        }
        let hw = shape[2] * shape[3];
        let gsz = c / groups * hw;
        let src = self.value(x).data();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; n * groups];
        let mut out = vec![0.0; src.len()];
        for gi in 0..n * groups {
            let seg = &src[gi * gsz..(gi + 1) * gsz];
            let mean = seg.iter().sum::<f64>() / gsz as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gsz as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[gi] = is;
            for (j, &v) in seg.iter().enumerate() {
                let idx = gi * gsz + j;
                let ch = (idx / hw) % c;
                let xh = (v - mean) * is;
                xhat[idx] = xh;
                out[idx] = xh * gm[ch] + bt[ch];
            }
        }
        let out = Array::new(&shape, out)?;
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| kernels::gelu(v).0);
        self.push(out, Op::Gelu(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| kernels::silu(v).0);
        self.push(out, Op::Silu(x))
    }

    /// Cross-correlation of `x[N,C,H,W]` with `k[O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(k).to_vec();
        if sx.len() != 4 || sk.len() != 4 {
            return Err(Error::dim("conv2d", format!("expected 4-d input and kernel, got {sx:?} and {sk:?}")));
        }
        if sx[1] != sk[1] {
            return Err(Error::dim(
                "conv2d",
                format!("input channel axis 1 = {} but kernel axis 1 = {}", sx[1], sk[1]),
            ));
        }
        let (kh, kw) = (sk[2], sk[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dim("conv2d", format!("kernel axes 2,3 must be odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        let (h, w) = (sx[2], sx[3]);
        let span_h = (h + 2 * padding).checked_sub(kh);
        let span_w = (w + 2 * padding).checked_sub(kw);
        let (span_h, span_w) = match (span_h, span_w) {
            (Some(a), Some(b)) if a % stride == 0 && b % stride == 0 => (a, b),
            _ => {
                return Err(Error::dim(
                    "conv2d",
                    format!("spatial axes 2,3 ({h}x{w}, pad {padding}) not tiled exactly by kernel {kh}x{kw} at stride {stride}"),
                ))
            }
        };
        let geom = ConvGeom {
            c: sx[1],
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            ho: span_h / stride + 1,
            wo: span_w / stride + 1,
        };
        let (n, o) = (sx[0], sk[0]);
        let img = geom.c * h * w;
        let outsz = o * geom.cols();
        let mut data = vec![0.0; n * outsz];
        let mut cols = vec![0.0; geom.rows() * geom.cols()];
        let (xv, kv) = (self.value(x).data(), self.value(k).data());
        for b in 0..n {
            kernels::im2col(&xv[b * img..(b + 1) * img], &geom, &mut cols);
            kernels::matmul_nn(kv, &cols, &mut data[b * outsz..(b + 1) * outsz], o, geom.rows(), geom.cols());
        }
        let out = Array::new(&[n, o, geom.ho, geom.wo], data)?;
        self.push(out, Op::Conv2d { x, k, geom })
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let nd = self.shape(x).len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", format!("{perm:?} is not a permutation of {nd} axes")));
        }
        let out = self.value(x).permuted(perm);
        self.push(out, Op::Permute(x, perm.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        self.push(out, Op::Reshape(x))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(Error::dim("concat", format!("{s:?} incompatible with {first:?} off axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let out = Array::new(&shape, data)?;
        self.push(out, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim("narrow", format!("range {start}..{} exceeds axis {axis} of {shape:?}", start + len)));
        }
        let (outer, ext, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Array::new(&out_shape, data)?;
        self.push(out, Op::Narrow { x, axis, start })
    }

    /// `out[n,c,i,j] = x[n,c,i/2,j/2]`.
    pub fn nearest_upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("nearest_upsample2x", format!("expected NCHW, got {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut data = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    data[(p * 2 * h + i) * 2 * w + j] = src[(p * h + i / 2) * w + j / 2];
                }
            }
        }
        let out = Array::new(&[s[0], s[1], 2 * h, 2 * w], data)?;
        self.push(out, Op::Upsample2x(x))
    }

    /// `out[i] = table[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, table: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(table).data();
        if let Some(bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::dim("gather", format!("index {bad} outside table of {}", src.len())));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Array::new(shape, data)?;
        self.push(out, Op::Gather { table, index })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Array::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x))
    }

    /// Mean over pixels of the cross-entropy between `softmax(logits)` along
    /// axis 1 and a fixed target distribution of the same `[N,C,H,W]` shape.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Array) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 4 || target.shape() != shape.as_slice() {
            return Err(Error::dim(
                "soft_cross_entropy",
                format!("logits {shape:?} vs target {:?}", target.shape()),
            ));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let z = self.value(logits).data();
        let t = target.data();
        let mut probs = vec![0.0; z.len()];
        let mut loss = 0.0;
        for b in 0..n {
            for p in 0..hw {
                let at = |ci: usize| (b * c + ci) * hw + p;
                let mx = (0..c).map(|ci| z[at(ci)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..c).map(|ci| (z[at(ci)] - mx).exp()).sum::<f64>().ln();
                for ci in 0..c {
                    let logp = z[at(ci)] - lse;
                    probs[at(ci)] = logp.exp();
                    loss -= t[at(ci)] * logp;
                }
            }
        }
        let out = Array::scalar(loss / (n * hw) as f64);
        let probs = Array::new(&shape, probs)?;
        self.push(out, Op::SoftCrossEntropy { logits, target, probs })
    }

    /// `1 - mean_c (2 I_c + s) / (P_c + G_c + s)` with soft intersection,
    /// where sums run over batch and pixels.
    pub fn dice_loss(&mut self, probs: Var, onehot: Array, smooth: f64) -> Result<Var> {
        let shape = self.shape(probs).to_vec();
        if shape.len() != 4 || onehot.shape() != shape.as_slice() {
            return Err(Error::dim("dice", format!("probs {shape:?} vs labels {:?}", onehot.shape())));
        }
        let (inter, denom) = dice_stats(self.value(probs), &onehot, smooth);
        let c = shape[1] as f64;
        let score: f64 = inter.iter().zip(&denom).map(|(i, d)| (2.0 * i + smooth) / d).sum::<f64>() / c;
        let out = Array::scalar(1.0 - score);
        self.push(out, Op::Dice { probs, onehot, smooth, inter, denom })
    }

    /// `sum(w * |pred - target|) / sum(w)`; defined as 0 when `sum(w) == 0`.
    pub fn masked_l1(&mut self, pred: Var, target: Array, weight: Array) -> Result<Var> {
        let shape = self.shape(pred);
        if target.shape() != shape || weight.shape() != shape {
            return Err(Error::dim(
                "masked_l1",
                format!("pred {shape:?}, target {:?}, weight {:?}", target.shape(), weight.shape()),
            ));
        }
        let total_weight = weight.sum();
        let p = self.value(pred).data();
        let loss = if total_weight > 0.0 {
            p.iter()
                .zip(target.data())
                .zip(weight.data())
                .map(|((a, b), w)| w * (a - b).abs())
                .sum::<f64>()
                / total_weight
        } else {
            0.0
        };
        self.push(Array::scalar(loss), Op::MaskedL1 { pred, target, weight, total_weight })
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            if !gy.is_finite() {
                return Err(Error::NonFinite { op: format!("backward of {}", node.op.name()) });
            }
            self.backprop(&node.op, &node.value, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Grads { grads })
    }

    fn backprop(&self, op: &Op, y: &Array, gy: &Array, grads: &mut [Option<Array>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if rg(v) {
                        accumulate(grads, v, gy.shape()).add_assign(gy);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if rg(*a) {
                    let g = accumulate(grads, *a, gy.shape());
                    for ((gv, d), o) in g.data_mut().iter_mut().zip(gy.data()).zip(bv) {
                        *gv += d * o;
                    }
                }
                if rg(*b) {
                    let g = accumulate(grads, *b, gy.shape());
                    for ((gv, d), o) in g.data_mut().iter_mut().zip(gy.data()).zip(av) {
                        *gv += d * o;
                    }
                }
            }
            Op::Scale(x, c) => {
                let g = accumulate(grads, *x, gy.shape());
                for (gv, d) in g.data_mut().iter_mut().zip(gy.data()) {
                    *gv += c * d;
                }
            }
            Op::AddSuffix(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, gy.shape()).add_assign(gy);
                }
                if rg(*b) {
                    let sb = self.shape(*b).to_vec();
                    let g = accumulate(grads, *b, &sb);
                    let m = g.len();
                    for chunk in gy.data().chunks(m) {
                        for (gv, d) in g.data_mut().iter_mut().zip(chunk) {
                            *gv += d;
                        }
                    }
                }
            }
            Op::AddChannel(x, b) => {
                if rg(*x) {
                    accumulate(grads, *x, gy.shape()).add_assign(gy);
                }
                if rg(*b) {
                    let (outer, c, inner) = kernels::split_axis(gy.shape(), 1);
                    let g = accumulate(grads, *b, &[c]);
                    let gd = g.data_mut();
                    for o in 0..outer {
                        for (ci, gv) in gd.iter_mut().enumerate() {
                            let base = (o * c + ci) * inner;
                            *gv += gy.data()[base..base + inner].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Linear(x, w) => {
                let sw = self.shape(*w);
                let (k, n) = (sw[0], sw[1]);
                let rows = gy.len() / n;
                if rg(*x) {
                    let sx = self.shape(*x).to_vec();
                    let g = accumulate(grads, *x, &sx);
                    kernels::matmul_nt(gy.data(), self.value(*w).data(), g.data_mut(), rows, n, k);
                }
                if rg(*w) {
                    let g = accumulate(grads, *w, &[k, n]);
                    kernels::matmul_tn(self.value(*x).data(), gy.data(), g.data_mut(), k, rows, n);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                let n = gy.shape()[2];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if rg(*a) {
                    let g = accumulate(grads, *a, &sa);
                    for i in 0..bsz {
                        let gyi = &gy.data()[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let gi = &mut g.data_mut()[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            kernels::matmul_nn(gyi, bi, gi, m, n, k);
                        } else {
                            kernels::matmul_nt(gyi, bi, gi, m, n, k);
                        }
                    }
                }
                if rg(*b) {
                    let g = accumulate(grads, *b, &sb);
                    for i in 0..bsz {
                        let gyi = &gy.data()[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let gi = &mut g.data_mut()[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            kernels::matmul_tn(gyi, ai, gi, n, m, k);
                        } else {
                            kernels::matmul_tn(ai, gyi, gi, k, m, n);
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, c, inner) = kernels::split_axis(y.shape(), *axis);
                let g = accumulate(grads, *x, y.shape());
                let (yd, gd) = (y.data(), gy.data());
                let out = g.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |ci: usize| (o * c + ci) * inner + i;
                        let dot: f64 = (0..c).map(|ci| yd[at(ci)] * gd[at(ci)]).sum();
                        for ci in 0..c {
                            out[at(ci)] += yd[at(ci)] * (gd[at(ci)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = self.shape(*gamma)[0];
                let gm = self.value(*gamma).data().to_vec();
                if rg(*gamma) || rg(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (idx, d) in gy.data().iter().enumerate() {
                        dg[idx % c] += d * xhat[idx];
                        db[idx % c] += d;
                    }
                    if rg(*gamma) {
                        accumulate(grads, *gamma, &[c]).add_assign(&Array::new(&[c], dg).unwrap());
                    }
                    if rg(*beta) {
                        accumulate(grads, *beta, &[c]).add_assign(&Array::new(&[c], db).unwrap());
                    }
                }
                if rg(*x) {
                    let g = accumulate(grads, *x, y.shape());
                    let out = g.data_mut();
                    for (r, &is) in inv_std.iter().enumerate() {
                        let base = r * c;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dxh = gy.data()[base + j] * gm[j];
                            m1 += dxh;
                            m2 += dxh * xhat[base + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dxh = gy.data()[base + j] * gm[j];
                            out[base + j] += is * (dxh - m1 - xhat[base + j] * m2);
                        }
                    }
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std } => {
                let s = y.shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let gsz = c / groups * hw;
                let gm = self.value(*gamma).data().to_vec();
                if rg(*gamma) || rg(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (idx, d) in gy.data().iter().enumerate() {
                        let ch = (idx / hw) % c;
                        dg[ch] += d * xhat[idx];
                        db[ch] += d;
                    }
                    if rg(*gamma) {
                        accumulate(grads, *gamma, &[c]).add_assign(&Array::new(&[c], dg).unwrap());
                    }
                    if rg(*beta) {
                        accumulate(grads, *beta, &[c]).add_assign(&Array::new(&[c], db).unwrap());
                    }
                }
                if rg(*x) {
                    let g = accumulate(grads, *x, s);
                    let out = g.data_mut();
                    for (gi, &is) in inv_std.iter().enumerate() {
                        let base = gi * gsz;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..gsz {
                            let idx = base + j;
                            let dxh = gy.data()[idx] * gm[(idx / hw) % c];
                            m1 += dxh;
                            m2 += dxh * xhat[idx];
                        }
                        m1 /= gsz as f64;
                        m2 /= gsz as f64;
                        for j in 0..gsz {
                            let idx = base + j;
                            let dxh = gy.data()[idx] * gm[(idx / hw) % c];
                            out[idx] += is * (dxh - m1 - xhat[idx] * m2);
                        }
                    }
                }
            }
            Op::Gelu(x) | Op::Silu(x) => {
                let f = if matches!(op, Op::Gelu(_)) { kernels::gelu } else { kernels::silu };
                let xv = self.value(*x).data();
                let g = accumulate(grads, *x, y.shape());
                for ((gv, d), &xi) in g.data_mut().iter_mut().zip(gy.data()).zip(xv) {
                    *gv += d * f(xi).1;
                }
            }
            Op::Conv2d { x, k, geom } => {
                let sx = self.shape(*x).to_vec();
                let sk = self.shape(*k).to_vec();
                let (n, o) = (sx[0], sk[0]);
                let img = geom.c * geom.h * geom.w;
                let outsz = o * geom.cols();
                let (rows, ncol) = (geom.rows(), geom.cols());
                let mut cols = vec![0.0; rows * ncol];
                let xv = self.value(*x).data();
                let kv = self.value(*k).data().to_vec();
                let mut dk = if rg(*k) { Some(vec![0.0; kv.len()]) } else { None };
                let mut dx = if rg(*x) { Some(vec![0.0; xv.len()]) } else { None };
                for b in 0..n {
                    let gyb = &gy.data()[b * outsz..(b + 1) * outsz];
                    if let Some(dk) = dk.as_mut() {
                        kernels::im2col(&xv[b * img..(b + 1) * img], geom, &mut cols);
                        kernels::matmul_nt(gyb, &cols, dk, o, ncol, rows);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mut dcols = vec![0.0; rows * ncol];
                        kernels::matmul_tn(&kv, gyb, &mut dcols, rows, o, ncol);
                        kernels::col2im(&dcols, geom, &mut dx[b * img..(b + 1) * img]);
                    }
                }
                if let Some(dk) = dk {
                    accumulate(grads, *k, &sk).add_assign(&Array::new(&sk, dk).unwrap());
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, &sx).add_assign(&Array::new(&sx, dx).unwrap());
                }
            }
            Op::Permute(x, perm) => {
                let back = gy.permuted(&inverse_perm(perm));
                let sx = self.shape(*x).to_vec();
                accumulate(grads, *x, &sx).add_assign(&back);
            }
            Op::Reshape(x) => {
                let sx = self.shape(*x).to_vec();
                let back = gy.clone().reshaped(&sx).expect("reshape preserves size");
                accumulate(grads, *x, &sx).add_assign(&back);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = kernels::split_axis(y.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let sp = self.shape(p).to_vec();
                    let ext = sp[*axis];
                    if rg(p) {
                        let g = accumulate(grads, p, &sp);
                        let gd = g.data_mut();
                        for o in 0..outer {
                            let src = &gy.data()[(o * total + offset) * inner..(o * total + offset + ext) * inner];
                            for (gv, d) in gd[o * ext * inner..(o + 1) * ext * inner].iter_mut().zip(src) {
                                *gv += d;
                            }
                        }
                    }
                    offset += ext;
                }
            }
            Op::Narrow { x, axis, start } => {
                let sx = self.shape(*x).to_vec();
                let (outer, ext, inner) = kernels::split_axis(&sx, *axis);
                let len = y.shape()[*axis];
                let g = accumulate(grads, *x, &sx);
                let gd = g.data_mut();
                for o in 0..outer {
                    let base = (o * ext + start) * inner;
                    let src = &gy.data()[o * len * inner..(o + 1) * len * inner];
                    for (gv, d) in gd[base..base + len * inner].iter_mut().zip(src) {
                        *gv += d;
                    }
                }
            }
            Op::Upsample2x(x) => {
                let sx = self.shape(*x).to_vec();
                let (planes, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
                let g = accumulate(grads, *x, &sx);
                let gd = g.data_mut();
                for p in 0..planes {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            gd[(p * h + i / 2) * w + j / 2] += gy.data()[(p * 2 * h + i) * 2 * w + j];
                        }
                    }
                }
            }
            Op::Gather { table, index } => {
                let st = self.shape(*table).to_vec();
                let g = accumulate(grads, *table, &st);
                let gd = g.data_mut();
                for (&i, d) in index.iter().zip(gy.data()) {
                    gd[i] += d;
                }
            }
            Op::SumAll(x) => {
                let d = gy.item();
                let sx = self.shape(*x).to_vec();
                let g = accumulate(grads, *x, &sx);
                for gv in g.data_mut() {
                    *gv += d;
                }
            }
            Op::SoftCrossEntropy { logits, target, probs } => {
                let s = probs.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let scale = gy.item() / (n * hw) as f64;
                let g = accumulate(grads, *logits, s);
                let gd = g.data_mut();
                let (p, t) = (probs.data(), target.data());
                for b in 0..n {
                    for px in 0..hw {
                        let at = |ci: usize| (b * c + ci) * hw + px;
                        let tsum: f64 = (0..c).map(|ci| t[at(ci)]).sum();
                        for ci in 0..c {
                            gd[at(ci)] += scale * (p[at(ci)] * tsum - t[at(ci)]);
                        }
                    }
                }
            }
            Op::Dice { probs, onehot, smooth, inter, denom } => {
                let s = onehot.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let scale = -gy.item() / c as f64;
                let g = accumulate(grads, *probs, s);
                let gd = g.data_mut();
                for b in 0..n {
                    for ci in 0..c {
                        let d = denom[ci];
                        let num = 2.0 * inter[ci] + smooth;
                        for px in 0..hw {
                            let idx = (b * c + ci) * hw + px;
                            gd[idx] += scale * (2.0 * onehot.data()[idx] * d - num) / (d * d);
                        }
                    }
                }
            }
            Op::MaskedL1 { pred, target, weight, total_weight } => {
                if *total_weight > 0.0 {
                    let scale = gy.item() / total_weight;
                    let pv = self.value(*pred).data();
                    let sp = self.shape(*pred).to_vec();
                    let g = accumulate(grads, *pred, &sp);
                    for (((gv, p), t), w) in g.data_mut().iter_mut().zip(pv).zip(target.data()).zip(weight.data()) {
                        let sign = if p > t {
                            1.0
                        } else if p < t {
                            -1.0
                        } else {
                            0.0
                        };
                        *gv += scale * w * sign;
                    }
                }
            }
        }
    }
}

/// Per-class soft intersection `I_c` and denominators `P_c + G_c + s`.
pub(crate) fn dice_stats(probs: &Array, onehot: &Array, smooth: f64) -> (Vec<f64>, Vec<f64>) {
    let s = probs.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut inter = vec![0.0; c];
    let mut denom = vec![smooth; c];
    let (p, t) = (probs.data(), onehot.data());
    for b in 0..n {
        for ci in 0..c {
            let base = (b * c + ci) * hw;
            for px in 0..hw {
                inter[ci] += p[base + px] * t[base + px];
                denom[ci] += p[base + px] + t[base + px];
            }
        }
    }
    (inter, denom)
}
