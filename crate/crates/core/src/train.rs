//! Optimiser, learning-rate schedule, batched gradients, metrics logs and
//! checkpoint selection shared by both training stages.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Array, Bound, Graph, ParamStore, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to arrays whose name ends in `.w`.
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_frac: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 2e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05, warmup_steps: 10, min_lr_frac: 0.05 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && (0.0..=1.0).contains(&self.min_lr_frac);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimiser settings {self:?}")))
        }
    }
}

/// Linear warmup then cosine decay from `lr` to `lr * min_lr_frac` at `total`.
pub fn cosine_lr(cfg: &OptimConfig, step: usize, total: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = total.saturating_sub(cfg.warmup_steps).max(1);
    let t = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    let floor = cfg.lr * cfg.min_lr_frac;
    floor + 0.5 * (cfg.lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: OptimConfig,
    m: ParamStore,
    v: ParamStore,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW { cfg, m: ParamStore::new(), v: ParamStore::new(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite { op: format!("gradient of {name}") });
            }
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Array::zeros(p.shape()));
                self.v.insert(name.clone(), Array::zeros(p.shape()));
            }
            let m = self.m.get_mut(name).expect("inserted");
            let decay = if name.ends_with(".w") { c.weight_decay } else { 0.0 };
            for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            }
            let v = self.v.get_mut(name).expect("inserted");
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            }
            let (m, v) = (self.m.get(name).expect("m"), self.v.get(name).expect("v"));
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let update = (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                *pi -= lr * (update + decay * *pi);
            }
        }
        Ok(())
    }
}

/// Mean loss and mean gradients over `samples`. Each sample gets its own
/// graph; graphs run in parallel and results are summed in sample order, so
/// the output does not depend on the number of worker threads.
pub fn batch_gradients<S, F>(params: &ParamStore, samples: &[S], loss_fn: F) -> Result<(f64, ParamStore)>
where
    S: Sync,
    F: Fn(&mut Graph, &Bound, &S) -> Result<Var> + Sync,
{
    if samples.is_empty() {
        return Err(Error::Contract { op: "batch_gradients".into(), detail: "empty batch".into() });
    }
    let per: Vec<Result<(f64, ParamStore)>> = samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let b = params.bind(&mut g, true);
            let loss = loss_fn(&mut g, &b, s)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "loss".into() });
            }
            let mut grads = g.backward(loss)?;
            Ok((value, params.collect_grads(&b, &mut grads)))
        })
        .collect();
    let n = samples.len() as f64;
    let mut total = 0.0;
    let mut sum: Option<ParamStore> = None;
    for r in per {
        let (l, g) = r?;
        total += l;
        match &mut sum {
            None => sum = Some(g),
            Some(acc) => {
                for (name, a) in acc.iter_mut() {
                    let b = g.get(name).expect("same parameter set");
                    a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let mut grads = sum.expect("non-empty batch");
    for (_, a) in grads.iter_mut() {
        a.data_mut().iter_mut().for_each(|x| *x /= n);
    }
    Ok((total / n, grads))
}

/// Mean of a per-sample scalar without gradients.
pub fn batch_eval<S, F>(params: &ParamStore, samples: &[S], loss_fn: F) -> Result<f64>
where
    S: Sync,
    F: Fn(&mut Graph, &Bound, &S) -> Result<Var> + Sync,
{
    let vals: Vec<Result<f64>> = samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let b = params.bind(&mut g, false);
            let loss = loss_fn(&mut g, &b, s)?;
            Ok(g.value(loss).item())
        })
        .collect();
    let mut total = 0.0;
    for v in vals {
        total += v?;
    }
    let mean = total / samples.len().max(1) as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite { op: "validation loss".into() });
    }
    Ok(mean)
}

/// Independent RNG stream for one (seed, epoch, index) triple.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Visiting order of `n` items in one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut sample_rng(seed ^ 0x5eed_0fde_5eed_0fde, epoch, usize::MAX >> 32));
    idx
}

/// One line of a metrics log: `key=value` fields separated by spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub fields: Vec<(String, String)>,
}

impl Record {
    pub fn new() -> Self {
        Record { fields: Vec::new() }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(|v| v.parse().ok())
    }

    pub fn to_line(&self) -> String {
        let mut s = String::new();
        for (i, (k, v)) in self.fields.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{k}={v}");
        }
        s
    }

    pub fn parse(line: &str) -> Option<Record> {
        let fields = line
            .split_whitespace()
            .map(|kv| kv.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
            .collect::<Option<Vec<_>>>()?;
        Some(Record { fields })
    }
}

impl Default for Record {
    fn default() -> Self {
        Self::new()
    }
}

/// Append-only line log. Records are also kept in memory.
#[derive(Debug)]
pub struct MetricsLog {
    path: Option<PathBuf>,
    file: Option<File>,
    pub records: Vec<Record>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        MetricsLog { path: None, file: None, records: Vec::new() }
    }

    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog { path: Some(path.to_path_buf()), file: Some(file), records: Vec::new() })
    }

    pub fn push(&mut self, r: Record) -> Result<()> {
        log::info!("{}", r.to_line());
        if let Some(f) = &mut self.file {
            let path = self.path.as_deref().unwrap_or(Path::new("log"));
            writeln!(f, "{}", r.to_line()).map_err(|e| Error::io(path, e))?;
        }
        self.records.push(r);
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vec<Record>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| Record::parse(l).ok_or_else(|| Error::data(path, format!("line {}: not key=value fields", i + 1))))
            .collect()
    }
}

/// Epoch with the smallest value; the earliest wins ties. Non-finite values
/// never win.
pub fn select_checkpoint(values: &[(usize, f64)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(epoch, v) in values {
        if !v.is_finite() {
            continue;
        }
        match best {
            Some((_, b)) if v >= b => {}
            _ => best = Some((epoch, v)),
        }
    }
    best.map(|(e, _)| e)
}

/// `(epoch, value)` pairs of validation records carrying `key`.
pub fn validation_series(records: &[Record], key: &str) -> Vec<(usize, f64)> {
    records
        .iter()
        .filter(|r| r.get("split") == Some("val"))
        .filter_map(|r| Some((r.get("epoch")?.parse().ok()?, r.get_f64(key).unwrap_or(f64::INFINITY))))
        .collect()
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}
