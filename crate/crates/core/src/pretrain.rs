//! Self-supervised pretraining with SAR inputs and per-glacier optical
//! targets: masked reconstruction (OptSimMIM) and full translation
//! (OptTranslator).

use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig, Geometric};
use crate::data::{ssl4sar_split, GlacierSeries, OpticalStats, SSL4SAR_VAL_PER_GLACIER};
use crate::error::{Error, Result};
use crate::model::{Head, Tyrion};
use crate::raster::Raster;
use crate::tensor::{Array, Graph, ParamStore, Var};
use crate::train::{
    batch_eval, batch_gradients, checkpoint_path, cosine_lr, epoch_order, sample_rng, select_checkpoint,
    validation_series, AdamW, MetricsLog, OptimConfig, Record,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    OptSimMim,
    OptTranslator,
}

impl Objective {
    pub fn head(self) -> Head {
        match self {
            Objective::OptSimMim => Head::Simmim,
            Objective::OptTranslator => Head::Translator,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::OptSimMim => "optsimmim",
            Objective::OptTranslator => "opttranslator",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Total optimiser steps; overrides `epochs` when set.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub mask_ratio: f64,
    /// Mask granularity in pixels.
    pub mask_patch: usize,
    pub val_per_glacier: usize,
    /// Taken from the run seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            steps: None,
            batch_size: 4,
            mask_ratio: 0.6,
            mask_patch: 32,
            val_per_glacier: SSL4SAR_VAL_PER_GLACIER,
            seed: 0,
            optim: OptimConfig::default(),
            augment: AugmentConfig { rotations: false, brightness: 0.0, gamma: 0.0, noise_prob: 0.0, ..Default::default() },
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self, input_size: usize) -> Result<()> {
        self.optim.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} outside [0, 1]", self.mask_ratio)));
        }
        if self.mask_patch == 0 || input_size % self.mask_patch != 0 {
            return Err(Error::Config(format!(
                "mask_patch {} must divide the input size {input_size}",
                self.mask_patch
            )));
        }
        Ok(())
    }
}

/// `round(ratio * P)` cells of a `rows × cols` grid, uniformly without
/// replacement.
pub fn generate_mask(rows: usize, cols: usize, ratio: f64, rng: &mut impl Rng) -> Raster<bool> {
    let p = rows * cols;
    let k = ((ratio.clamp(0.0, 1.0) * p as f64).round() as usize).min(p);
    let mut m = Raster::filled(rows, cols, false);
    for i in sample(rng, p, k) {
        m.data_mut()[i] = true;
    }
    m
}

/// Pixel-level weight of a patch mask, broadcast over leading axes of `shape`.
pub fn mask_weight(shape: &[usize], mask: &Raster<bool>, patch: usize) -> Result<Array> {
    let n = shape.len();
    if n < 2 || shape[n - 2] != mask.rows() * patch || shape[n - 1] != mask.cols() * patch {
        return Err(Error::dim(
            "mask",
            format!("{:?} does not match a {}x{} mask of {patch}px patches", shape, mask.rows(), mask.cols()),
        ));
    }
    let (h, w) = (shape[n - 2], shape[n - 1]);
    Ok(Array::from_fn(shape, |i| {
        let p = i % (h * w);
        if mask.get(p / w / patch, p % w / patch) {
            1.0
        } else {
            0.0
        }
    }))
}

/// Zeroes every pixel of the masked patches.
pub fn apply_mask(x: &Array, mask: &Raster<bool>, patch: usize) -> Result<Array> {
    let w = mask_weight(x.shape(), mask, patch)?;
    let data = x.data().iter().zip(w.data()).map(|(v, m)| if *m > 0.0 { 0.0 } else { *v }).collect();
    Array::new(x.shape(), data)
}

/// Mean absolute error over all channels of the masked pixels only.
pub fn optsimmim_loss(g: &mut Graph, pred: Var, target: &Array, mask: &Raster<bool>, patch: usize) -> Result<Var> {
    let weight = mask_weight(g.shape(pred), mask, patch)?;
    if weight.sum() == 0.0 {
        log::warn!("empty reconstruction mask; loss defined as 0");
    }
    g.masked_l1(pred, target.clone(), weight)
}

/// Mean absolute error over every pixel and channel.
pub fn opttranslator_loss(g: &mut Graph, pred: Var, target: &Array) -> Result<Var> {
    let weight = Array::full(g.shape(pred), 1.0);
    g.masked_l1(pred, target.clone(), weight)
}

/// One training input: SAR `[S, S]`, normalised optical `[14, S, S]` and an
/// optional reconstruction mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSample {
    pub sar: Array,
    pub optical: Array,
    pub mask: Option<Raster<bool>>,
}

/// Scenes with the index of their glacier's optical target.
#[derive(Debug, Clone)]
pub struct PretrainData {
    pub optical: Vec<Array>,
    pub train: Vec<(usize, Array)>,
    pub val: Vec<(usize, Array)>,
}

impl PretrainData {
    /// Splits each series by date and normalises the optical targets.
    pub fn build(series: &[GlacierSeries], val_per_glacier: usize) -> Result<Self> {
        let targets = series
            .iter()
            .map(|s| s.optical.as_ref().ok_or_else(|| Error::Validation(format!("{} has no optical target", s.glacier))))
            .collect::<Result<Vec<_>>>()?;
        let stats = OpticalStats::fit(&targets)?;
        let mut data = PretrainData { optical: Vec::new(), train: Vec::new(), val: Vec::new() };
        for (i, s) in series.iter().enumerate() {
            s.validate()?;
            data.optical.push(stats.normalize(targets[i]));
            let (train, val) = ssl4sar_split(s, val_per_glacier);
            let hw = |sc: &crate::data::Scene| {
                let (h, w) = sc.sar.dims();
                sc.sar_array().reshaped(&[1, h, w]).expect("size")
            };
            data.train.extend(train.iter().map(|sc| (i, hw(sc))));
            data.val.extend(val.iter().map(|sc| (i, hw(sc))));
        }
        if data.train.is_empty() {
            return Err(Error::Validation("no pretraining scenes left after the validation split".into()));
        }
        Ok(data)
    }
}

fn make_sample(
    sar: &Array,
    optical: &Array,
    geo: &Geometric,
    objective: Objective,
    cfg: &PretrainConfig,
    rng: &mut impl Rng,
) -> PretrainSample {
    let s = geo.out;
    let sar = geo.apply(sar).reshaped(&[s, s]).expect("size");
    let optical = geo.apply(optical);
    let mask = match objective {
        Objective::OptSimMim => Some(generate_mask(s / cfg.mask_patch, s / cfg.mask_patch, cfg.mask_ratio, rng)),
        Objective::OptTranslator => None,
    };
    PretrainSample { sar, optical, mask }
}

/// Loss of one sample; the SAR input is masked for the reconstruction
/// objective.
pub fn sample_loss(model: &Tyrion, g: &mut Graph, b: &crate::tensor::Bound, s: &PretrainSample, patch: usize) -> Result<Var> {
    let n = s.sar.shape()[0];
    let input = match &s.mask {
        Some(m) => apply_mask(&s.sar, m, patch)?,
        None => s.sar.clone(),
    };
    let x = g.constant(input.reshaped(&[1, 1, n, n])?);
    let pred = model.forward(g, b, x)?;
    let c = s.optical.shape()[0];
    let target = s.optical.clone().reshaped(&[1, c, n, n])?;
    match &s.mask {
        Some(m) => optsimmim_loss(g, pred, &target, m, patch),
        None => opttranslator_loss(g, pred, &target),
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best: ParamStore,
    pub last: ParamStore,
    pub steps: usize,
    pub records: Vec<Record>,
}

/// Optional on-disk outputs of a run.
pub struct RunOutputs<'a> {
    pub dir: Option<&'a Path>,
    pub log: &'a mut MetricsLog,
    pub timing: Option<&'a mut MetricsLog>,
}

pub(crate) fn save_epoch(dir: Option<&Path>, epoch: usize, params: &ParamStore) -> Result<()> {
    if let Some(d) = dir {
        params.save(&checkpoint_path(d, epoch))?;
    }
    Ok(())
}

pub(crate) fn time_record(out: &mut RunOutputs, epoch: usize, phase: &str, t: Instant) -> Result<()> {
    if let Some(tl) = out.timing.as_deref_mut() {
        tl.push(Record::new().with("epoch", epoch).with("phase", phase).with("seconds", format!("{:.3}", t.elapsed().as_secs_f64())))?;
    }
    Ok(())
}

/// Trains `model` (whose head must match `objective`) and keeps the
/// parameters of the epoch with the lowest validation L1.
pub fn pretrain_loop(
    model: &mut Tyrion,
    data: &PretrainData,
    objective: Objective,
    cfg: &PretrainConfig,
    out: &mut RunOutputs,
) -> Result<TrainOutcome> {
    let s = model.cfg.input_size;
    cfg.validate(s)?;
    if model.cfg.head != objective.head() {
        return Err(Error::Config(format!("{} needs the {:?} head", objective.name(), objective.head())));
    }
    let per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total = cfg.steps.unwrap_or(cfg.epochs * per_epoch);
    if total == 0 {
        return Err(Error::Config("pretraining needs at least one step".into()));
    }
    let epochs = total.div_ceil(per_epoch);
    let val: Vec<PretrainSample> = data
        .val
        .iter()
        .enumerate()
        .map(|(i, (gi, sar))| {
            let geo = augment::center(sar.shape()[1], sar.shape()[2], s)?;
            Ok(make_sample(sar, &data.optical[*gi], &geo, objective, cfg, &mut sample_rng(cfg.seed, usize::MAX >> 33, i)))
        })
        .collect::<Result<_>>()?;
    let patch = cfg.mask_patch;
    let mut opt = AdamW::new(cfg.optim.clone());
    let mut step = 0;
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let start_len = out.log.records.len();
    for epoch in 1..=epochs {
        let t = Instant::now();
        let order = epoch_order(cfg.seed, epoch, data.train.len());
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if step == total {
                break;
            }
            let batch: Vec<PretrainSample> = chunk
                .iter()
                .map(|&i| {
                    let (gi, sar) = &data.train[i];
                    let mut rng = sample_rng(cfg.seed, epoch, i);
                    let geo = augment::sample_geometric(&mut rng, sar.shape()[1], sar.shape()[2], s, &cfg.augment)?;
                    Ok(make_sample(sar, &data.optical[*gi], &geo, objective, cfg, &mut rng))
                })
                .collect::<Result<_>>()?;
            let m: &Tyrion = model;
            let (loss, grads) = batch_gradients(&m.params, &batch, |g, b, smp| sample_loss(m, g, b, smp, patch))
                .map_err(|e| diagnose(e, epoch, step))?;
            let lr = cosine_lr(&cfg.optim, step, total);
            opt.step(&mut model.params, &grads, lr).map_err(|e| diagnose(e, epoch, step))?;
            sum += loss;
            batches += 1;
            step += 1;
        }
        time_record(out, epoch, "train", t)?;
        let t = Instant::now();
        out.log.push(
            Record::new()
                .with("epoch", epoch)
                .with("split", "train")
                .with("steps", step)
                .with("loss", sum / batches.max(1) as f64),
        )?;
        let m: &Tyrion = model;
        let vloss = if val.is_empty() {
            sum / batches.max(1) as f64
        } else {
            batch_eval(&m.params, &val, |g, b, smp| sample_loss(m, g, b, smp, patch))?
        };
        out.log.push(Record::new().with("epoch", epoch).with("split", "val").with("loss", vloss))?;
        save_epoch(out.dir, epoch, &model.params)?;
        if best.as_ref().is_none_or(|(_, b, _)| vloss < *b) {
            best = Some((epoch, vloss, model.params.clone()));
        }
        time_record(out, epoch, "val", t)?;
    }
    let records = out.log.records[start_len..].to_vec();
    let (best_epoch, _, best_params) = best.expect("at least one epoch");
    debug_assert_eq!(select_pretrain_checkpoint(&records), Some(best_epoch));
    Ok(TrainOutcome { best_epoch, best: best_params, last: model.params.clone(), steps: step, records })
}

pub(crate) fn diagnose(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::NonFinite { op: format!("{op} at epoch {epoch}, step {step}") },
        other => other,
    }
}

/// Epoch with the lowest validation L1; earliest on ties.
pub fn select_pretrain_checkpoint(records: &[Record]) -> Option<usize> {
    select_checkpoint(&validation_series(records, "loss"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_series, SynthDatasetSpec, SynthParams};
    use crate::model::ModelConfig;
    use crate::tensor::grad_check_multi;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(generate_mask(16, 16, 0.0, &mut rng).data().iter().filter(|v| **v).count(), 0);
        assert_eq!(generate_mask(16, 16, 1.0, &mut rng).data().iter().filter(|v| **v).count(), 256);
        assert_eq!(generate_mask(16, 16, 0.6, &mut rng).data().iter().filter(|v| **v).count(), 154);
        let a = generate_mask(16, 16, 0.6, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, generate_mask(16, 16, 0.6, &mut ChaCha8Rng::seed_from_u64(9)));
    }

    #[test]
    fn masking() {
        let x = Array::from_fn(&[2, 8, 8], |i| i as f64 + 1.0);
        let none = Raster::filled(2, 2, false);
        assert_eq!(apply_mask(&x, &none, 4).unwrap(), x);
        let all = Raster::filled(2, 2, true);
        assert!(apply_mask(&x, &all, 4).unwrap().data().iter().all(|v| *v == 0.0));
        let mut one = none.clone();
        one.set(1, 0, true);
        let y = apply_mask(&x, &one, 4).unwrap();
        let zeroed: Vec<usize> = (0..128).filter(|&i| y.data()[i] == 0.0).collect();
        assert_eq!(zeroed.len(), 2 * 16);
        for &i in &zeroed {
            let (r, c) = (i % 64 / 8, i % 8);
            assert!((4..8).contains(&r) && c < 4);
        }
        for i in 0..128 {
            if !zeroed.contains(&i) {
                assert_eq!(y.data()[i].to_bits(), x.data()[i].to_bits());
            }
        }
        assert!(apply_mask(&x, &one, 3).is_err());
    }

    fn loss_value(f: impl FnOnce(&mut Graph, Var) -> Result<Var>, pred: &Array) -> f64 {
        let mut g = Graph::new();
        let p = g.param(pred.clone());
        let l = f(&mut g, p).unwrap();
        g.value(l).item()
    }

    #[test]
    fn loss_values() {
        let t = Array::from_fn(&[1, 14, 8, 8], |i| (i as f64 * 0.1).cos());
        let mut mask = Raster::filled(2, 2, false);
        mask.set(0, 1, true);
        assert_eq!(loss_value(|g, p| optsimmim_loss(g, p, &t, &mask, 4), &t), 0.0);
        let shifted = t.map(|v| v + 1.0);
        assert!((loss_value(|g, p| optsimmim_loss(g, p, &t, &mask, 4), &shifted) - 1.0).abs() < 1e-12);
        let half = t.map(|v| v + 0.5);
        assert!((loss_value(|g, p| opttranslator_loss(g, p, &t), &half) - 0.5).abs() < 1e-12);
        let empty = Raster::filled(2, 2, false);
        assert_eq!(loss_value(|g, p| optsimmim_loss(g, p, &t, &empty, 4), &shifted), 0.0);
        let r = Array::from_fn(&[1, 14, 8, 8], |i| (i as f64 * 0.7).sin());
        let brute = r.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / r.len() as f64;
        assert!((loss_value(|g, p| opttranslator_loss(g, p, &t), &r) - brute).abs() < 1e-12);
        let full = Raster::filled(2, 2, true);
        let a = loss_value(|g, p| optsimmim_loss(g, p, &t, &full, 4), &r);
        let b = loss_value(|g, p| opttranslator_loss(g, p, &t), &r);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn masked_loss_gradient_is_local() {
        let t = Array::from_fn(&[1, 2, 8, 8], |i| (i as f64 * 0.3).cos());
        let pred = Array::from_fn(&[1, 2, 8, 8], |i| (i as f64 * 0.11).sin());
        let mut mask = Raster::filled(2, 2, false);
        mask.set(1, 1, true);
        let mut g = Graph::new();
        let p = g.param(pred.clone());
        let l = optsimmim_loss(&mut g, p, &t, &mask, 4).unwrap();
        let grads = g.backward(l).unwrap();
        let gp = grads.get(p).unwrap();
        let w = mask_weight(&[1, 2, 8, 8], &mask, 4).unwrap();
        for i in 0..gp.len() {
            if w.data()[i] == 0.0 {
                assert_eq!(gp.data()[i], 0.0);
            } else {
                assert!(gp.data()[i].abs() > 0.0);
            }
        }
        let picks: Vec<(usize, usize)> = (0..128).step_by(5).map(|i| (0, i)).collect();
        let rep = grad_check_multi(|g, v| optsimmim_loss(g, v[0], &t, &mask, 4), &[pred], 1e-6, &picks).unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }

    #[test]
    fn checkpoint_selection() {
        let log = |v: &[f64]| -> Vec<Record> {
            v.iter()
                .enumerate()
                .flat_map(|(i, &x)| {
                    [
                        Record::new().with("epoch", i + 1).with("split", "train").with("loss", 0.0),
                        Record::new().with("epoch", i + 1).with("split", "val").with("loss", x),
                    ]
                })
                .collect()
        };
        assert_eq!(select_pretrain_checkpoint(&log(&[4.0, 3.0, 2.0])), Some(3));
        assert_eq!(select_pretrain_checkpoint(&log(&[3.0, 1.0, 2.0])), Some(2));
        assert_eq!(select_pretrain_checkpoint(&log(&[2.0, 1.0, 1.0])), Some(2));
    }

    fn toy_data(glaciers: usize, scenes: usize, val: usize) -> PretrainData {
        let spec = SynthDatasetSpec {
            glaciers,
            scenes_per_glacier: scenes,
            seed: 3,
            template: SynthParams { size: 64, resolution: 50.0, ..Default::default() },
            labels: false,
        };
        let series: Vec<_> = (0..glaciers).map(|g| synth_series(&spec, g).unwrap()).collect();
        PretrainData::build(&series, val).unwrap()
    }

    fn toy_model(obj: Objective) -> Tyrion {
        let mut cfg = ModelConfig::toy();
        cfg.head = obj.head();
        Tyrion::new(cfg, 7).unwrap()
    }

    #[test]
    fn loss_decreases_and_is_deterministic() {
        let data = toy_data(2, 5, 1);
        assert_eq!((data.train.len(), data.val.len()), (8, 2));
        let cfg = PretrainConfig { epochs: 2, mask_patch: 8, batch_size: 4, ..Default::default() };
        let run = || {
            let mut m = toy_model(Objective::OptSimMim);
            let mut log = MetricsLog::in_memory();
            let o = pretrain_loop(&mut m, &data, Objective::OptSimMim, &cfg, &mut RunOutputs { dir: None, log: &mut log, timing: None }).unwrap();
            (o, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la.records, lb.records);
        assert_eq!(a.last.to_bytes(), b.last.to_bytes());
        let train: Vec<f64> = a.records.iter().filter(|r| r.get("split") == Some("train")).map(|r| r.get_f64("loss").unwrap()).collect();
        assert_eq!(train.len(), 2);
        assert!(train[1] < train[0], "{train:?}");
        assert_eq!(a.steps, 4);
    }

    #[test]
    fn translator_fits_a_constant_mapping() {
        // SAR input mapped to a target made of copies of the input itself.
        let mut cfg = ModelConfig::toy();
        cfg.head = Head::Translator;
        let mut model = Tyrion::new(cfg, 2).unwrap();
        let spec = SynthDatasetSpec {
            glaciers: 1,
            scenes_per_glacier: 1,
            seed: 4,
            template: SynthParams { size: 64, resolution: 50.0, speckle: 0.0, ..Default::default() },
            labels: false,
        };
        let sar = synth_series(&spec, 0).unwrap().scenes[0].sar_array();
        let optical = Array::from_fn(&[14, 64, 64], |i| sar.data()[i % 4096]);
        let samples = vec![PretrainSample { sar: sar.clone(), optical, mask: None }];
        let mut opt = AdamW::new(OptimConfig { lr: 1e-2, warmup_steps: 0, weight_decay: 0.0, min_lr_frac: 1.0, ..Default::default() });
        let mut last = f64::INFINITY;
        for step in 0..200 {
            let m = &model;
            let (l, grads) = batch_gradients(&m.params, &samples, |g, b, s| sample_loss(m, g, b, s, 8)).unwrap();
            last = l;
            if l < 0.05 {
                break;
            }
            let lr = cosine_lr(&opt.cfg, step, 200);
            opt.step(&mut model.params, &grads, lr).unwrap();
        }
        assert!(last < 0.05, "final L1 {last}");
    }

    #[test]
    fn wrong_head_is_rejected() {
        let data = toy_data(1, 3, 1);
        let mut m = toy_model(Objective::OptTranslator);
        let mut log = MetricsLog::in_memory();
        let cfg = PretrainConfig { mask_patch: 8, ..Default::default() };
        let r = pretrain_loop(&mut m, &data, Objective::OptSimMim, &cfg, &mut RunOutputs { dir: None, log: &mut log, timing: None });
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
