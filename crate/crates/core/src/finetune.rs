//! Supervised zone segmentation: loss stack, ocean-only mixup,
//! augmentation and the training loop with MDE-based checkpoint selection.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig};
use crate::data::Scene;
use crate::ensemble::{infer_scene, InferConfig};
use crate::error::{Error, Result};
use crate::metrics::{mde, FrontSet};
use crate::model::{crop_inner, Head, Tyrion};
use crate::pretrain::{diagnose, save_epoch, time_record, RunOutputs, TrainOutcome};
use crate::raster::{ConfidenceMap, Zone, ZoneMask};
use crate::tensor::{softmax_channel, Array, Bound, Graph, ParamStore, Var};
use crate::train::{
    batch_gradients, cosine_lr, epoch_order, sample_rng, select_checkpoint, validation_series, AdamW, OptimConfig,
    Record,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub label_smoothing: f64,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { label_smoothing: 0.1, dice_smooth: 1.0 }
    }
}

/// `(1 - eps) * one_hot + eps / 4`, shape `[1, 4, H, W]`.
pub fn smoothed_target(labels: &ZoneMask, eps: f64) -> Array {
    let onehot = ConfidenceMap::one_hot(labels);
    let (h, w) = labels.dims();
    Array::new(&[1, Zone::COUNT, h, w], onehot.data().iter().map(|v| (1.0 - eps) * v + eps / Zone::COUNT as f64).collect())
        .expect("size")
}

fn onehot(labels: &ZoneMask) -> Array {
    smoothed_target(labels, 0.0)
}

/// Cross-entropy of `[1, 4, H, W]` logits against smoothed labels, mean over
/// pixels.
pub fn smoothed_ce(g: &mut Graph, logits: Var, labels: &ZoneMask, eps: f64) -> Result<Var> {
    g.soft_cross_entropy(logits, smoothed_target(labels, eps))
}

/// `1 - mean_c (2 I_c + s) / (P_c + G_c + s)` over `[1, 4, H, W]` probabilities.
pub fn dice_loss(g: &mut Graph, probs: Var, labels: &ZoneMask, smooth: f64) -> Result<Var> {
    g.dice_loss(probs, onehot(labels), smooth)
}

fn inner_labels(labels: &ZoneMask, inner: usize) -> Result<ZoneMask> {
    let (h, w) = labels.dims();
    if inner > h || inner > w || (h - inner) % 2 != 0 || (w - inner) % 2 != 0 {
        return Err(Error::contract("zone_loss", format!("cannot take a central {inner}x{inner} crop of {h}x{w}")));
    }
    ZoneMask::new(labels.grid.window((h - inner) / 2, (w - inner) / 2, inner, inner), labels.resolution)
}

/// The four terms: CE full, CE inner, dice full, dice inner.
pub fn zone_loss_terms(g: &mut Graph, logits: Var, labels: &ZoneMask, inner: usize, cfg: &LossConfig) -> Result<[Var; 4]> {
    let inner_lab = inner_labels(labels, inner)?;
    let inner_logits = crop_inner(g, logits, inner)?;
    let ce_full = smoothed_ce(g, logits, labels, cfg.label_smoothing)?;
    let ce_inner = smoothed_ce(g, inner_logits, &inner_lab, cfg.label_smoothing)?;
    let p_full = softmax_channel(g, logits)?;
    let p_inner = softmax_channel(g, inner_logits)?;
    let d_full = dice_loss(g, p_full, labels, cfg.dice_smooth)?;
    let d_inner = dice_loss(g, p_inner, &inner_lab, cfg.dice_smooth)?;
    Ok([ce_full, ce_inner, d_full, d_inner])
}

/// Unweighted sum of the four terms.
pub fn zone_loss(g: &mut Graph, logits: Var, labels: &ZoneMask, inner: usize, cfg: &LossConfig) -> Result<Var> {
    let [a, b, c, d] = zone_loss_terms(g, logits, labels, inner, cfg)?;
    let ab = g.add(a, b)?;
    let cd = g.add(c, d)?;
    g.add(ab, cd)
}

/// Entropy of the smoothed target: the least value cross-entropy can take.
pub fn smoothed_ce_floor(eps: f64) -> f64 {
    let k = Zone::COUNT as f64;
    let hi = 1.0 - eps + eps / k;
    let lo = eps / k;
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    term(hi) + (k - 1.0) * term(lo)
}

/// SAR `[H, W]` in `[0, 1]` with its zone labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoneSample {
    pub sar: Array,
    pub zones: ZoneMask,
}

impl ZoneSample {
    pub fn from_scene(s: &Scene) -> Result<Self> {
        let zones = s
            .zones
            .clone()
            .ok_or_else(|| Error::Validation(format!("scene {} has no zone labels", s.meta.stem())))?;
        Ok(ZoneSample { sar: s.sar_array(), zones })
    }
}

/// Blends `b` into `a` on the ocean pixels of `a` only; labels stay `a`'s.
pub fn ocean_mixup(a: &ZoneSample, b: &ZoneSample, lambda: f64) -> Result<ZoneSample> {
    if a.sar.shape() != b.sar.shape() {
        return Err(Error::dim("ocean_mixup", format!("{:?} vs {:?}", a.sar.shape(), b.sar.shape())));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract("ocean_mixup", format!("lambda {lambda} outside [0, 1]")));
    }
    let ocean = Zone::Ocean.id();
    let sar = a
        .sar
        .data()
        .iter()
        .zip(b.sar.data())
        .zip(a.zones.grid.data())
        .map(|((&x, &y), &z)| if z == ocean { lambda * x + (1.0 - lambda) * y } else { x })
        .collect();
    Ok(ZoneSample { sar: Array::new(a.sar.shape(), sar)?, zones: a.zones.clone() })
}

/// Geometric transforms for SAR and labels alike, photometric ones for SAR
/// only; the result is `out × out`.
pub fn augment(sample: &ZoneSample, out: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<ZoneSample> {
    let (h, w) = sample.zones.dims();
    let geo = augment::sample_geometric(rng, h, w, out, cfg)?;
    let photo = augment::sample_photometric(rng, cfg);
    let sar = geo.apply(&sample.sar.clone().reshaped(&[1, h, w])?);
    let sar = photo.apply(&sar, rng).reshaped(&[out, out])?;
    let zones = ZoneMask::new(geo.apply_labels(&sample.zones.grid), sample.zones.resolution)?;
    Ok(ZoneSample { sar, zones })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Total optimiser steps; overrides `epochs` when set.
    pub steps: Option<usize>,
    pub batch_size: usize,
    /// Taken from the run seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub mixup_prob: f64,
    /// Blend weights are drawn from `[mixup_min_lambda, 1]`.
    pub mixup_min_lambda: f64,
    /// Fraction of each glacier's labelled scenes used for validation.
    pub val_frac: f64,
    pub val_tta: bool,
    pub val_overlap: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 20,
            steps: None,
            batch_size: 4,
            seed: 0,
            optim: OptimConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            mixup_prob: 0.3,
            mixup_min_lambda: 0.5,
            val_frac: 0.1,
            val_tta: false,
            val_overlap: false,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.augment.validate()?;
        let p = |v: f64| (0.0..=1.0).contains(&v);
        if self.batch_size == 0 || !p(self.mixup_prob) || !p(self.mixup_min_lambda) || !(0.0..1.0).contains(&self.val_frac) {
            return Err(Error::Config(format!(
                "invalid finetune settings: batch_size {}, mixup_prob {}, mixup_min_lambda {}, val_frac {}",
                self.batch_size, self.mixup_prob, self.mixup_min_lambda, self.val_frac
            )));
        }
        if !(0.0..0.75).contains(&self.loss.label_smoothing) || self.loss.dice_smooth < 0.0 {
            return Err(Error::Config(format!("invalid loss settings {:?}", self.loss)));
        }
        Ok(())
    }

    pub fn infer(&self) -> InferConfig {
        InferConfig { tta: self.val_tta, overlap: self.val_overlap }
    }
}

/// Whole-scene split stratified by glacier: `round(frac * n)` scenes of each
/// glacier, drawn with a seeded shuffle, go to validation.
pub fn split_train_val(scenes: &[Scene], frac: f64, seed: u64) -> (Vec<Scene>, Vec<Scene>) {
    let mut glaciers: Vec<&str> = scenes.iter().map(|s| s.meta.glacier.as_str()).collect();
    glaciers.sort();
    glaciers.dedup();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (gi, g) in glaciers.iter().enumerate() {
        let mut group: Vec<&Scene> = scenes.iter().filter(|s| s.meta.glacier == *g).collect();
        group.sort_by(|a, b| a.meta.stem().cmp(&b.meta.stem()));
        group.shuffle(&mut sample_rng(seed, 0, gi));
        let k = (frac * group.len() as f64).round() as usize;
        val.extend(group[..k].iter().map(|s| (*s).clone()));
        train.extend(group[k..].iter().map(|s| (*s).clone()));
    }
    (train, val)
}

/// Pooled MDE of the post-processed predictions of `model` on `scenes`.
pub fn validation_mde(model: &Tyrion, scenes: &[Scene], cfg: InferConfig) -> Result<(Option<f64>, usize)> {
    let mut sets = Vec::with_capacity(scenes.len());
    for s in scenes {
        let gt = s
            .front
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("scene {} has no front label", s.meta.stem())))?;
        let bbox = s
            .meta
            .bbox
            .ok_or_else(|| Error::Validation(format!("scene {} has no bounding box", s.meta.stem())))?;
        let out = infer_scene(std::slice::from_ref(model), &s.sar_array(), &bbox, s.meta.resolution, cfg)?;
        sets.push(FrontSet::from_masks(gt, &out.front, &s.meta.sensor, &s.meta.glacier)?);
    }
    let no_front = sets.iter().filter(|s| !s.has_prediction()).count();
    Ok((mde(&sets)?, no_front))
}

pub fn sample_loss(model: &Tyrion, g: &mut Graph, b: &Bound, s: &ZoneSample, loss: &LossConfig) -> Result<Var> {
    let n = model.cfg.input_size;
    let x = g.constant(s.sar.clone().reshaped(&[1, 1, n, n])?);
    let logits = model.forward(g, b, x)?;
    zone_loss(g, logits, &s.zones, model.cfg.inner_size, loss)
}

fn draw_sample(train: &[ZoneSample], i: usize, epoch: usize, out: usize, cfg: &FinetuneConfig) -> Result<ZoneSample> {
    let mut rng = sample_rng(cfg.seed, epoch, i);
    let mut s = train[i].clone();
    if cfg.mixup_prob > 0.0 && train.len() > 1 && rng.random_bool(cfg.mixup_prob) {
        let j = (i + rng.random_range(1..train.len())) % train.len();
        let lambda = rng.random_range(cfg.mixup_min_lambda..=1.0);
        if train[j].sar.shape() == s.sar.shape() {
            s = ocean_mixup(&s, &train[j], lambda)?;
        }
    }
    augment(&s, out, &cfg.augment, &mut rng)
}

/// Trains the zones head and keeps the epoch with the lowest validation MDE.
/// The first batch loss before any update is logged as `split=step0`.
pub fn finetune_loop(model: &mut Tyrion, train: &[Scene], val: &[Scene], cfg: &FinetuneConfig, out: &mut RunOutputs) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.cfg.head != Head::Zones {
        return Err(Error::Config("fine-tuning needs the zones head".into()));
    }
    let samples: Vec<ZoneSample> = train.iter().map(ZoneSample::from_scene).collect::<Result<_>>()?;
    if samples.is_empty() {
        return Err(Error::Validation("no training scenes".into()));
    }
    let s = model.cfg.input_size;
    let per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total = cfg.steps.unwrap_or(cfg.epochs * per_epoch);
    if total == 0 {
        return Err(Error::Config("fine-tuning needs at least one step".into()));
    }
    let epochs = total.div_ceil(per_epoch);
    let mut opt = AdamW::new(cfg.optim.clone());
    let mut step = 0;
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let start_len = out.log.records.len();
    for epoch in 1..=epochs {
        let t = Instant::now();
        let order = epoch_order(cfg.seed, epoch, samples.len());
        let (mut sum, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            if step == total {
                break;
            }
            let batch: Vec<ZoneSample> = chunk.iter().map(|&i| draw_sample(&samples, i, epoch, s, cfg)).collect::<Result<_>>()?;
            let m: &Tyrion = model;
            let (loss, grads) =
                batch_gradients(&m.params, &batch, |g, b, smp| sample_loss(m, g, b, smp, &cfg.loss)).map_err(|e| diagnose(e, epoch, step))?;
            if step == 0 {
                out.log.push(Record::new().with("epoch", 0).with("split", "step0").with("loss", loss))?;
            }
            opt.step(&mut model.params, &grads, cosine_lr(&cfg.optim, step, total)).map_err(|e| diagnose(e, epoch, step))?;
            sum += loss;
            batches += 1;
            step += 1;
        }
        time_record(out, epoch, "train", t)?;
        let t = Instant::now();
        out.log.push(Record::new().with("epoch", epoch).with("split", "train").with("steps", step).with("loss", sum / batches.max(1) as f64))?;
        let (value, no_front) = if val.is_empty() { (None, 0) } else { validation_mde(model, val, cfg.infer())? };
        let score = value.unwrap_or(f64::INFINITY);
        out.log.push(
            Record::new()
                .with("epoch", epoch)
                .with("split", "val")
                .with("mde_m", score)
                .with("no_front", no_front),
        )?;
        save_epoch(out.dir, epoch, &model.params)?;
        let better = match &best {
            None => true,
            Some((_, b, _)) => score < *b,
        };
        if better {
            best = Some((epoch, score, model.params.clone()));
        }
        time_record(out, epoch, "val", t)?;
    }
    let records = out.log.records[start_len..].to_vec();
    let (mut best_epoch, _, mut best_params) = best.expect("at least one epoch");
    if let Some(e) = select_finetune_checkpoint(&records) {
        debug_assert_eq!(e, best_epoch);
    } else {
        // No epoch produced a finite MDE: keep the last parameters.
        best_epoch = epochs;
        best_params = model.params.clone();
    }
    Ok(TrainOutcome { best_epoch, best: best_params, last: model.params.clone(), steps: step, records })
}

/// Epoch with the lowest validation MDE; earliest on ties.
pub fn select_finetune_checkpoint(records: &[Record]) -> Option<usize> {
    select_checkpoint(&validation_series(records, "mde_m"))
}
