//! Subcommand implementations shared by the binary and the FFI crate.
//!
//! Output layout under `paths.out`:
//!
//! ```text
//! pretrain/  config.toml metrics.log timing.log epoch_NNN.ckpt best.ckpt
//! finetune/  config.toml metrics.log timing.log epoch_NNN.ckpt best.ckpt
//! ```
//!
//! Inference writes `<dir>/<glacier>/{zones,fronts,uncertainty}/` plus
//! `<dir>/manifest.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{self, load_dataset, load_front, png_io, DatasetSummary, Scene};
use crate::ensemble::{infer_scene, throughput_report, BenchScene, InferConfig, ThroughputReport};
use crate::error::{Error, Result};
use crate::finetune::{finetune_loop, split_train_val};
use crate::metrics::{compare_runs, sensor_report, Comparison, FrontSet, MdeReport};
use crate::model::{Head, Tyrion};
use crate::pretrain::{pretrain_loop, PretrainData, RunOutputs, TrainOutcome};
use crate::raster::{Raster, Zone};
use crate::tensor::ParamStore;
use crate::train::{MetricsLog, Record};

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("paths.{key} is not set")))
}

/// Generates the synthetic dataset described by `cfg.synth` into `out`.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<DatasetSummary> {
    cfg.validate()?;
    data::make_synth_dataset(out, &cfg.synth_spec())
}

fn stage_dir(cfg: &RunConfig, stage: &str) -> Result<PathBuf> {
    let d = cfg.paths.out.join(stage);
    mkdir(&d)?;
    // The thread count never changes results; it is logged with the timings.
    let snapshot = RunConfig { threads: 0, ..cfg.clone() };
    write_text(&d.join("config.toml"), &snapshot.to_toml()?)?;
    Ok(d)
}

fn run_stage(cfg: &RunConfig, dir: &Path, f: impl FnOnce(&mut RunOutputs) -> Result<TrainOutcome>) -> Result<TrainOutcome> {
    let mut log = MetricsLog::append_to(&dir.join("metrics.log"))?;
    let mut timing = MetricsLog::append_to(&dir.join("timing.log"))?;
    timing.push(Record::new().with("epoch", 0).with("phase", "start").with("threads", rayon::current_num_threads()).with("configured", cfg.threads))?;
    let mut out = RunOutputs { dir: Some(dir), log: &mut log, timing: Some(&mut timing) };
    let outcome = f(&mut out)?;
    outcome.best.save(&dir.join("best.ckpt"))?;
    Ok(outcome)
}

fn init_record(source: &str, path: Option<&Path>, loaded: usize, skipped: usize) -> Record {
    let mut r = Record::new().with("epoch", 0).with("split", "init").with("source", source);
    if let Some(p) = path {
        r = r.with("path", p.display());
    }
    r.with("loaded", loaded).with("skipped", skipped)
}

fn load_into(model: &mut Tyrion, path: &Path, source: &str, log: &mut MetricsLog) -> Result<()> {
    if !path.exists() {
        return Err(Error::data(path, format!("{source} checkpoint not found")));
    }
    let src = ParamStore::load(path)?;
    let rep = model.load_matching(&src);
    if rep.loaded.is_empty() {
        return Err(Error::Checkpoint(format!("{}: no array matches the model", path.display())));
    }
    log::info!("{source}: loaded {} arrays from {} ({} skipped)", rep.loaded.len(), path.display(), rep.skipped.len());
    log.push(init_record(source, Some(path), rep.loaded.len(), rep.skipped.len()))
}

/// Stage 2: self-supervised pretraining. Setups 3 and 4 only; setup 4 starts
/// from `paths.init_weights`.
pub fn pretrain(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let objective = cfg
        .objective
        .objective()
        .ok_or_else(|| Error::Config(format!("setup {} has no pretraining stage", cfg.setup)))?;
    let series = load_dataset(require(&cfg.paths.pretrain_data, "pretrain_data")?)?;
    let data = PretrainData::build(&series, cfg.pretrain.val_per_glacier)?;
    let mut model = Tyrion::new(crate::model::ModelConfig { head: objective.head(), ..cfg.model.clone() }, cfg.seed)?;
    let mut pcfg = cfg.pretrain.clone();
    pcfg.seed = cfg.seed;
    let dir = stage_dir(cfg, "pretrain")?;
    run_stage(cfg, &dir, |out| {
        match &cfg.paths.init_weights {
            Some(p) => load_into(&mut model, p, "external", out.log)?,
            None => out.log.push(init_record("scratch", None, 0, 0))?,
        }
        pretrain_loop(&mut model, &data, objective, &pcfg, out)
    })
}

/// Labelled scenes of a dataset root, in glacier then file order.
pub fn labelled_scenes(root: &Path) -> Result<Vec<Scene>> {
    Ok(load_dataset(root)?.into_iter().flat_map(|s| s.scenes).filter(|s| s.zones.is_some()).collect())
}

/// Stage 3: fine-tuning on zone labels. The starting weights follow the
/// setup: scratch (1), external (2), pretrained (3, 4).
pub fn finetune(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let scenes = labelled_scenes(require(&cfg.paths.finetune_data, "finetune_data")?)?;
    if scenes.is_empty() {
        return Err(Error::Validation("no scenes with zone labels".into()));
    }
    let (train, val) = split_train_val(&scenes, cfg.finetune.val_frac, cfg.seed);
    let mut model = Tyrion::new(crate::model::ModelConfig { head: Head::Zones, ..cfg.model.clone() }, cfg.seed)?;
    let mut fcfg = cfg.finetune.clone();
    fcfg.seed = cfg.seed;
    let pretrained = cfg.pretrained_path();
    let dir = stage_dir(cfg, "finetune")?;
    run_stage(cfg, &dir, |out| {
        match cfg.setup {
            1 => out.log.push(init_record("scratch", None, 0, 0))?,
            2 => load_into(&mut model, require(&cfg.paths.init_weights, "init_weights")?, "external", out.log)?,
            _ => load_into(&mut model, &pretrained, "pretrained", out.log)?,
        }
        finetune_loop(&mut model, &train, &val, &fcfg, out)
    })
}

/// Ensemble member checkpoints; defaults to the fine-tuned best checkpoint.
pub fn member_paths(cfg: &RunConfig) -> Vec<PathBuf> {
    if cfg.ensemble.members.is_empty() {
        vec![cfg.paths.out.join("finetune").join("best.ckpt")]
    } else {
        cfg.ensemble.members.clone()
    }
}

pub fn load_member(cfg: &RunConfig, path: &Path) -> Result<Tyrion> {
    Tyrion::from_params(crate::model::ModelConfig { head: Head::Zones, ..cfg.model.clone() }, ParamStore::load(path)?)
}

pub fn load_members(cfg: &RunConfig) -> Result<Vec<Tyrion>> {
    cfg.model.validate()?;
    member_paths(cfg).iter().map(|p| load_member(cfg, p)).collect()
}

pub fn infer_config(cfg: &RunConfig) -> InferConfig {
    InferConfig { tta: cfg.ensemble.tta, overlap: cfg.ensemble.overlap }
}

/// Counts of an inference run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InferSummary {
    pub scenes: usize,
    pub no_front: usize,
}

/// Uncertainty is stored per class as `round(std * UNCERTAINTY_SCALE)` in 8 bits.
pub const UNCERTAINTY_SCALE: f64 = 255.0;

const CLASS_NAMES: [&str; Zone::COUNT] = ["no_info", "rock", "glacier", "ocean"];

/// Runs the ensemble over every scene under `scenes` (dataset layout) and
/// writes zones, fronts and uncertainty rasters to `out`. Every scene needs a
/// `bbox` in its metadata.
pub fn infer(cfg: &RunConfig, scenes: &Path, out: &Path) -> Result<InferSummary> {
    let members = load_members(cfg)?;
    let icfg = infer_config(cfg);
    let mut manifest = String::new();
    let mut summary = InferSummary::default();
    for series in load_dataset(scenes)? {
        for dir in ["zones", "fronts", "uncertainty"] {
            mkdir(&out.join(&series.glacier).join(dir))?;
        }
        for s in &series.scenes {
            let stem = s.meta.stem();
            let bbox = s.meta.bbox.ok_or_else(|| {
                Error::Validation(format!("{}/{stem}: no bbox in the scene metadata; inference needs one", series.glacier))
            })?;
            let r = infer_scene(&members, &s.sar_array(), &bbox, s.meta.resolution, icfg)?;
            let g = out.join(&series.glacier);
            data::save_zones(&g.join("zones").join(format!("{stem}.png")), &r.zones)?;
            data::save_front(&g.join("fronts").join(format!("{stem}.png")), &r.front)?;
            write_uncertainty(&g.join("uncertainty"), &stem, &r.uncertainty.0)?;
            let no_front = r.front.is_empty();
            summary.scenes += 1;
            summary.no_front += no_front as usize;
            manifest.push_str(
                &Record::new()
                    .with("glacier", &series.glacier)
                    .with("scene", &stem)
                    .with("front_px", r.front.count())
                    .with("no_front", no_front)
                    .with("uncertainty_max", format!("{:.6}", r.uncertainty.max()))
                    .to_line(),
            );
            manifest.push('\n');
        }
    }
    write_text(&out.join("manifest.txt"), &manifest)?;
    Ok(summary)
}

fn write_uncertainty(dir: &Path, stem: &str, u: &crate::raster::ConfidenceMap) -> Result<()> {
    let (h, w) = u.dims();
    for (k, name) in CLASS_NAMES.iter().enumerate() {
        let r = Raster::from_fn(h, w, |i, j| (u.get(k, i, j) * UNCERTAINTY_SCALE).round().clamp(0.0, 255.0) as u8);
        png_io::write_u8(&dir.join(format!("{stem}_{name}.png")), &r)?;
    }
    write_text(
        &dir.join(format!("{stem}.meta")),
        &format!("scale: {UNCERTAINTY_SCALE}\nclasses: {}\n", CLASS_NAMES.join(",")),
    )
}

/// Front sets of predictions under `pred` against the front labels under `gt`.
pub fn front_sets(pred: &Path, gt: &Path) -> Result<Vec<FrontSet>> {
    let mut sets = Vec::new();
    for series in load_dataset(gt)? {
        for s in &series.scenes {
            let Some(gt_front) = &s.front else { continue };
            let p = pred.join(&series.glacier).join("fronts").join(format!("{}.png", s.meta.stem()));
            if !p.exists() {
                return Err(Error::data(&p, "missing prediction"));
            }
            let pf = load_front(&p, s.meta.resolution)?;
            sets.push(FrontSet::from_masks(gt_front, &pf, &s.meta.sensor, &series.glacier)?);
        }
    }
    if sets.is_empty() {
        return Err(Error::data(gt, "no scenes with front labels"));
    }
    Ok(sets)
}

pub fn evaluate(pred: &Path, gt: &Path) -> Result<MdeReport> {
    sensor_report(&front_sets(pred, gt)?)
}

/// Tests whether `baseline` has larger image-wise MDEs than `candidate`.
pub fn compare_reports(
    baseline_name: &str,
    baseline: &MdeReport,
    candidate_name: &str,
    candidate: &MdeReport,
    alpha: f64,
    tests: usize,
) -> Result<Comparison> {
    let vals = |r: &MdeReport| r.per_image.iter().filter_map(|m| m.mde).collect::<Vec<f64>>();
    compare_runs(baseline_name, &vals(baseline), candidate_name, &vals(candidate), alpha, tests)
}

/// Single plain member against the configured ensemble with TTA and overlap.
pub fn bench(cfg: &RunConfig, scenes: &Path) -> Result<(ThroughputReport, ThroughputReport)> {
    let members = load_members(cfg)?;
    let loaded: Vec<Scene> = load_dataset(scenes)?.into_iter().flat_map(|s| s.scenes).collect();
    let arrays: Vec<_> = loaded.iter().map(Scene::sar_array).collect();
    let bbs = loaded
        .iter()
        .map(|s| s.meta.bbox.ok_or_else(|| Error::Validation(format!("{}: no bbox in the scene metadata", s.meta.stem()))))
        .collect::<Result<Vec<_>>>()?;
    let bench: Vec<BenchScene> = loaded
        .iter()
        .zip(&arrays)
        .zip(&bbs)
        .map(|((s, sar), bbox)| BenchScene { sar, bbox, resolution: s.meta.resolution })
        .collect();
    if bench.is_empty() {
        return Err(Error::data(scenes, "no scenes"));
    }
    let single = throughput_report(&members[..1], &bench, InferConfig { tta: false, overlap: false })?;
    let full = throughput_report(&members, &bench, InferConfig { tta: true, overlap: true })?;
    Ok((single, full))
}
