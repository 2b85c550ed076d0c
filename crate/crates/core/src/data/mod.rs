//! Scene and dataset formats, split rules and synthetic data.
//!
//! Dataset layout:
//!
//! ```text
//! <root>/<glacier>/sar/<date>_<sensor>.png      16-bit grayscale SAR
//! <root>/<glacier>/sar/<date>_<sensor>.meta     sidecar (see meta.rs)
//! <root>/<glacier>/zones/<date>_<sensor>.png    8-bit zone codes 0/64/127/254
//! <root>/<glacier>/fronts/<date>_<sensor>.png   8-bit front mask 0/255
//! <root>/<glacier>/optical/channel_00.png ..    one 16-bit file per channel
//! <root>/<glacier>/optical/manifest.txt         `channel_NN.png <name>` lines
//! ```
//!
//! Label directories are optional (pretraining data has none).

pub mod caffe;
pub mod meta;
pub mod png_io;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};

use crate::error::{Error, Result};
use crate::raster::{FrontMask, Raster, Zone, ZoneMask};
use crate::tensor::Array;

pub use meta::{SceneMeta, SENSORS};
pub use synth::{synth_optical, synth_scene, OpticalTarget, SynthParams, SynthScene, OPTICAL_CHANNELS, OPTICAL_NAMES};

/// Default number of scenes per glacier held out for validation.
pub const SSL4SAR_VAL_PER_GLACIER: usize = 68;

/// One SAR acquisition with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub meta: SceneMeta,
    pub sar: Raster<u16>,
    pub zones: Option<ZoneMask>,
    pub front: Option<FrontMask>,
}

impl Scene {
    /// SAR intensities scaled to `[0, 1]`, shape `[H, W]`.
    pub fn sar_array(&self) -> Array {
        sar_to_array(&self.sar)
    }
}

pub fn sar_to_array(sar: &Raster<u16>) -> Array {
    let (h, w) = sar.dims();
    Array::new(&[h, w], sar.data().iter().map(|&v| v as f64 / 65535.0).collect()).expect("raster size")
}

/// Time series of one glacier and its single optical target.
#[derive(Debug, Clone, PartialEq)]
pub struct GlacierSeries {
    pub glacier: String,
    pub scenes: Vec<Scene>,
    pub optical: Option<OpticalTarget>,
}

impl GlacierSeries {
    /// Checks glacier ids and, when an optical target exists, that it has
    /// all channels at the geometry of every scene.
    pub fn validate(&self) -> Result<()> {
        for s in &self.scenes {
            if s.meta.glacier != self.glacier {
                return Err(Error::Validation(format!(
                    "scene {} belongs to {}, not {}",
                    s.meta.stem(),
                    s.meta.glacier,
                    self.glacier
                )));
            }
        }
        if let Some(o) = &self.optical {
            if o.channels.len() != OPTICAL_CHANNELS {
                return Err(Error::Validation(format!("{}: optical target must have {OPTICAL_CHANNELS} channels", self.glacier)));
            }
            if let Some(s) = self.scenes.iter().find(|s| s.sar.dims() != o.dims()) {
                return Err(Error::Validation(format!(
                    "{}: scene {} is {:?}, optical target is {:?}",
                    self.glacier,
                    s.meta.stem(),
                    s.sar.dims(),
                    o.dims()
                )));
            }
        }
        Ok(())
    }
}

/// Splits a series by acquisition date: the first `min(val_count, n)` scenes
/// become validation data, the rest training data. Input order is irrelevant.
pub fn ssl4sar_split(series: &GlacierSeries, val_count: usize) -> (Vec<Scene>, Vec<Scene>) {
    let mut scenes = series.scenes.clone();
    scenes.sort_by(|a, b| (&a.meta.date, &a.meta.sensor).cmp(&(&b.meta.date, &b.meta.sensor)));
    let k = val_count.min(scenes.len());
    let train = scenes.split_off(k);
    if train.is_empty() {
        log::warn!("{}: only {} scenes, all used for validation", series.glacier, k);
    }
    (train, scenes)
}

fn dir(root: &Path, glacier: &str, kind: &str) -> PathBuf {
    root.join(glacier).join(kind)
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Reads a SAR raster and its `.meta` sidecar.
pub fn load_scene(path: &Path) -> Result<(Raster<u16>, SceneMeta)> {
    let meta_path = path.with_extension("meta");
    if !meta_path.exists() {
        return Err(Error::data(&meta_path, "missing sidecar"));
    }
    let meta = SceneMeta::load(&meta_path)?;
    let sar = png_io::read_gray(path)?.into_u16();
    if let Some(b) = &meta.bbox {
        if !b.fits(sar.rows(), sar.cols()) {
            return Err(Error::data(&meta_path, format!("bbox {b:?} exceeds raster {:?}", sar.dims())));
        }
    }
    Ok((sar, meta))
}

/// Writes a SAR raster as 16-bit PNG plus sidecar.
pub fn save_scene(path: &Path, sar: &Raster<u16>, meta: &SceneMeta) -> Result<()> {
    meta.validate()?;
    png_io::write_u16(path, sar)?;
    meta.save(&path.with_extension("meta"))
}

pub fn zones_to_gray(z: &ZoneMask) -> Raster<u8> {
    z.grid.map(|v| Zone::from_id(v).expect("validated zone id").gray())
}

pub fn zones_from_gray(path: &Path, r: &Raster<u8>, resolution: f64) -> Result<ZoneMask> {
    let mut ids = Vec::with_capacity(r.data().len());
    for &v in r.data() {
        match Zone::from_gray(v) {
            Some(z) => ids.push(z.id()),
            None => return Err(Error::data(path, format!("gray value {v} is not a zone code (0/64/127/254)"))),
        }
    }
    ZoneMask::new(Raster::from_vec(r.rows(), r.cols(), ids)?, resolution)
}

pub fn save_zones(path: &Path, z: &ZoneMask) -> Result<()> {
    png_io::write_u8(path, &zones_to_gray(z))
}

pub fn load_zones(path: &Path, resolution: f64) -> Result<ZoneMask> {
    match png_io::read_gray(path)? {
        png_io::Gray::Eight(r) => zones_from_gray(path, &r, resolution),
        png_io::Gray::Sixteen(_) => Err(Error::data(path, "zone labels must be 8-bit")),
    }
}

pub fn save_front(path: &Path, f: &FrontMask) -> Result<()> {
    png_io::write_u8(path, &f.grid.map(|v| if v { 255 } else { 0 }))
}

pub fn load_front(path: &Path, resolution: f64) -> Result<FrontMask> {
    let r = match png_io::read_gray(path)? {
        png_io::Gray::Eight(r) => r,
        png_io::Gray::Sixteen(_) => return Err(Error::data(path, "front masks must be 8-bit")),
    };
    if let Some(v) = r.data().iter().find(|&&v| v != 0 && v != 255) {
        return Err(Error::data(path, format!("front mask value {v} is neither 0 nor 255")));
    }
    Ok(FrontMask { grid: r.map(|v| v == 255), resolution })
}

pub fn save_optical(dir: &Path, o: &OpticalTarget) -> Result<()> {
    create_dir(dir)?;
    let mut manifest = String::new();
    for (i, ch) in o.channels.iter().enumerate() {
        let name = format!("channel_{i:02}.png");
        png_io::write_u16(&dir.join(&name), ch)?;
        manifest += &format!("{name} {}\n", OPTICAL_NAMES.get(i).unwrap_or(&"extra"));
    }
    let p = dir.join("manifest.txt");
    fs::write(&p, manifest).map_err(|e| Error::io(&p, e))
}

pub fn load_optical(dir: &Path) -> Result<OpticalTarget> {
    let mpath = dir.join("manifest.txt");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut channels = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let file = line.split_whitespace().next().unwrap_or_default();
        channels.push(png_io::read_gray(&dir.join(file))?.into_u16());
    }
    if channels.len() != OPTICAL_CHANNELS {
        return Err(Error::data(&mpath, format!("{} channels listed, expected {OPTICAL_CHANNELS}", channels.len())));
    }
    let d = channels[0].dims();
    if channels.iter().any(|c| c.dims() != d) {
        return Err(Error::data(dir, "optical channels differ in size"));
    }
    Ok(OpticalTarget { channels })
}

fn sorted_entries(p: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(p)
        .map_err(|e| Error::io(p, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(p, err)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Loads every scene of one glacier directory.
pub fn load_glacier(root: &Path, glacier: &str) -> Result<GlacierSeries> {
    let sar_dir = dir(root, glacier, "sar");
    let mut scenes = Vec::new();
    for p in sorted_entries(&sar_dir)? {
        if p.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let (sar, meta) = load_scene(&p)?;
        let stem = p.file_name().expect("file").to_owned();
        let zp = dir(root, glacier, "zones").join(&stem);
        let fp = dir(root, glacier, "fronts").join(&stem);
        let zones = if zp.exists() { Some(load_zones(&zp, meta.resolution)?) } else { None };
        let front = if fp.exists() { Some(load_front(&fp, meta.resolution)?) } else { None };
        for (what, d) in [("zones", zones.as_ref().map(|z| z.dims())), ("front", front.as_ref().map(|f| f.grid.dims()))] {
            if let Some(d) = d {
                if d != sar.dims() {
                    return Err(Error::data(&p, format!("{what} label is {d:?}, SAR is {:?}", sar.dims())));
                }
            }
        }
        scenes.push(Scene { meta, sar, zones, front });
    }
    let odir = dir(root, glacier, "optical");
    let optical = if odir.exists() { Some(load_optical(&odir)?) } else { None };
    let series = GlacierSeries { glacier: glacier.to_string(), scenes, optical };
    series.validate().map_err(|e| Error::data(root.join(glacier), e.to_string()))?;
    Ok(series)
}

/// Glacier directory names under `root`, sorted.
pub fn list_glaciers(root: &Path) -> Result<Vec<String>> {
    Ok(sorted_entries(root)?
        .into_iter()
        .filter(|p| p.join("sar").is_dir())
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_string))
        .collect())
}

pub fn load_dataset(root: &Path) -> Result<Vec<GlacierSeries>> {
    list_glaciers(root)?.iter().map(|g| load_glacier(root, g)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DatasetSummary {
    pub glaciers: usize,
    pub scenes: usize,
    pub optical: usize,
    pub zone_labels: usize,
    pub front_labels: usize,
}

/// Checks the layout and every file in it.
pub fn validate_dataset(root: &Path) -> Result<DatasetSummary> {
    let glaciers = list_glaciers(root)?;
    if glaciers.is_empty() {
        return Err(Error::data(root, "no <glacier>/sar directories found"));
    }
    let mut s = DatasetSummary::default();
    for g in &glaciers {
        let series = load_glacier(root, g)?;
        if series.scenes.is_empty() {
            return Err(Error::data(dir(root, g, "sar"), "no scenes"));
        }
        s.glaciers += 1;
        s.scenes += series.scenes.len();
        s.optical += series.optical.is_some() as usize;
        s.zone_labels += series.scenes.iter().filter(|x| x.zones.is_some()).count();
        s.front_labels += series.scenes.iter().filter(|x| x.front.is_some()).count();
    }
    Ok(s)
}

/// `YYYY-MM-DD` of a day count since 1970-01-01.
pub fn date_from_days(days: i64) -> String {
    (NaiveDate::from_ymd_opt(1970, 1, 1).expect("epoch") + Duration::days(days)).format("%Y-%m-%d").to_string()
}

/// Settings of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDatasetSpec {
    pub glaciers: usize,
    pub scenes_per_glacier: usize,
    pub seed: u64,
    pub template: SynthParams,
    /// Write zone and front labels.
    pub labels: bool,
}

impl Default for SynthDatasetSpec {
    fn default() -> Self {
        SynthDatasetSpec { glaciers: 14, scenes_per_glacier: 10, seed: 0, template: SynthParams::default(), labels: true }
    }
}

/// First acquisition day of generated series (2015-01-01).
const SYNTH_EPOCH_DAYS: i64 = 16_436;

/// Generated scenes of one glacier, without touching the disk.
pub fn synth_series(spec: &SynthDatasetSpec, glacier: usize) -> Result<GlacierSeries> {
    let name = format!("glacier_{glacier:02}");
    let mut scenes = Vec::with_capacity(spec.scenes_per_glacier);
    for i in 0..spec.scenes_per_glacier {
        let p = synth::scene_params(spec.seed, glacier, i, &spec.template);
        let s = synth_scene(&p)?;
        let sensor = SENSORS[(glacier + i) % SENSORS.len()];
        let mut meta = SceneMeta::new(&name, &date_from_days(SYNTH_EPOCH_DAYS + 12 * i as i64), sensor, p.resolution);
        meta.bbox = Some(s.bbox);
        let (zones, front) = if spec.labels { (Some(s.zones), Some(s.front)) } else { (None, None) };
        scenes.push(Scene { meta, sar: s.sar, zones, front });
    }
    let reference = synth::scene_params(spec.seed, glacier, 0, &spec.template);
    let optical = Some(synth_optical(&reference)?);
    Ok(GlacierSeries { glacier: name, scenes, optical })
}

/// Writes a series in the dataset layout.
pub fn save_series(root: &Path, series: &GlacierSeries) -> Result<()> {
    let g = &series.glacier;
    let sar_dir = dir(root, g, "sar");
    create_dir(&sar_dir)?;
    for s in &series.scenes {
        let file = format!("{}.png", s.meta.stem());
        save_scene(&sar_dir.join(&file), &s.sar, &s.meta)?;
        if let Some(z) = &s.zones {
            let d = dir(root, g, "zones");
            create_dir(&d)?;
            save_zones(&d.join(&file), z)?;
        }
        if let Some(f) = &s.front {
            let d = dir(root, g, "fronts");
            create_dir(&d)?;
            save_front(&d.join(&file), f)?;
        }
    }
    if let Some(o) = &series.optical {
        save_optical(&dir(root, g, "optical"), o)?;
    }
    Ok(())
}

/// Generates a dataset on disk and validates it.
pub fn make_synth_dataset(root: &Path, spec: &SynthDatasetSpec) -> Result<DatasetSummary> {
    create_dir(root)?;
    for g in 0..spec.glaciers {
        save_series(root, &synth_series(spec, g)?)?;
    }
    validate_dataset(root)
}

/// Per-channel normalisation of optical targets: z-score for spectral
/// channels, min-max to `[0, 1]` for the classification channel.
#[derive(Debug, Clone, PartialEq)]
pub struct OpticalStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub scl_min: f64,
    pub scl_max: f64,
}

impl OpticalStats {
    pub fn fit(targets: &[&OpticalTarget]) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Validation("no optical targets to fit normalisation on".into()));
        }
        let mut mean = vec![0.0; OPTICAL_CHANNELS];
        let mut std = vec![1.0; OPTICAL_CHANNELS];
        for ch in 0..OPTICAL_CHANNELS {
            let vals = || targets.iter().flat_map(|t| t.channels[ch].data().iter().map(|&v| v as f64 / 65535.0));
            let n = vals().count() as f64;
            let m = vals().sum::<f64>() / n;
            let var = vals().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean[ch] = m;
            std[ch] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        let scl = || targets.iter().flat_map(|t| t.channels[synth::SCL_CHANNEL].data().iter().map(|&v| v as f64));
        let scl_min = scl().fold(f64::INFINITY, f64::min);
        let scl_max = scl().fold(f64::NEG_INFINITY, f64::max);
        Ok(OpticalStats { mean, std, scl_min, scl_max })
    }

    /// `[14, H, W]` normalised target.
    pub fn normalize(&self, t: &OpticalTarget) -> Array {
        let (h, w) = t.dims();
        let mut data = Vec::with_capacity(OPTICAL_CHANNELS * h * w);
        for (ch, r) in t.channels.iter().enumerate() {
            if ch == synth::SCL_CHANNEL {
                let span = self.scl_max - self.scl_min;
                data.extend(r.data().iter().map(|&v| if span > 0.0 { (v as f64 - self.scl_min) / span } else { 0.0 }));
            } else {
                data.extend(r.data().iter().map(|&v| (v as f64 / 65535.0 - self.mean[ch]) / self.std[ch]));
            }
        }
        Array::new(&[OPTICAL_CHANNELS, h, w], data).expect("optical size")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthDatasetSpec {
        SynthDatasetSpec {
            glaciers: 2,
            scenes_per_glacier: 10,
            seed: 5,
            template: SynthParams { size: 64, resolution: 50.0, ..Default::default() },
            labels: true,
        }
    }

    #[test]
    fn dates() {
        assert_eq!(date_from_days(0), "1970-01-01");
        assert_eq!(date_from_days(SYNTH_EPOCH_DAYS), "2015-01-01");
        assert_eq!(date_from_days(SYNTH_EPOCH_DAYS + 59), "2015-03-01");
        assert_eq!(date_from_days(11_016), "2000-02-29");
    }

    #[test]
    fn split_by_date() {
        let series = synth_series(&small_spec(), 0).unwrap();
        let (train, val) = ssl4sar_split(&series, 3);
        assert_eq!((train.len(), val.len()), (7, 3));
        assert!(val.iter().all(|v| train.iter().all(|t| v.meta.date < t.meta.date)));
        let mut shuffled = series.clone();
        shuffled.scenes.reverse();
        shuffled.scenes.swap(2, 7);
        assert_eq!(ssl4sar_split(&shuffled, 3), (train, val));
        let (train, val) = ssl4sar_split(&series, 68);
        assert!(train.is_empty());
        assert_eq!(val.len(), 10);
    }

    #[test]
    fn split_counts_at_scale() {
        let scene = synth_series(&SynthDatasetSpec { scenes_per_glacier: 1, ..small_spec() }, 0).unwrap().scenes[0].clone();
        let make = |n: usize| GlacierSeries {
            glacier: "glacier_00".into(),
            scenes: (0..n)
                .map(|i| {
                    let mut s = scene.clone();
                    s.meta.date = date_from_days(SYNTH_EPOCH_DAYS + i as i64);
                    s
                })
                .collect(),
            optical: None,
        };
        let (t, v) = ssl4sar_split(&make(680), SSL4SAR_VAL_PER_GLACIER);
        assert_eq!((t.len(), v.len()), (612, 68));
        let (t, v) = ssl4sar_split(&make(50), SSL4SAR_VAL_PER_GLACIER);
        assert_eq!((t.len(), v.len()), (0, 50));
    }

    #[test]
    fn dataset_roundtrip_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let summary = make_synth_dataset(dir.path(), &spec).unwrap();
        assert_eq!(
            summary,
            DatasetSummary { glaciers: 2, scenes: 20, optical: 2, zone_labels: 20, front_labels: 20 }
        );
        let pngs = |kind: &str| {
            list_glaciers(dir.path())
                .unwrap()
                .iter()
                .map(|g| fs::read_dir(dir.path().join(g).join(kind)).unwrap().count())
                .sum::<usize>()
        };
        assert_eq!(pngs("sar"), 40);
        assert_eq!(pngs("optical"), 2 * 15);
        let loaded = load_glacier(dir.path(), "glacier_01").unwrap();
        assert_eq!(loaded, synth_series(&spec, 1).unwrap());
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SynthDatasetSpec { glaciers: 1, scenes_per_glacier: 2, ..small_spec() };
        make_synth_dataset(a.path(), &spec).unwrap();
        make_synth_dataset(b.path(), &spec).unwrap();
        make_synth_dataset(b.path(), &spec).unwrap();
        let files = |root: &Path| {
            let mut out = Vec::new();
            for kind in ["sar", "zones", "fronts", "optical"] {
                for p in sorted_entries(&root.join("glacier_00").join(kind)).unwrap() {
                    out.push((p.file_name().unwrap().to_owned(), fs::read(&p).unwrap()));
                }
            }
            out
        };
        assert_eq!(files(a.path()), files(b.path()));
    }

    #[test]
    fn scene_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        png_io::write_u16(&p, &Raster::filled(4, 4, 7u16)).unwrap();
        let err = load_scene(&p).unwrap_err();
        assert!(err.to_string().contains("x.meta"));
        let mut meta = SceneMeta::new("g", "2020-01-01", "S1", 10.0);
        meta.extra.push(("note".into(), "kept".into()));
        save_scene(&p, &Raster::filled(4, 4, 7u16), &meta).unwrap();
        let (sar, back) = load_scene(&p).unwrap();
        assert_eq!((sar, back), (Raster::filled(4, 4, 7u16), meta.clone()));
        std::fs::write(p.with_extension("meta"), meta.to_text().replace("resolution: 10", "resolution: 0")).unwrap();
        assert!(matches!(load_scene(&p), Err(Error::Data { .. })));
    }

    #[test]
    fn invalid_zone_codes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.png");
        png_io::write_u8(&p, &Raster::filled(2, 2, 100u8)).unwrap();
        assert!(load_zones(&p, 10.0).is_err());
    }

    #[test]
    fn optical_normalisation() {
        let series = synth_series(&small_spec(), 0).unwrap();
        let o = series.optical.as_ref().unwrap();
        let stats = OpticalStats::fit(&[o]).unwrap();
        let a = stats.normalize(o);
        let plane = 64 * 64;
        for ch in 0..OPTICAL_CHANNELS {
            let v = &a.data()[ch * plane..(ch + 1) * plane];
            if ch == synth::SCL_CHANNEL {
                assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
            } else {
                let m = v.iter().sum::<f64>() / plane as f64;
                assert!(m.abs() < 1e-9, "channel {ch} mean {m}");
            }
        }
    }
}
