//! Adapter for the CaFFe directory layout.
//!
//! ```text
//! <src>/sar_images/<split>/[<glacier>/]<glacier>_<date>_<sensor>_<res>_<quality>_<n>.png
//! <src>/zones/<split>/[<glacier>/]<same stem>_zones.png
//! <src>/fronts/<split>/[<glacier>/]<same stem>_front.png
//! ```
//!
//! Images are 8-bit. Zone labels are assumed to use the gray codes
//! 0/64/127/254 and fronts 0/255; both are checked on load.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::raster::BBox;

use super::{load_front, load_zones, png_io, save_series, validate_dataset, DatasetSummary, GlacierSeries, Scene, SceneMeta};

/// Fields encoded in a CaFFe file name.
#[derive(Debug, Clone, PartialEq)]
pub struct CaffeName {
    pub glacier: String,
    pub date: String,
    pub sensor: String,
    pub resolution: f64,
    /// Remaining underscore-separated fields, kept as metadata.
    pub rest: Vec<String>,
}

pub fn parse_name(stem: &str) -> Option<CaffeName> {
    let parts: Vec<&str> = stem.split('_').collect();
    if parts.len() < 4 {
        return None;
    }
    let resolution = parts[3].parse::<f64>().ok().filter(|r| *r > 0.0)?;
    Some(CaffeName {
        glacier: parts[0].to_string(),
        date: parts[1].to_string(),
        sensor: parts[2].to_string(),
        resolution,
        rest: parts[4..].iter().map(|s| s.to_string()).collect(),
    })
}

fn find_pngs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            find_pngs(&p, out)?;
        } else if p.extension().and_then(|x| x.to_str()) == Some("png") {
            out.push(p);
        }
    }
    Ok(())
}

/// Path of the label file matching `sar` under `kind` (`zones` or `fronts`).
fn label_path(src: &Path, split: &str, sar: &Path, kind: &str, suffix: &str) -> PathBuf {
    let base = src.join("sar_images").join(split);
    let rel = sar.strip_prefix(&base).unwrap_or(sar);
    let stem = sar.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let mut p = src.join(kind).join(split).join(rel);
    p.set_file_name(format!("{stem}_{suffix}.png"));
    p
}

/// Converts one CaFFe split into the dataset layout under `dst`.
/// With `full_bbox`, every scene gets the whole raster as bounding box.
pub fn ingest(src: &Path, split: &str, dst: &Path, full_bbox: bool) -> Result<DatasetSummary> {
    let sar_root = src.join("sar_images").join(split);
    let mut files = Vec::new();
    find_pngs(&sar_root, &mut files)?;
    files.sort();
    if files.is_empty() {
        return Err(Error::data(&sar_root, "no PNG files"));
    }
    let mut series: Vec<GlacierSeries> = Vec::new();
    for f in files {
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let name = parse_name(stem)
            .ok_or_else(|| Error::data(&f, "name is not <glacier>_<date>_<sensor>_<res>_..."))?;
        let sar = png_io::read_gray(&f)?.into_u16();
        let mut meta = SceneMeta::new(&name.glacier, &name.date, &name.sensor, name.resolution);
        if !name.rest.is_empty() {
            meta.extra.push(("caffe_fields".into(), name.rest.join("_")));
        }
        if full_bbox {
            meta.bbox = Some(BBox::full(sar.rows(), sar.cols()));
        }
        meta.validate().map_err(|e| Error::data(&f, e.to_string()))?;
        let zp = label_path(src, split, &f, "zones", "zones");
        let fp = label_path(src, split, &f, "fronts", "front");
        let zones = if zp.exists() { Some(load_zones(&zp, name.resolution)?) } else { None };
        let front = if fp.exists() { Some(load_front(&fp, name.resolution)?) } else { None };
        let scene = Scene { meta, sar, zones, front };
        match series.iter_mut().find(|s| s.glacier == name.glacier) {
            Some(s) => s.scenes.push(scene),
            None => series.push(GlacierSeries { glacier: name.glacier.clone(), scenes: vec![scene], optical: None }),
        }
    }
    for s in &series {
        // CaFFe scenes of one glacier vary in size; only per-scene checks apply.
        let mut seen = std::collections::BTreeSet::new();
        for sc in &s.scenes {
            if !seen.insert(sc.meta.stem()) {
                return Err(Error::data(src, format!("{}: duplicate scene {}", s.glacier, sc.meta.stem())));
            }
        }
        save_series(dst, s)?;
    }
    validate_dataset(dst)
}
