//! Scene sidecar metadata: UTF-8 `key: value` lines next to each raster.
//!
//! ```text
//! glacier: Mapple
//! date: 2008-10-13
//! sensor: TSX
//! resolution: 7
//! orbit: ascending
//! bbox: 10,200,5,300        (min_row,max_row,min_col,max_col, inclusive)
//! ```
//!
//! Unknown keys are kept, in file order, and written back after the known ones.

use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::raster::BBox;

/// Sensor tags accepted by default.
pub const SENSORS: [&str; 6] = ["S1", "ENVISAT", "ERS", "PALSAR", "TSX", "TDX"];

#[derive(Debug, Clone, PartialEq)]
pub struct SceneMeta {
    pub glacier: String,
    /// ISO-8601 calendar date, `YYYY-MM-DD`.
    pub date: String,
    pub sensor: String,
    /// Meters per pixel.
    pub resolution: f64,
    pub orbit: Option<String>,
    pub bbox: Option<BBox>,
    pub extra: Vec<(String, String)>,
}

/// Checks a `YYYY-MM-DD` date.
pub fn parse_date(s: &str) -> Result<NaiveDate> {
    // chrono accepts unpadded fields; the layout requires the fixed width.
    if s.len() != 10 {
        return Err(Error::Validation(format!("date {s:?} is not YYYY-MM-DD")));
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| Error::Validation(format!("date {s:?} is not YYYY-MM-DD")))
}

impl SceneMeta {
    pub fn new(glacier: &str, date: &str, sensor: &str, resolution: f64) -> Self {
        SceneMeta {
            glacier: glacier.to_string(),
            date: date.to_string(),
            sensor: sensor.to_string(),
            resolution,
            orbit: None,
            bbox: None,
            extra: Vec::new(),
        }
    }

    /// Checks field values against `sensors`.
    pub fn validate_with(&self, sensors: &[&str]) -> Result<()> {
        if self.glacier.is_empty() || self.glacier.contains(['/', '\\', '\n']) {
            return Err(Error::Validation(format!("invalid glacier id {:?}", self.glacier)));
        }
        parse_date(&self.date)?;
        if !sensors.contains(&self.sensor.as_str()) {
            return Err(Error::Validation(format!(
                "unknown sensor {:?}; registered: {}",
                self.sensor,
                sensors.join(", ")
            )));
        }
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::Validation(format!("resolution must be positive, got {}", self.resolution)));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with(&SENSORS)
    }

    /// File stem used in the dataset layout.
    pub fn stem(&self) -> String {
        format!("{}_{}", self.date, self.sensor)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "glacier: {}\ndate: {}\nsensor: {}\nresolution: {}\n",
            self.glacier, self.date, self.sensor, self.resolution
        );
        if let Some(o) = &self.orbit {
            out += &format!("orbit: {o}\n");
        }
        if let Some(b) = &self.bbox {
            out += &format!("bbox: {},{},{},{}\n", b.min_row, b.max_row, b.min_col, b.max_col);
        }
        for (k, v) in &self.extra {
            out += &format!("{k}: {v}\n");
        }
        out
    }

    /// Parses sidecar text without validating values against the sensor list.
    pub fn parse(text: &str) -> Result<Self> {
        let mut glacier = None;
        let mut date = None;
        let mut sensor = None;
        let mut resolution = None;
        let mut orbit = None;
        let mut bbox = None;
        let mut extra = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| Error::Validation(format!("line {}: expected `key: value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim().to_string());
            match k {
                "glacier" => glacier = Some(v),
                "date" => date = Some(v),
                "sensor" => sensor = Some(v),
                "resolution" => {
                    resolution = Some(v.parse::<f64>().map_err(|_| {
                        Error::Validation(format!("line {}: resolution {v:?} is not a number", n + 1))
                    })?)
                }
                "orbit" => orbit = Some(v),
                "bbox" => {
                    let parts: Vec<usize> = v
                        .split(',')
                        .map(|p| p.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::Validation(format!("line {}: bbox {v:?} is not four integers", n + 1)))?;
                    if parts.len() != 4 {
                        return Err(Error::Validation(format!("line {}: bbox needs four values", n + 1)));
                    }
                    bbox = Some(BBox::new(parts[0], parts[1], parts[2], parts[3])?);
                }
                _ => extra.push((k.to_string(), v)),
            }
        }
        let need = |v: Option<String>, k: &str| v.ok_or_else(|| Error::Validation(format!("missing key {k:?}")));
        Ok(SceneMeta {
            glacier: need(glacier, "glacier")?,
            date: need(date, "date")?,
            sensor: need(sensor, "sensor")?,
            resolution: resolution.ok_or_else(|| Error::Validation("missing key \"resolution\"".into()))?,
            orbit,
            bbox,
            extra,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let meta = Self::parse(&text).map_err(|e| Error::data(path, e.to_string()))?;
        meta.validate().map_err(|e| Error::data(path, e.to_string()))?;
        Ok(meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
