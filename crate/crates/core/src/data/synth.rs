//! Synthetic glacier scenes.
//!
//! A fjord between two rock walls opens into a band of sea at the bottom of
//! the canvas. Glacier fills the fjord above a sinusoidal front line, ocean
//! lies below it. A triangle in the top-left corner carries no information.
//!
//! ```text
//!  n n n r r g g g g g g r r r
//!  n n r r r g g g g g g g r r
//!  r r r r g g g g g g g g r r
//!  r r r r o o g g g g o o r r      <- front: ocean next to glacier
//!  r r r r o o o o o o o o o r
//!  o o o o o o o o o o o o o o      <- open sea band
//! ```
//!
//! SAR intensity is a per-class level times unit-mean gamma speckle. Ice
//! melange shows up as brighter blobs in the ocean but keeps the ocean label.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::postprocess::{extract_front, filter_short_fronts, mask_bbox, MIN_FRONT_LENGTH_M};
use crate::raster::{BBox, FrontMask, Raster, Zone, ZoneMask};

/// Number of optical channels: twelve spectral bands, water vapour, scene
/// classification.
pub const OPTICAL_CHANNELS: usize = 14;

pub const OPTICAL_NAMES: [&str; OPTICAL_CHANNELS] =
    ["B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B9", "B11", "B12", "WVP", "SCL"];

/// Index of the categorical scene-classification channel.
pub const SCL_CHANNEL: usize = 13;

/// Scene-classification code per zone (no data, not vegetated, snow/ice, water).
pub fn scl_code(z: Zone) -> u16 {
    match z {
        Zone::NoInfo => 0,
        Zone::Rock => 5,
        Zone::Glacier => 11,
        Zone::Ocean => 6,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub seed: u64,
    /// Canvas rows and columns.
    pub size: usize,
    /// Meters per pixel.
    pub resolution: f64,
    /// Mean front row as a fraction of the canvas.
    pub front_pos: f64,
    /// Front undulation amplitude in pixels.
    pub amplitude: f64,
    /// Front undulation cycles across the canvas.
    pub frequency: f64,
    pub phase: f64,
    /// Standard deviation of the unit-mean multiplicative speckle.
    pub speckle: f64,
    /// Chance of each of three melange blobs appearing.
    pub melange_prob: f64,
    /// Rock wall width as a fraction of the canvas.
    pub wall_frac: f64,
    /// Height of the open-sea band as a fraction of the canvas.
    pub sea_frac: f64,
    /// Leg length of the no-information corner as a fraction of the canvas.
    pub noinfo_frac: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            seed: 0,
            size: 128,
            resolution: 30.0,
            front_pos: 0.45,
            amplitude: 4.0,
            frequency: 1.5,
            phase: 0.0,
            speckle: 0.3,
            melange_prob: 0.5,
            wall_frac: 0.18,
            sea_frac: 0.2,
            noinfo_frac: 0.15,
        }
    }
}

/// Generated scene with all labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    /// Intensities in `[0, 1]` quantised to 16 bits.
    pub sar: Raster<u16>,
    pub zones: ZoneMask,
    pub front: FrontMask,
    pub bbox: BBox,
}

/// 14-channel optical raster stored as 16-bit values. Spectral channels are
/// reflectances scaled to `0..=65535`; the classification channel holds codes.
#[derive(Debug, Clone, PartialEq)]
pub struct OpticalTarget {
    pub channels: Vec<Raster<u16>>,
}

impl OpticalTarget {
    pub fn dims(&self) -> (usize, usize) {
        self.channels.first().map_or((0, 0), |c| c.dims())
    }
}

struct Geometry {
    size: usize,
    sea_row: usize,
    left: Vec<usize>,
    right: Vec<usize>,
    front: Vec<f64>,
    noinfo: f64,
}

impl Geometry {
    fn new(p: &SynthParams) -> Result<Self> {
        let n = p.size;
        if n < 16 {
            return Err(Error::Validation(format!("canvas {n} is too small, need at least 16")));
        }
        if !(p.resolution > 0.0) {
            return Err(Error::Validation(format!("resolution must be positive, got {}", p.resolution)));
        }
        if !(0.0..=0.35).contains(&p.wall_frac) || !(0.05..=0.5).contains(&p.sea_frac) {
            return Err(Error::Validation("wall_frac must be in [0, 0.35] and sea_frac in [0.05, 0.5]".into()));
        }
        let nf = n as f64;
        let sea_row = ((1.0 - p.sea_frac) * nf).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x5eed_3a11);
        let (pl, pr): (f64, f64) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
        let wob = 0.03 * nf;
        let base = p.wall_frac * nf;
        let left = (0..n).map(|r| (base + wob * (2.0 * PI * r as f64 / nf + pl).sin()).round().max(0.0) as usize).collect();
        let right = (0..n)
            .map(|r| n - 1 - (base + wob * (2.0 * PI * r as f64 / nf + pr).sin()).round().max(0.0) as usize)
            .collect();
        let front: Vec<f64> = (0..n)
            .map(|c| p.front_pos * nf + p.amplitude * (2.0 * PI * p.frequency * c as f64 / nf + p.phase).sin())
            .collect();
        let lo = front.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = front.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > sea_row as f64 - 2.0 || lo < p.noinfo_frac * nf + 2.0 {
            return Err(Error::Validation(format!(
                "front rows {lo:.1}..{hi:.1} must stay between the no-info corner and the sea band (row {sea_row})"
            )));
        }
        Ok(Geometry { size: n, sea_row, left, right, front, noinfo: p.noinfo_frac * nf })
    }

    fn zone(&self, r: usize, c: usize) -> Zone {
        if ((r + c) as f64) < self.noinfo {
            Zone::NoInfo
        } else if r >= self.sea_row {
            Zone::Ocean
        } else if c < self.left[r] || c > self.right[r] {
            Zone::Rock
        } else if (r as f64) < self.front[c] {
            Zone::Glacier
        } else {
            Zone::Ocean
        }
    }

    fn bbox(&self) -> BBox {
        let min_col = self.left[..self.sea_row].iter().copied().min().unwrap_or(0);
        let max_col = self.right[..self.sea_row].iter().copied().max().unwrap_or(self.size - 1);
        BBox { min_row: 0, max_row: self.sea_row - 1, min_col, max_col }
    }
}

fn base_intensity(z: Zone) -> f64 {
    match z {
        Zone::NoInfo => 0.0,
        Zone::Rock => 0.42,
        Zone::Glacier => 0.68,
        Zone::Ocean => 0.12,
    }
}

const MELANGE: f64 = 0.45;

fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Zone labels of the scene geometry.
pub fn synth_zones(p: &SynthParams) -> Result<ZoneMask> {
    let geo = Geometry::new(p)?;
    ZoneMask::new(Raster::from_fn(p.size, p.size, |r, c| geo.zone(r, c).id()), p.resolution)
}

/// One synthetic scene. The front is the ocean/glacier boundary of the
/// labels, masked to the bounding box and filtered by length.
pub fn synth_scene(p: &SynthParams) -> Result<SynthScene> {
    let geo = Geometry::new(p)?;
    let n = p.size;
    let zones = ZoneMask::new(Raster::from_fn(n, n, |r, c| geo.zone(r, c).id()), p.resolution)?;
    let bbox = geo.bbox();
    let front = filter_short_fronts(&mask_bbox(&extract_front(&zones), &bbox), MIN_FRONT_LENGTH_M);
    if front.is_empty() {
        return Err(Error::Validation(format!(
            "front shorter than {MIN_FRONT_LENGTH_M} m at {} m/px on a {n} px canvas",
            p.resolution
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut level = Raster::from_fn(n, n, |r, c| base_intensity(geo.zone(r, c)));
    for _ in 0..3 {
        let c0 = rng.random_range(geo.left[0]..=geo.right[0]);
        let r0 = geo.front[c0] + rng.random_range(2.0..(0.1 * n as f64).max(3.0));
        let (ry, rx) = (rng.random_range(1.5..4.0), rng.random_range(2.0..6.0));
        if rng.random::<f64>() >= p.melange_prob {
            continue;
        }
        for r in 0..n {
            for c in 0..n {
                let dy = (r as f64 - r0) / ry;
                let dx = (c as f64 - c0 as f64) / rx;
                if dy * dy + dx * dx <= 1.0 && zones.zone(r, c) == Zone::Ocean {
                    level.set(r, c, MELANGE);
                }
            }
        }
    }

    let sar = if p.speckle > 0.0 {
        let shape = 1.0 / (p.speckle * p.speckle);
        let gamma = Gamma::new(shape, 1.0 / shape).map_err(|e| Error::Validation(e.to_string()))?;
        let mut noise = ChaCha8Rng::seed_from_u64(p.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        level.data().iter().map(|&v| quantize(v * gamma.sample(&mut noise))).collect::<Vec<_>>()
    } else {
        level.data().iter().map(|&v| quantize(v)).collect()
    };
    Ok(SynthScene { sar: Raster::from_vec(n, n, sar)?, zones, front, bbox })
}

/// Optical target for the scene geometry: smooth per-class signatures.
pub fn synth_optical(p: &SynthParams) -> Result<OpticalTarget> {
    let geo = Geometry::new(p)?;
    let n = p.size;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x0b71_ca15);
    let mut channels = Vec::with_capacity(OPTICAL_CHANNELS);
    for ch in 0..OPTICAL_CHANNELS {
        if ch == SCL_CHANNEL {
            channels.push(Raster::from_fn(n, n, |r, c| scl_code(geo.zone(r, c))));
            continue;
        }
        let t = ch as f64 / (OPTICAL_CHANNELS - 1) as f64;
        // snow/ice bright in the visible and dark in the SWIR, water dark throughout
        let sig = [
            0.0,
            0.20 + 0.15 * t + rng.random_range(-0.02..0.02),
            0.85 - 0.55 * t + rng.random_range(-0.02..0.02),
            0.10 - 0.07 * t + rng.random_range(-0.01..0.01),
        ];
        let (fr, fc) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
        channels.push(Raster::from_fn(n, n, |r, c| {
            let z = geo.zone(r, c);
            if z == Zone::NoInfo {
                return 0;
            }
            let wave = 0.03 * (2.0 * PI * (fr * r as f64 + fc * c as f64) / n as f64).sin();
            quantize(sig[z as usize] + wave)
        }));
    }
    Ok(OpticalTarget { channels })
}

/// Parameters of scene `index` of glacier `glacier` in a dataset with `seed`.
/// Geometry is shared by all scenes of a glacier; the front moves over time.
pub fn scene_params(seed: u64, glacier: usize, index: usize, template: &SynthParams) -> SynthParams {
    let gseed = seed.wrapping_mul(1_000_003).wrapping_add(glacier as u64);
    let mut g = ChaCha8Rng::seed_from_u64(gseed);
    let wall_frac = template.wall_frac + g.random_range(-0.03..0.03);
    let noinfo_frac = template.noinfo_frac * g.random_range(0.6..1.2);
    let frequency = template.frequency * g.random_range(0.7..1.3);
    let drift = g.random_range(0.0..2.0 * PI);
    let mut s = ChaCha8Rng::seed_from_u64(gseed.wrapping_mul(31).wrapping_add(index as u64 + 1));
    let front_pos = template.front_pos + 0.06 * (drift + index as f64 * 0.7).sin() + s.random_range(-0.01..0.01);
    SynthParams {
        seed: gseed.wrapping_mul(7919).wrapping_add(index as u64),
        wall_frac: wall_frac.clamp(0.0, 0.35),
        noinfo_frac,
        frequency,
        front_pos,
        phase: s.random_range(0.0..2.0 * PI),
        amplitude: template.amplitude * s.random_range(0.6..1.4),
        ..template.clone()
    }
}
