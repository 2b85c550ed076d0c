//! Geometric and photometric transforms for `[C, H, W]` arrays and label
//! rasters. Geometric transforms are described by a value so the same draw
//! can be applied to an input and its targets.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::tensor::Array;

/// Source window of a resized crop, in input pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crop {
    pub r0: usize,
    pub c0: usize,
    pub h: usize,
    pub w: usize,
}

/// Crop to `out × out`, then flips, then `rot` quarter turns counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometric {
    pub crop: Crop,
    pub out: usize,
    pub hflip: bool,
    pub vflip: bool,
    pub rot: u8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Photometric {
    pub brightness: f64,
    pub gamma: f64,
    /// Photon count at intensity 1; `None` disables Poisson noise.
    pub poisson_peak: Option<f64>,
}

impl Photometric {
    pub const IDENTITY: Photometric = Photometric { brightness: 1.0, gamma: 1.0, poisson_peak: None };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Probability of a random resized crop instead of the central crop.
    pub crop_prob: f64,
    /// Smallest crop area as a fraction of the image.
    pub crop_min_area: f64,
    pub flips: bool,
    pub rotations: bool,
    pub brightness: f64,
    pub gamma: f64,
    pub noise_prob: f64,
    pub noise_peak: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            crop_prob: 0.5,
            crop_min_area: 0.5,
            flips: true,
            rotations: true,
            brightness: 0.1,
            gamma: 0.2,
            noise_prob: 0.3,
            noise_peak: 200.0,
        }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        AugmentConfig { enabled: false, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let p = |v: f64| (0.0..=1.0).contains(&v);
        if !(p(self.crop_prob) && p(self.noise_prob) && self.crop_min_area > 0.0 && self.crop_min_area <= 1.0)
            || !(0.0..1.0).contains(&self.brightness)
            || !(0.0..1.0).contains(&self.gamma)
            || self.noise_peak <= 0.0
        {
            return Err(Error::Config(format!("invalid augmentation settings {self:?}")));
        }
        Ok(())
    }
}

/// Central `out × out` window, no flips or rotation.
pub fn center(h: usize, w: usize, out: usize) -> Result<Geometric> {
    if h < out || w < out {
        return Err(Error::contract("augment", format!("image {h}x{w} smaller than model input {out}")));
    }
    Ok(Geometric { crop: Crop { r0: (h - out) / 2, c0: (w - out) / 2, h: out, w: out }, out, hflip: false, vflip: false, rot: 0 })
}

pub fn sample_geometric(rng: &mut impl Rng, h: usize, w: usize, out: usize, cfg: &AugmentConfig) -> Result<Geometric> {
    let mut g = center(h, w, out)?;
    if !cfg.enabled {
        return Ok(g);
    }
    if rng.random_bool(cfg.crop_prob) {
        let area = (h * w) as f64 * rng.random_range(cfg.crop_min_area..=1.0);
        let ratio = rng.random_range((0.75f64).ln()..=(4.0f64 / 3.0).ln()).exp();
        let ch = ((area / ratio).sqrt().round() as usize).clamp(1, h);
        let cw = ((area * ratio).sqrt().round() as usize).clamp(1, w);
        g.crop = Crop { r0: rng.random_range(0..=h - ch), c0: rng.random_range(0..=w - cw), h: ch, w: cw };
    } else {
        g.crop.r0 = rng.random_range(0..=h - out);
        g.crop.c0 = rng.random_range(0..=w - out);
    }
    if cfg.flips {
        g.hflip = rng.random_bool(0.5);
        g.vflip = rng.random_bool(0.5);
    }
    if cfg.rotations {
        g.rot = rng.random_range(0..4);
    }
    Ok(g)
}

pub fn sample_photometric(rng: &mut impl Rng, cfg: &AugmentConfig) -> Photometric {
    if !cfg.enabled {
        return Photometric::IDENTITY;
    }
    let b = cfg.brightness;
    let gm = cfg.gamma;
    Photometric {
        brightness: if b > 0.0 { rng.random_range(1.0 - b..=1.0 + b) } else { 1.0 },
        gamma: if gm > 0.0 { rng.random_range(1.0 - gm..=1.0 + gm) } else { 1.0 },
        poisson_peak: rng.random_bool(cfg.noise_prob).then_some(cfg.noise_peak),
    }
}

fn dims3(a: &Array) -> (usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 3, "expected [C, H, W]");
    (s[0], s[1], s[2])
}

fn src_linear(d: usize, len: usize, out: usize) -> (usize, usize, f64) {
    let x = ((d as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
    let i = x.floor() as usize;
    let j = (i + 1).min(len - 1);
    (i, j, x - i as f64)
}

fn src_nearest(d: usize, len: usize, out: usize) -> usize {
    (((d as f64 + 0.5) * len as f64 / out as f64) as usize).min(len - 1)
}

/// Bilinear resize of `crop` to `out × out`. A crop of the output size is an
/// exact copy.
pub fn resize_crop(a: &Array, crop: Crop, out: usize) -> Array {
    let (c, _, w) = dims3(a);
    let d = a.data();
    let rows: Vec<_> = (0..out).map(|r| src_linear(r, crop.h, out)).collect();
    let cols: Vec<_> = (0..out).map(|q| src_linear(q, crop.w, out)).collect();
    let mut res = Vec::with_capacity(c * out * out);
    for ch in 0..c {
        let at = |r: usize, q: usize| d[(ch * a.shape()[1] + crop.r0 + r) * w + crop.c0 + q];
        for &(r0, r1, fr) in &rows {
            for &(c0, c1, fc) in &cols {
                let top = if fc == 0.0 { at(r0, c0) } else { at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc };
                let v = if fr == 0.0 {
                    top
                } else {
                    let bot = if fc == 0.0 { at(r1, c0) } else { at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc };
                    top * (1.0 - fr) + bot * fr
                };
                res.push(v);
            }
        }
    }
    Array::new(&[c, out, out], res).expect("size")
}

pub fn resize_crop_nearest<T: Copy + Default>(r: &Raster<T>, crop: Crop, out: usize) -> Raster<T> {
    Raster::from_fn(out, out, |i, j| {
        r.get(crop.r0 + src_nearest(i, crop.h, out), crop.c0 + src_nearest(j, crop.w, out))
    })
}

/// Source index in an `n × n` grid for output `(r, c)` after `k` quarter
/// turns counter-clockwise.
fn rot_src(r: usize, c: usize, n: usize, k: u8) -> (usize, usize) {
    match k % 4 {
        0 => (r, c),
        1 => (c, n - 1 - r),
        2 => (n - 1 - r, n - 1 - c),
        _ => (n - 1 - c, r),
    }
}

fn flip_src(r: usize, c: usize, h: usize, w: usize, hflip: bool, vflip: bool) -> (usize, usize) {
    (if vflip { h - 1 - r } else { r }, if hflip { w - 1 - c } else { c })
}

/// Applies flips then rotation to every channel of a square array.
pub fn orient(a: &Array, hflip: bool, vflip: bool, rot: u8) -> Array {
    let (c, h, w) = dims3(a);
    assert!(rot % 4 == 0 || h == w, "rotation needs a square array");
    let d = a.data();
    let mut out = Vec::with_capacity(d.len());
    for ch in 0..c {
        for r in 0..h {
            for q in 0..w {
                let (rr, rc) = rot_src(r, q, h, rot);
                let (fr, fc) = flip_src(rr, rc, h, w, hflip, vflip);
                out.push(d[(ch * h + fr) * w + fc]);
            }
        }
    }
    Array::new(a.shape(), out).expect("size")
}

pub fn orient_raster<T: Copy + Default>(r: &Raster<T>, hflip: bool, vflip: bool, rot: u8) -> Raster<T> {
    let (h, w) = r.dims();
    Raster::from_fn(h, w, |i, j| {
        let (rr, rc) = rot_src(i, j, h, rot);
        let (fr, fc) = flip_src(rr, rc, h, w, hflip, vflip);
        r.get(fr, fc)
    })
}

impl Geometric {
    pub fn apply(&self, a: &Array) -> Array {
        orient(&resize_crop(a, self.crop, self.out), self.hflip, self.vflip, self.rot)
    }

    pub fn apply_labels<T: Copy + Default>(&self, r: &Raster<T>) -> Raster<T> {
        orient_raster(&resize_crop_nearest(r, self.crop, self.out), self.hflip, self.vflip, self.rot)
    }
}

impl Photometric {
    /// Brightness scale, gamma, then Poisson noise; values clamped to `[0, 1]`.
    pub fn apply(&self, a: &Array, rng: &mut impl Rng) -> Array {
        if *self == Photometric::IDENTITY {
            return a.clone();
        }
        let mut out = a.map(|v| (v * self.brightness).clamp(0.0, 1.0).powf(self.gamma));
        if let Some(peak) = self.poisson_peak {
            for v in out.data_mut() {
                let lambda = *v * peak;
                if lambda > 0.0 {
                    let k: f64 = Poisson::new(lambda).expect("positive rate").sample(rng);
                    *v = (k / peak).min(1.0);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arr(c: usize, n: usize) -> Array {
        Array::from_fn(&[c, n, n], |i| (i as f64 * 0.37).sin())
    }

    #[test]
    fn flips_and_rotations_invert() {
        let a = arr(2, 5);
        assert_eq!(orient(&orient(&a, true, false, 0), true, false, 0), a);
        assert_eq!(orient(&orient(&a, false, true, 0), false, true, 0), a);
        for k in 0..4u8 {
            assert_eq!(orient(&orient(&a, false, false, k), false, false, (4 - k) % 4), a);
        }
        let r1 = orient(&a, false, false, 1);
        assert_eq!(orient(&r1, false, false, 1), orient(&a, false, false, 2));
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        let a = Array::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(orient(&a, false, false, 1).data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn same_size_crop_is_exact() {
        let a = arr(3, 9);
        let g = center(9, 9, 5).unwrap();
        let out = g.apply(&a);
        for ch in 0..3 {
            for r in 0..5 {
                for c in 0..5 {
                    assert_eq!(out.data()[(ch * 5 + r) * 5 + c], a.data()[(ch * 9 + r + 2) * 9 + c + 2]);
                }
            }
        }
        assert_eq!(center(9, 9, 9).unwrap().apply(&a), a);
        assert!(center(4, 9, 5).is_err());
    }

    #[test]
    fn photometric_identity() {
        let a = arr(1, 6).map(|v| v.abs());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(Photometric::IDENTITY.apply(&a, &mut rng), a);
        let b = Photometric { brightness: 1.0, gamma: 1.0, poisson_peak: Some(50.0) }.apply(&a, &mut rng);
        assert!(b.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn disabled_config_gives_center_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = sample_geometric(&mut rng, 8, 8, 8, &AugmentConfig::off()).unwrap();
        assert_eq!(g.apply(&arr(1, 8)), arr(1, 8));
        assert_eq!(sample_photometric(&mut rng, &AugmentConfig::off()), Photometric::IDENTITY);
    }

    proptest! {
        #[test]
        fn labels_keep_their_value_set(seed in 0u64..500, n in 8usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = Raster::from_fn(n, n, |r, c| ((r * 3 + c) % 4) as u8);
            let g = sample_geometric(&mut rng, n, n, 8, &AugmentConfig::default()).unwrap();
            let out = g.apply_labels(&labels);
            prop_assert!(out.data().iter().all(|v| *v < 4));
        }

        #[test]
        fn input_and_labels_stay_aligned(seed in 0u64..500) {
            // A raster that is its own label keeps matching after any draw
            // without resampling (crop size equal to output size).
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = AugmentConfig { crop_prob: 0.0, ..Default::default() };
            let n = 12;
            let labels = Raster::from_fn(n, n, |r, c| (r * n + c) as u32);
            let a = Array::from_fn(&[1, n, n], |i| i as f64);
            let g = sample_geometric(&mut rng, n, n, 8, &cfg).unwrap();
            let x = g.apply(&a);
            let l = g.apply_labels(&labels);
            prop_assert!(x.data().iter().zip(l.data()).all(|(a, b)| *a == *b as f64));
        }
    }
}
