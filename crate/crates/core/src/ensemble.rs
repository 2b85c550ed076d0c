//! Tiled scene inference with rotation TTA, member averaging and
//! per-class uncertainty.
//!
//! Scenes are covered by inner windows; each window is predicted from the
//! model-input tile centred on it, clamped to the scene:
//!
//! ```text
//!   tile origin = clamp(window origin - (S - inner) / 2, 0, H - S)
//! ```
//!
//! Only the window part of each tile output is merged.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;

use crate::augment::orient;
use crate::error::{Error, Result};
use crate::model::Tyrion;
use crate::postprocess::{mean_patches, merge_patches, zones_to_front, PipelineOutput};
use crate::raster::{BBox, ConfidenceMap, FrontMask, ZoneMask};
use crate::tensor::Array;

/// Something that maps an `S × S` SAR patch to an `S × S` confidence map.
pub trait ZoneModel: Sync {
    fn input_size(&self) -> usize;
    /// Side of the central region kept at test time.
    fn inner_size(&self) -> usize;
    fn confidence(&self, patch: &Array) -> Result<ConfidenceMap>;
}

impl ZoneModel for Tyrion {
    fn input_size(&self) -> usize {
        self.cfg.input_size
    }

    fn inner_size(&self) -> usize {
        self.cfg.inner_size
    }

    fn confidence(&self, patch: &Array) -> Result<ConfidenceMap> {
        self.predict_confidence(patch)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub tile: usize,
    pub stride: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl TilePlan {
    /// Tile origins in row-major order.
    pub fn origins(&self) -> Vec<(usize, usize)> {
        self.rows.iter().flat_map(|&r| self.cols.iter().map(move |&c| (r, c))).collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn axis_origins(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut out = vec![0];
    let mut o = 0;
    while o + tile < len {
        o = (o + stride).min(len - tile);
        out.push(o);
    }
    out
}

/// Origins at multiples of `tile * (1 - overlap)`, the last one per axis
/// clamped so the tile fits.
pub fn plan_tiles(hw: (usize, usize), tile: usize, overlap: f64) -> Result<TilePlan> {
    let (h, w) = hw;
    if tile == 0 || tile > h || tile > w {
        return Err(Error::contract("plan_tiles", format!("tile {tile} does not fit a {h}x{w} image")));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::contract("plan_tiles", format!("overlap {overlap} outside [0, 1)")));
    }
    let stride = ((tile as f64 * (1.0 - overlap)).round() as usize).max(1);
    Ok(TilePlan { tile, stride, rows: axis_origins(h, tile, stride), cols: axis_origins(w, tile, stride) })
}

fn square(patch: &Array) -> Result<usize> {
    match patch.shape() {
        [a, b] if a == b => Ok(*a),
        s => Err(Error::dim("patch", format!("expected a square [S, S] patch, got {s:?}"))),
    }
}

fn conf_array(c: &ConfidenceMap) -> Array {
    let (h, w) = c.dims();
    Array::new(&[4, h, w], c.data().to_vec()).expect("size")
}

/// Average over the four quarter-turn rotations of the input, each output
/// turned back before averaging, then renormalised.
pub fn tta_confidence<M: ZoneModel + ?Sized>(model: &M, patch: &Array) -> Result<ConfidenceMap> {
    let s = square(patch)?;
    let x = patch.clone().reshaped(&[1, s, s])?;
    let mut sum = vec![0.0; 4 * s * s];
    for k in 0..4u8 {
        let rotated = orient(&x, false, false, k).reshaped(&[s, s])?;
        let out = model.confidence(&rotated)?;
        let back = orient(&conf_array(&out), false, false, (4 - k) % 4);
        sum.iter_mut().zip(back.data()).for_each(|(a, b)| *a += b);
    }
    let mut m = ConfidenceMap::new(s, s, sum.into_iter().map(|v| v / 4.0).collect())?;
    m.renormalize();
    Ok(m)
}

/// Per-value mean that is exact when all values are equal.
fn exact_mean(values: &[f64]) -> f64 {
    if values.iter().all(|v| v.to_bits() == values[0].to_bits()) {
        values[0]
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn member_maps<M: ZoneModel>(members: &[M], patch: &Array, tta: bool) -> Result<Vec<ConfidenceMap>> {
    if members.is_empty() {
        return Err(Error::contract("ensemble", "no members"));
    }
    members
        .par_iter()
        .map(|m| if tta { tta_confidence(m, patch) } else { m.confidence(patch) })
        .collect()
}

/// Mean of per-member confidence maps.
pub fn mean_confidence(maps: &[ConfidenceMap]) -> Result<ConfidenceMap> {
    let (h, w) = maps[0].dims();
    if maps.iter().any(|m| m.dims() != (h, w)) {
        return Err(Error::dim("ensemble", "member maps differ in size"));
    }
    let mut buf = vec![0.0; maps.len()];
    let data = (0..4 * h * w)
        .map(|i| {
            for (b, m) in buf.iter_mut().zip(maps) {
                *b = m.data()[i];
            }
            exact_mean(&buf)
        })
        .collect();
    ConfidenceMap::new(h, w, data)
}

pub fn ensemble_confidence<M: ZoneModel>(members: &[M], patch: &Array, tta: bool) -> Result<ConfidenceMap> {
    mean_confidence(&member_maps(members, patch, tta)?)
}

/// Per-pixel, per-class population standard deviation over members.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap(pub ConfidenceMap);

impl UncertaintyMap {
    pub fn max(&self) -> f64 {
        self.0.data().iter().copied().fold(0.0, f64::max)
    }
}

pub fn uncertainty(maps: &[ConfidenceMap]) -> Result<UncertaintyMap> {
    let mean = mean_confidence(maps)?;
    let (h, w) = mean.dims();
    let n = maps.len() as f64;
    let data = (0..4 * h * w)
        .map(|i| {
            let mu = mean.data()[i];
            let var = maps.iter().map(|m| (m.data()[i] - mu).powi(2)).sum::<f64>() / n;
            var.sqrt()
        })
        .collect();
    Ok(UncertaintyMap(ConfidenceMap::new(h, w, data)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InferConfig {
    pub tta: bool,
    /// 50 % overlap between inner windows instead of none.
    pub overlap: bool,
}

impl InferConfig {
    pub fn overlap_frac(&self) -> f64 {
        if self.overlap {
            0.5
        } else {
            0.0
        }
    }
}

/// Model-stage output of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfidence {
    pub confidence: ConfidenceMap,
    pub uncertainty: UncertaintyMap,
    pub windows: usize,
    pub tiles: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneInference {
    pub zones: ZoneMask,
    pub front: FrontMask,
    pub uncertainty: UncertaintyMap,
    pub confidence: ConfidenceMap,
}

/// Tiles, predicts and merges a whole scene `[H, W]`.
pub fn scene_confidence<M: ZoneModel>(members: &[M], sar: &Array, cfg: InferConfig) -> Result<SceneConfidence> {
    let first = members.first().ok_or_else(|| Error::contract("infer_scene", "no members"))?;
    let (s, inner) = (first.input_size(), first.inner_size());
    if members.iter().any(|m| m.input_size() != s || m.inner_size() != inner) {
        return Err(Error::Config("ensemble members differ in input or inner size".into()));
    }
    let (h, w) = match sar.shape() {
        [h, w] => (*h, *w),
        other => return Err(Error::dim("infer_scene", format!("expected [H, W] SAR, got {other:?}"))),
    };
    if h < s || w < s {
        return Err(Error::contract("infer_scene", format!("scene {h}x{w} is smaller than the model input {s}")));
    }
    let plan = plan_tiles((h, w), inner, cfg.overlap_frac())?;
    let margin = (s - inner) / 2;
    let tile_of = |r: usize, len: usize| r.saturating_sub(margin).min(len - s);
    let windows: Vec<((usize, usize), (usize, usize))> =
        plan.origins().into_iter().map(|(r, c)| ((r, c), (tile_of(r, h), tile_of(c, w)))).collect();
    let tiles: Vec<(usize, usize)> = windows.iter().map(|(_, t)| *t).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let results: Vec<Result<(ConfidenceMap, UncertaintyMap)>> = tiles
        .par_iter()
        .map(|&(tr, tc)| {
            let patch = Array::from_fn(&[s, s], |i| sar.data()[(tr + i / s) * w + tc + i % s]);
            let maps = member_maps(members, &patch, cfg.tta)?;
            Ok((mean_confidence(&maps)?, uncertainty(&maps)?))
        })
        .collect();
    let mut per_tile = BTreeMap::new();
    for (t, r) in tiles.iter().zip(results) {
        per_tile.insert(*t, r?);
    }
    let mut conf = Vec::with_capacity(windows.len());
    let mut unc = Vec::with_capacity(windows.len());
    for ((r, c), (tr, tc)) in &windows {
        let (cm, um) = &per_tile[&(*tr, *tc)];
        conf.push((cm.window(r - tr, c - tc, inner, inner), (*r, *c)));
        unc.push((um.0.window(r - tr, c - tc, inner, inner), (*r, *c)));
    }
    Ok(SceneConfidence {
        confidence: merge_patches(&conf, (h, w))?,
        uncertainty: UncertaintyMap(mean_patches(&unc, (h, w))?),
        windows: windows.len(),
        tiles: tiles.len(),
    })
}

pub fn infer_scene<M: ZoneModel>(
    members: &[M],
    sar: &Array,
    bbox: &BBox,
    resolution: f64,
    cfg: InferConfig,
) -> Result<SceneInference> {
    let sc = scene_confidence(members, sar, cfg)?;
    let PipelineOutput { zones, front } = zones_to_front(&sc.confidence, bbox, resolution)?;
    Ok(SceneInference { zones, front, uncertainty: sc.uncertainty, confidence: sc.confidence })
}

/// Timing of a batch of scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputReport {
    pub images: usize,
    pub members: usize,
    pub tta: bool,
    pub overlap: bool,
    pub model_s: f64,
    pub post_s: f64,
}

impl ThroughputReport {
    pub fn total_s(&self) -> f64 {
        self.model_s + self.post_s
    }

    /// Images per minute including post-processing.
    pub fn images_per_min(&self) -> f64 {
        self.images as f64 * 60.0 / self.total_s().max(1e-9)
    }

    pub fn to_record(&self) -> String {
        format!(
            "members={} tta={} overlap={} images={} model_s={:.6} post_s={:.6} total_s={:.6} images_per_min={:.6}",
            self.members,
            self.tta,
            self.overlap,
            self.images,
            self.model_s,
            self.post_s,
            self.total_s(),
            self.images_per_min()
        )
    }

    pub fn parse_record(line: &str) -> Option<ThroughputReport> {
        let kv: BTreeMap<&str, &str> = line.split_whitespace().filter_map(|f| f.split_once('=')).collect();
        Some(ThroughputReport {
            images: kv.get("images")?.parse().ok()?,
            members: kv.get("members")?.parse().ok()?,
            tta: kv.get("tta")?.parse().ok()?,
            overlap: kv.get("overlap")?.parse().ok()?,
            model_s: kv.get("model_s")?.parse().ok()?,
            post_s: kv.get("post_s")?.parse().ok()?,
        })
    }
}

/// One scene to run through [`throughput_report`].
pub struct BenchScene<'a> {
    pub sar: &'a Array,
    pub bbox: &'a BBox,
    pub resolution: f64,
}

/// Runs every scene and reports model and post-processing wall time.
pub fn throughput_report<M: ZoneModel>(members: &[M], scenes: &[BenchScene], cfg: InferConfig) -> Result<ThroughputReport> {
    let mut model_s = 0.0;
    let mut post_s = 0.0;
    for sc in scenes {
        let t = Instant::now();
        let conf = scene_confidence(members, sc.sar, cfg)?;
        model_s += t.elapsed().as_secs_f64();
        let t = Instant::now();
        zones_to_front(&conf.confidence, sc.bbox, sc.resolution)?;
        post_s += t.elapsed().as_secs_f64();
    }
    Ok(ThroughputReport { images: scenes.len(), members: members.len(), tta: cfg.tta, overlap: cfg.overlap, model_s, post_s })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_scene, SynthParams};
    use crate::metrics::{mde, FrontSet};
    use crate::postprocess::run_pipeline;
    use proptest::prelude::*;

    /// Returns the same distribution everywhere.
    struct Constant(usize, [f64; 4]);

    impl ZoneModel for Constant {
        fn input_size(&self) -> usize {
            self.0
        }
        fn inner_size(&self) -> usize {
            self.0 / 2
        }
        fn confidence(&self, _: &Array) -> Result<ConfidenceMap> {
            Ok(ConfidenceMap::constant(self.0, self.0, self.1))
        }
    }

    /// Pointwise softmax of a fixed linear map of the pixel value: rotation
    /// equivariant by construction.
    struct Pointwise(usize);

    impl ZoneModel for Pointwise {
        fn input_size(&self) -> usize {
            self.0
        }
        fn inner_size(&self) -> usize {
            self.0 / 2
        }
        fn confidence(&self, patch: &Array) -> Result<ConfidenceMap> {
            let n = self.0;
            let mut data = vec![0.0; 4 * n * n];
            for (i, &v) in patch.data().iter().enumerate() {
                let z = [0.1 - v, 2.0 * v, 0.5, 3.0 * v - 1.0].map(f64::exp);
                let s: f64 = z.iter().sum();
                for k in 0..4 {
                    data[k * n * n + i] = z[k] / s;
                }
            }
            ConfidenceMap::new(n, n, data)
        }
    }

    /// Knows the ground truth of one scene.
    struct Oracle(ZoneMask, usize);

    impl ZoneModel for Oracle {
        fn input_size(&self) -> usize {
            self.1
        }
        fn inner_size(&self) -> usize {
            self.1 / 2
        }
        fn confidence(&self, patch: &Array) -> Result<ConfidenceMap> {
            // The patch carries its own row/col via encoded values.
            let n = self.1;
            let grid = crate::raster::Raster::from_fn(n, n, |r, c| {
                let code = patch.data()[r * n + c] as usize;
                self.0.grid.get(code / 4096, code % 4096)
            });
            Ok(ConfidenceMap::one_hot(&ZoneMask::new(grid, self.0.resolution)?))
        }
    }

    #[test]
    fn tile_plans() {
        let p = plan_tiles((1024, 1024), 512, 0.5).unwrap();
        assert_eq!((p.stride, p.len()), (256, 9));
        assert_eq!(p.rows, [0, 256, 512]);
        assert_eq!(plan_tiles((512, 512), 512, 0.5).unwrap().origins(), [(0, 0)]);
        let p = plan_tiles((700, 512), 512, 0.5).unwrap();
        assert_eq!(p.rows, [0, 188]);
        assert_eq!(p.cols, [0]);
        assert!(plan_tiles((300, 700), 512, 0.5).is_err());
        assert_eq!(plan_tiles((1024, 1024), 512, 0.0).unwrap().rows, [0, 512]);
    }

    proptest! {
        #[test]
        fn tiles_cover_every_pixel(h in 1usize..300, w in 1usize..300, tile in 1usize..300, half in any::<bool>()) {
            prop_assume!(tile <= h && tile <= w);
            let p = plan_tiles((h, w), tile, if half { 0.5 } else { 0.0 }).unwrap();
            let mut hit = vec![false; h * w];
            for (r, c) in p.origins() {
                prop_assert!(r + tile <= h && c + tile <= w);
                for i in r..r + tile {
                    for j in c..c + tile {
                        hit[i * w + j] = true;
                    }
                }
            }
            prop_assert!(hit.iter().all(|v| *v));
            let o = p.origins();
            prop_assert!(o.windows(2).all(|x| x[0] < x[1]));
        }
    }

    fn patch(n: usize) -> Array {
        Array::from_fn(&[n, n], |i| ((i * 37) % 101) as f64 / 101.0)
    }

    #[test]
    fn tta_identities() {
        let c = Constant(8, [0.1, 0.2, 0.3, 0.4]);
        let out = tta_confidence(&c, &patch(8)).unwrap();
        assert!(out.data().iter().zip(c.confidence(&patch(8)).unwrap().data()).all(|(a, b)| (a - b).abs() < 1e-15));
        let p = Pointwise(8);
        let x = patch(8);
        let single = p.confidence(&x).unwrap();
        let tta = tta_confidence(&p, &x).unwrap();
        assert!(single.data().iter().zip(tta.data()).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(tta.max_sum_error() < 1e-12);
    }

    #[test]
    fn ensemble_identities() {
        let x = patch(8);
        let one = ensemble_confidence(&[Pointwise(8)], &x, true).unwrap();
        let five = ensemble_confidence(&[Pointwise(8), Pointwise(8), Pointwise(8), Pointwise(8), Pointwise(8)], &x, true).unwrap();
        assert_eq!(one, five);
        let u = uncertainty(&[one.clone(), one.clone(), one.clone()]).unwrap();
        assert!(u.0.data().iter().all(|v| *v == 0.0));
        let (c1, c2) = ([0.1, 0.2, 0.3, 0.4], [0.4, 0.3, 0.2, 0.1]);
        let m = ensemble_confidence(&[Constant(8, c1), Constant(8, c2)], &x, false).unwrap();
        for k in 0..4 {
            assert!((m.get(k, 3, 3) - (c1[k] + c2[k]) / 2.0).abs() < 1e-15);
        }
        assert!(m.max_sum_error() < 1e-12);
        let maps = [ConfidenceMap::constant(8, 8, c1), ConfidenceMap::constant(8, 8, c2)];
        let u = uncertainty(&maps).unwrap();
        for k in 0..4 {
            assert!((u.0.get(k, 0, 0) - (c1[k] - c2[k]).abs() / 2.0).abs() < 1e-15);
        }
        assert!(u.max() <= 0.5);
        assert!(ensemble_confidence::<Constant>(&[], &x, false).is_err());
    }

    #[test]
    fn degenerate_config_equals_plain_pipeline() {
        let m = Pointwise(16);
        let sar = Array::from_fn(&[16, 16], |i| ((i * 13) % 17) as f64 / 17.0);
        let bbox = BBox::full(16, 16);
        let got = infer_scene(&[m], &sar, &bbox, 30.0, InferConfig::default()).unwrap();
        let conf = Pointwise(16).confidence(&sar).unwrap();
        let plain = run_pipeline(&[(conf, (0, 0))], (16, 16), &bbox, 30.0).unwrap();
        assert_eq!((got.zones, got.front), (plain.zones, plain.front));
    }

    #[test]
    fn ideal_model_recovers_front_in_all_configurations() {
        let p = SynthParams { size: 96, resolution: 30.0, seed: 21, ..Default::default() };
        let s = synth_scene(&p).unwrap();
        // Encode each pixel's coordinates in the input so the oracle can
        // look up labels for any tile or rotation.
        let sar = Array::from_fn(&[96, 96], |i| ((i / 96) * 4096 + i % 96) as f64);
        for (tta, overlap) in [(false, false), (true, false), (false, true), (true, true)] {
            let members = [Oracle(s.zones.clone(), 64)];
            let out = infer_scene(&members, &sar, &s.bbox, 30.0, InferConfig { tta, overlap }).unwrap();
            assert_eq!(out.zones.dims(), (96, 96));
            let set = FrontSet::from_masks(&s.front, &out.front, "S1", "g").unwrap();
            assert_eq!(mde(&[set]).unwrap(), Some(0.0), "tta={tta} overlap={overlap}");
        }
    }

    #[test]
    fn inference_is_deterministic_and_shape_stable() {
        let sar = Array::from_fn(&[40, 56], |i| ((i * 7) % 23) as f64 / 23.0);
        let bbox = BBox::full(40, 56);
        let members = [Pointwise(32), Pointwise(32)];
        let base = infer_scene(&members, &sar, &bbox, 30.0, InferConfig::default()).unwrap();
        for cfg in [InferConfig { tta: true, overlap: true }, InferConfig { tta: false, overlap: true }] {
            let a = infer_scene(&members, &sar, &bbox, 30.0, cfg).unwrap();
            let b = infer_scene(&members, &sar, &bbox, 30.0, cfg).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.zones.dims(), base.zones.dims());
            assert!(a.zones.grid.data().iter().all(|v| *v < 4));
        }
    }

    #[test]
    fn report_roundtrip() {
        let sar = patch(16);
        let bbox = BBox::full(16, 16);
        let r = throughput_report(&[Pointwise(16)], &[BenchScene { sar: &sar, bbox: &bbox, resolution: 10.0 }], InferConfig::default()).unwrap();
        assert!(r.images_per_min() > 0.0 && r.images_per_min().is_finite());
        let back = ThroughputReport::parse_record(&r.to_record()).unwrap();
        assert_eq!((back.images, back.members, back.tta, back.overlap), (1, 1, false, false));
    }
}
