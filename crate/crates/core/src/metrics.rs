//! Mean Distance Error between front pixel sets, sensor-stratified reports
//! and the two-sample statistics used to compare training runs.
//!
//! MDE over a set of images I with ground-truth fronts P and predictions Q:
//!
//! ```text
//!   sum_i ( sum_{p in P_i} min_q |p - q| + sum_{q in Q_i} min_p |p - q| ) * res_i
//!   -----------------------------------------------------------------------------
//!                           sum_i ( |P_i| + |Q_i| )
//! ```
//!
//! Distances are taken in pixels, converted to meters per image and pooled.
//! Images whose prediction is empty are left out and counted separately.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::raster::FrontMask;

/// Above this many front pixels per image a k-d tree replaces the brute force
/// nearest-neighbour scan.
pub const KD_THRESHOLD: usize = 10_000;

/// Ground-truth and predicted fronts of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontSet {
    pub gt: Vec<(u32, u32)>,
    pub pred: Vec<(u32, u32)>,
    /// Meters per pixel.
    pub resolution: f64,
    pub sensor: String,
    pub glacier: String,
}

impl FrontSet {
    pub fn new(
        gt: Vec<(u32, u32)>,
        pred: Vec<(u32, u32)>,
        resolution: f64,
        sensor: impl Into<String>,
        glacier: impl Into<String>,
    ) -> Result<Self> {
        let s = FrontSet { gt, pred, resolution, sensor: sensor.into(), glacier: glacier.into() };
        s.validate()?;
        Ok(s)
    }

    pub fn from_masks(gt: &FrontMask, pred: &FrontMask, sensor: &str, glacier: &str) -> Result<Self> {
        if gt.grid.dims() != pred.grid.dims() {
            return Err(Error::Validation(format!(
                "front masks differ in size: {:?} vs {:?}",
                gt.grid.dims(),
                pred.grid.dims()
            )));
        }
        let pts = |m: &FrontMask| m.pixels().into_iter().map(|(r, c)| (r as u32, c as u32)).collect();
        Self::new(pts(gt), pts(pred), gt.resolution, sensor, glacier)
    }

    fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::Validation(format!("resolution must be positive, got {}", self.resolution)));
        }
        if self.gt.is_empty() {
            return Err(Error::Validation(format!(
                "image of {} ({}) has an empty ground-truth front",
                self.glacier, self.sensor
            )));
        }
        Ok(())
    }

    pub fn has_prediction(&self) -> bool {
        !self.pred.is_empty()
    }
}

fn sorted(points: &[(u32, u32)]) -> Vec<(u32, u32)> {
    let mut v = points.to_vec();
    v.sort_unstable();
    v
}

fn d2(a: (u32, u32), b: (u32, u32)) -> u64 {
    let dr = a.0.abs_diff(b.0) as u64;
    let dc = a.1.abs_diff(b.1) as u64;
    dr * dr + dc * dc
}

/// Minimum squared distance from each query to `targets`, by exhaustive scan.
pub fn nearest_brute(queries: &[(u32, u32)], targets: &[(u32, u32)]) -> Vec<u64> {
    queries
        .iter()
        .map(|&q| targets.iter().map(|&t| d2(q, t)).min().unwrap_or(u64::MAX))
        .collect()
}

/// Static 2-d tree over integer pixel coordinates.
pub struct KdTree {
    /// Points laid out as an implicit balanced tree: the median of each
    /// slice is its root, split axis alternating with depth.
    points: Vec<(u32, u32)>,
}

impl KdTree {
    pub fn new(points: &[(u32, u32)]) -> Self {
        let mut pts = points.to_vec();
        build(&mut pts, 0);
        KdTree { points: pts }
    }

    pub fn nearest_d2(&self, q: (u32, u32)) -> u64 {
        let mut best = u64::MAX;
        search(&self.points, 0, q, &mut best);
        best
    }
}

fn coord(p: (u32, u32), axis: usize) -> u32 {
    if axis == 0 {
        p.0
    } else {
        p.1
    }
}

fn build(pts: &mut [(u32, u32)], axis: usize) {
    if pts.len() <= 1 {
        return;
    }
    let mid = pts.len() / 2;
    pts.select_nth_unstable_by_key(mid, |&p| (coord(p, axis), coord(p, 1 - axis)));
    let (left, right) = pts.split_at_mut(mid);
    build(left, 1 - axis);
    build(&mut right[1..], 1 - axis);
}

fn search(pts: &[(u32, u32)], axis: usize, q: (u32, u32), best: &mut u64) {
    if pts.is_empty() {
        return;
    }
    let mid = pts.len() / 2;
    let p = pts[mid];
    *best = (*best).min(d2(q, p));
    let diff = coord(q, axis) as i64 - coord(p, axis) as i64;
    let (near, far) = if diff < 0 { (&pts[..mid], &pts[mid + 1..]) } else { (&pts[mid + 1..], &pts[..mid]) };
    search(near, 1 - axis, q, best);
    if ((diff * diff) as u64) <= *best {
        search(far, 1 - axis, q, best);
    }
}

fn nearest(queries: &[(u32, u32)], targets: &[(u32, u32)], use_tree: bool) -> Vec<u64> {
    if use_tree {
        let tree = KdTree::new(targets);
        queries.iter().map(|&q| tree.nearest_d2(q)).collect()
    } else {
        nearest_brute(queries, targets)
    }
}

/// Distance sum (meters) and point count of one image, or `None` without a
/// prediction. Points are visited in sorted order so the floating-point sum
/// does not depend on how the sets were enumerated.
fn image_terms(img: &FrontSet) -> Option<(f64, usize)> {
    if img.pred.is_empty() {
        return None;
    }
    let p = sorted(&img.gt);
    let q = sorted(&img.pred);
    let use_tree = p.len() + q.len() > KD_THRESHOLD;
    let sum_px = |d: Vec<u64>| d.into_iter().map(|v| (v as f64).sqrt()).sum::<f64>();
    let px = sum_px(nearest(&p, &q, use_tree)) + sum_px(nearest(&q, &p, use_tree));
    Some((px * img.resolution, p.len() + q.len()))
}

/// Pooled MDE contributions.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Pooled {
    pub sum_m: f64,
    pub points: usize,
    pub images: usize,
    pub no_front: usize,
}

impl Pooled {
    /// Pooled MDE in meters; `None` if no image had a prediction.
    pub fn mean(&self) -> Option<f64> {
        (self.points > 0).then(|| self.sum_m / self.points as f64)
    }
}

fn pool(images: &[&FrontSet]) -> Result<(Pooled, Vec<Option<f64>>)> {
    for img in images {
        img.validate()?;
    }
    let terms: Vec<Option<(f64, usize)>> = images.par_iter().map(|img| image_terms(img)).collect();
    let mut pooled = Pooled::default();
    let mut per_image = Vec::with_capacity(terms.len());
    for t in terms {
        match t {
            Some((s, n)) => {
                pooled.sum_m += s;
                pooled.points += n;
                pooled.images += 1;
                per_image.push(Some(s / n as f64));
            }
            None => {
                pooled.no_front += 1;
                per_image.push(None);
            }
        }
    }
    Ok((pooled, per_image))
}

/// Pooled contributions over all images.
pub fn mde_pooled(images: &[FrontSet]) -> Result<Pooled> {
    let refs: Vec<&FrontSet> = images.iter().collect();
    Ok(pool(&refs)?.0)
}

/// Pooled MDE in meters. `None` when every image lacks a predicted front.
pub fn mde(images: &[FrontSet]) -> Result<Option<f64>> {
    Ok(mde_pooled(images)?.mean())
}

/// MDE of a single image; `None` without a predicted front.
pub fn per_image_mde(img: &FrontSet) -> Result<Option<f64>> {
    img.validate()?;
    Ok(image_terms(img).map(|(s, n)| s / n as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorStats {
    pub mde: Option<f64>,
    pub images: usize,
    pub no_front: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMde {
    pub glacier: String,
    pub sensor: String,
    pub mde: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MdeReport {
    pub overall: Option<f64>,
    /// Keyed by sensor tag, in lexical order.
    pub per_sensor: BTreeMap<String, SensorStats>,
    pub per_image: Vec<ImageMde>,
    pub no_front: usize,
}

/// Overall and per-sensor pooled MDE plus image-wise values.
pub fn sensor_report(images: &[FrontSet]) -> Result<MdeReport> {
    let all: Vec<&FrontSet> = images.iter().collect();
    let (pooled, per_image) = pool(&all)?;
    let mut groups: BTreeMap<&str, Vec<&FrontSet>> = BTreeMap::new();
    for img in images {
        groups.entry(img.sensor.as_str()).or_default().push(img);
    }
    let mut per_sensor = BTreeMap::new();
    for (sensor, imgs) in groups {
        let (p, _) = pool(&imgs)?;
        per_sensor.insert(
            sensor.to_string(),
            SensorStats { mde: p.mean(), images: imgs.len(), no_front: p.no_front },
        );
    }
    let report = MdeReport {
        overall: pooled.mean(),
        per_sensor,
        per_image: images
            .iter()
            .zip(per_image)
            .map(|(img, m)| ImageMde { glacier: img.glacier.clone(), sensor: img.sensor.clone(), mde: m })
            .collect(),
        no_front: pooled.no_front,
    };
    if report.overall != mde(images)? {
        return Err(Error::Validation("pooled MDE self-check failed".into()));
    }
    Ok(report)
}

fn fmt_m(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |m| format!("{m:.2}"))
}

impl MdeReport {
    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>8} {:>9} {:>12}", "sensor", "images", "no-front", "MDE [m]");
        for (sensor, s) in &self.per_sensor {
            let _ = writeln!(out, "{:<10} {:>8} {:>9} {:>12}", sensor, s.images, s.no_front, fmt_m(s.mde));
        }
        let _ = writeln!(
            out,
            "{:<10} {:>8} {:>9} {:>12}",
            "all",
            self.per_image.len(),
            self.no_front,
            fmt_m(self.overall)
        );
        out
    }

    /// One `key=value` record per sensor and one for the total.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        let mut rec = |name: &str, images: usize, no_front: usize, m: Option<f64>| {
            let _ = writeln!(
                out,
                "sensor={name} images={images} no_front={no_front} mde_m={}",
                m.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"))
            );
        };
        for (sensor, s) in &self.per_sensor {
            rec(sensor, s.images, s.no_front, s.mde);
        }
        rec("all", self.per_image.len(), self.no_front, self.overall);
        out
    }
}

/// Outcome of a one-sided Mann-Whitney U test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MannWhitney {
    /// Count of pairs with `a > b`, ties counting one half.
    pub u: f64,
    pub p: f64,
    pub exact: bool,
}

/// Largest group size for which the null distribution is enumerated.
pub const EXACT_LIMIT: usize = 8;

fn twice_u(a: &[f64], b: &[f64]) -> u64 {
    let mut u2 = 0;
    for &x in a {
        for &y in b {
            if x > y {
                u2 += 2;
            } else if x == y {
                u2 += 1;
            }
        }
    }
    u2
}

/// One-sided Mann-Whitney U test of the alternative "A > B".
pub fn mann_whitney_one_sided(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Validation("Mann-Whitney needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Validation("Mann-Whitney samples must be finite".into()));
    }
    let (n, m) = (a.len(), b.len());
    let u2 = twice_u(a, b);
    let u = u2 as f64 / 2.0;
    if n <= EXACT_LIMIT && m <= EXACT_LIMIT {
        let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
        let total = pooled.len();
        let (mut hits, mut count) = (0u64, 0u64);
        let mut ga = Vec::with_capacity(n);
        let mut gb = Vec::with_capacity(m);
        for bits in 0u32..(1 << total) {
            if bits.count_ones() as usize != n {
                continue;
            }
            ga.clear();
            gb.clear();
            for (i, &v) in pooled.iter().enumerate() {
                if bits >> i & 1 == 1 {
                    ga.push(v);
                } else {
                    gb.push(v);
                }
            }
            count += 1;
            if twice_u(&ga, &gb) >= u2 {
                hits += 1;
            }
        }
        return Ok(MannWhitney { u, p: hits as f64 / count as f64, exact: true });
    }
    let nf = n as f64;
    let mf = m as f64;
    let total = nf + mf;
    let mut sorted: Vec<f64> = a.iter().chain(b).copied().collect();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = nf * mf / 12.0 * ((total + 1.0) - tie_term / (total * (total - 1.0)));
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = (u - nf * mf / 2.0 - 0.5) / var.sqrt();
        let normal = Normal::standard();
        1.0 - normal.cdf(z)
    };
    Ok(MannWhitney { u, p, exact: false })
}

/// Per-test significance level after Bonferroni correction.
pub fn bonferroni(alpha: f64, tests: usize) -> Result<f64> {
    if tests == 0 {
        return Err(Error::Validation("Bonferroni correction needs at least one test".into()));
    }
    Ok(alpha / tests as f64)
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let ss = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (mean, ss)
}

/// Cohen's d with the pooled unbiased standard deviation.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() || a.len() + b.len() < 3 {
        return Err(Error::Validation("Cohen's d needs non-empty samples with at least 3 values in total".into()));
    }
    let (ma, ssa) = mean_var(a);
    let (mb, ssb) = mean_var(b);
    let diff = ma - mb;
    let pooled = ((ssa + ssb) / (a.len() + b.len() - 2) as f64).sqrt();
    if diff == 0.0 {
        return Ok(0.0);
    }
    if pooled == 0.0 {
        return Err(Error::Validation("Cohen's d undefined: both samples are constant but differ".into()));
    }
    Ok(diff / pooled)
}

/// One row of a run-comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub test: MannWhitney,
    pub alpha: f64,
    pub d: f64,
}

/// Compares per-run MDEs of two runs under the alternative "A > B".
pub fn compare_runs(a_name: &str, a: &[f64], b_name: &str, b: &[f64], alpha: f64, tests: usize) -> Result<Comparison> {
    Ok(Comparison {
        a: a_name.to_string(),
        b: b_name.to_string(),
        test: mann_whitney_one_sided(a, b)?,
        alpha: bonferroni(alpha, tests)?,
        d: cohens_d(a, b)?,
    })
}

/// Table with columns A, B, U, p, alpha, d.
pub fn comparison_table(rows: &[Comparison]) -> String {
    let wa = rows.iter().map(|r| r.a.len()).max().unwrap_or(1).max(1);
    let wb = rows.iter().map(|r| r.b.len()).max().unwrap_or(1).max(1);
    let mut out = String::new();
    let _ = writeln!(out, "{:<wa$}  {:<wb$}  {:>6}  {:>5}  {:>6}  {:>6}", "A", "B", "U", "p", "alpha", "d");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<wa$}  {:<wb$}  {:>6.1}  {:>5.2}  {:>6.3}  {:>6.2}",
            r.a, r.b, r.test.u, r.test.p, r.alpha, r.d
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(gt: &[(u32, u32)], pred: &[(u32, u32)], res: f64) -> FrontSet {
        FrontSet::new(gt.to_vec(), pred.to_vec(), res, "S1", "g").unwrap()
    }

    #[test]
    fn identical_sets_give_zero() {
        let pts = [(1, 2), (3, 4), (5, 5)];
        assert_eq!(mde(&[img(&pts, &pts, 7.0)]).unwrap(), Some(0.0));
    }

    #[test]
    fn singleton_pair() {
        let i = img(&[(0, 0)], &[(3, 4)], 10.0);
        assert_eq!(per_image_mde(&i).unwrap(), Some(50.0));
        assert_eq!(mde(&[i]).unwrap(), Some(50.0));
    }

    #[test]
    fn denominator_is_pooled() {
        // image 1: one point each, 5 px apart -> sum 10, count 2
        let a = img(&[(0, 0)], &[(3, 4)], 1.0);
        // image 2: three points each, offset by one row -> sum 6, count 6
        let b = img(&[(0, 0), (0, 5), (0, 10)], &[(1, 0), (1, 5), (1, 10)], 1.0);
        assert_eq!(per_image_mde(&a).unwrap(), Some(5.0));
        assert_eq!(per_image_mde(&b).unwrap(), Some(1.0));
        assert_eq!(mde(&[a, b]).unwrap(), Some(2.0));
    }

    #[test]
    fn empty_prediction_is_tallied() {
        let a = img(&[(0, 0)], &[(3, 4)], 10.0);
        let b = img(&[(2, 2)], &[], 10.0);
        let p = mde_pooled(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(p.no_front, 1);
        assert_eq!(p.mean(), Some(50.0));
        assert_eq!(mde(&[b]).unwrap(), None);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(FrontSet::new(vec![(0, 0)], vec![], 0.0, "S1", "g").is_err());
        assert!(FrontSet::new(vec![], vec![(0, 0)], 1.0, "S1", "g").is_err());
    }

    #[test]
    fn kd_tree_matches_brute_force() {
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as u32 % 500
        };
        let targets: Vec<(u32, u32)> = (0..700).map(|_| (next(), next())).collect();
        let queries: Vec<(u32, u32)> = (0..300).map(|_| (next(), next())).collect();
        let tree = KdTree::new(&targets);
        let fast: Vec<u64> = queries.iter().map(|&q| tree.nearest_d2(q)).collect();
        assert_eq!(fast, nearest_brute(&queries, &targets));
    }

    #[test]
    fn sensor_report_groups_and_pools() {
        let a = FrontSet::new(vec![(0, 0)], vec![(3, 4)], 1.0, "TSX", "g1").unwrap();
        let b = FrontSet::new(vec![(0, 0), (0, 5), (0, 10)], vec![(1, 0), (1, 5), (1, 10)], 1.0, "ERS", "g2").unwrap();
        let r = sensor_report(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(r.overall, Some(2.0));
        assert_eq!(r.per_sensor.keys().collect::<Vec<_>>(), ["ERS", "TSX"]);
        assert_eq!(r.per_sensor["TSX"].mde, Some(5.0));
        assert_eq!(r.per_sensor["ERS"].mde, Some(1.0));
        let single = sensor_report(&[a]).unwrap();
        assert_eq!(single.overall, single.per_sensor["TSX"].mde);
        let empty = sensor_report(&[]).unwrap();
        assert_eq!(empty.overall, None);
        assert!(empty.per_sensor.is_empty());
        assert!(r.to_table().contains("ERS"));
        assert!(r.to_records().contains("sensor=all images=2 no_front=0 mde_m=2.000000"));
    }

    #[test]
    fn mann_whitney_fully_separated() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [-5.0, -4.0, -3.0, -2.0, -1.0];
        let r = mann_whitney_one_sided(&a, &b).unwrap();
        assert_eq!(r.u, 25.0);
        assert_eq!(r.p, 1.0 / 252.0);
        assert!(r.exact);
    }

    #[test]
    fn mann_whitney_identical_samples_use_midranks() {
        let a = [3.0, 1.0, 4.0, 1.5, 5.0];
        let b = [5.0, 4.0, 3.0, 1.5, 1.0];
        assert_eq!(mann_whitney_one_sided(&a, &b).unwrap().u, 12.5);
    }

    #[test]
    fn mann_whitney_reproduces_reported_p_values() {
        // n = m = 5 with U = 20, 18 and 15
        let b = [0.0, 1.0, 2.0, 3.0, 4.0];
        let cases = [([1.5, 2.5, 10.0, 11.0, 12.0], 20.0, 19.0, 0.08), ([0.5, 1.5, 10.0, 11.0, 12.0], 18.0, 39.0, 0.15)];
        for (a, u, hits, reported) in cases {
            let r = mann_whitney_one_sided(&a, &b).unwrap();
            assert_eq!(r.u, u);
            assert_eq!(r.p, hits / 252.0);
            assert!(((r.p * 100.0).round() / 100.0 - reported).abs() < 1e-12);
        }
        let a = [-0.5, 0.5, 3.5, 10.0, 11.0];
        let r = mann_whitney_one_sided(&a, &b).unwrap();
        assert_eq!(r.u, 15.0);
        assert_eq!(r.p, 87.0 / 252.0);
    }

    #[test]
    fn mann_whitney_normal_branch_is_close_to_exact_tail() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 + 0.5).collect();
        let b: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let r = mann_whitney_one_sided(&a, &b).unwrap();
        assert!(!r.exact);
        assert!(r.p > 0.3 && r.p < 0.6, "{r:?}");
        let far: Vec<f64> = (100..112).map(|i| i as f64).collect();
        assert!(mann_whitney_one_sided(&far, &b).unwrap().p < 1e-4);
    }

    #[test]
    fn bonferroni_levels() {
        let a = bonferroni(0.05, 6).unwrap();
        assert!((a - 0.00833).abs() < 5e-6);
        assert_eq!(format!("{a:.3}"), "0.008");
        assert_eq!(bonferroni(0.05, 1).unwrap(), 0.05);
        assert!((bonferroni(0.05, 10).unwrap() - 0.005).abs() < 1e-15);
        assert!(bonferroni(0.05, 0).is_err());
    }

    #[test]
    fn cohens_d_cases() {
        let a = [1.0, 2.0, 4.0, 7.0];
        assert_eq!(cohens_d(&a, &a).unwrap(), 0.0);
        // shifting by c pooled standard deviations gives d = c
        let b = [0.0, 1.0, 2.0, 3.0, 4.0];
        let s = (2.5f64).sqrt();
        let shifted: Vec<f64> = b.iter().map(|v| v + 1.5 * s).collect();
        assert!((cohens_d(&shifted, &b).unwrap() - 1.5).abs() < 1e-12);
        assert!(cohens_d(&[1.0, 1.0], &[2.0, 2.0]).is_err());
    }

    #[test]
    fn comparison_table_layout() {
        let a = [5.0, 6.0, 7.0, 8.0, 9.0];
        let b = [0.0, 1.0, 2.0, 3.0, 4.0];
        let row = compare_runs("run-a", &a, "run-b", &b, 0.05, 6).unwrap();
        let t = comparison_table(&[row]);
        assert!(t.lines().next().unwrap().starts_with("A"));
        assert!(t.contains("25.0") && t.contains("0.008"));
    }

    fn brute(images: &[FrontSet]) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0;
        for i in images {
            if i.pred.is_empty() {
                continue;
            }
            let p = sorted(&i.gt);
            let q = sorted(&i.pred);
            let s = |a: &[(u32, u32)], b: &[(u32, u32)]| {
                a.iter()
                    .map(|&x| b.iter().map(|&y| d2(x, y)).min().map(|d| (d as f64).sqrt()).unwrap())
                    .sum::<f64>()
            };
            num += (s(&p, &q) + s(&q, &p)) * i.resolution;
            den += p.len() + q.len();
        }
        (den > 0).then(|| num / den as f64)
    }

    fn front_set() -> impl Strategy<Value = FrontSet> {
        let pts = || prop::collection::btree_set((0u32..32, 0u32..32), 1..20);
        (pts(), pts(), 1u32..60).prop_map(|(p, q, r)| {
            FrontSet::new(p.into_iter().collect(), q.into_iter().collect(), r as f64 * 2.5, "S1", "g").unwrap()
        })
    }

    proptest! {
        #[test]
        fn pooled_mde_equals_brute_force(images in prop::collection::vec(front_set(), 1..4)) {
            prop_assert_eq!(mde(&images).unwrap(), brute(&images));
        }

        #[test]
        fn symmetric_and_order_invariant(s in front_set()) {
            let mut swapped = s.clone();
            std::mem::swap(&mut swapped.gt, &mut swapped.pred);
            let mut reversed = s.clone();
            reversed.gt.reverse();
            reversed.pred.reverse();
            let v = per_image_mde(&s).unwrap();
            prop_assert_eq!(v, per_image_mde(&swapped).unwrap());
            prop_assert_eq!(v, per_image_mde(&reversed).unwrap());
            prop_assert_eq!(v, mde(std::slice::from_ref(&s)).unwrap());
        }

        #[test]
        fn scales_with_resolution(s in front_set(), k in 0i32..4) {
            let f = 2f64.powi(k);
            let mut scaled = s.clone();
            scaled.resolution *= f;
            prop_assert_eq!(per_image_mde(&scaled).unwrap().unwrap(), per_image_mde(&s).unwrap().unwrap() * f);
        }

        #[test]
        fn pooled_lies_between_extremes_for_equal_weights(
            base in prop::collection::btree_set((0u32..32, 0u32..32), 4),
            shifts in prop::collection::vec((0u32..5, 0u32..5), 2..4),
        ) {
            let base: Vec<(u32, u32)> = base.into_iter().collect();
            let images: Vec<FrontSet> = shifts
                .iter()
                .map(|&(dr, dc)| {
                    let pred = base.iter().map(|&(r, c)| (r + dr, c + dc)).collect();
                    FrontSet::new(base.clone(), pred, 1.0, "S1", "g").unwrap()
                })
                .collect();
            let each: Vec<f64> = images.iter().map(|i| per_image_mde(i).unwrap().unwrap()).collect();
            let pooled = mde(&images).unwrap().unwrap();
            let lo = each.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = each.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(pooled >= lo - 1e-12 && pooled <= hi + 1e-12);
        }
    }

    #[test]
    fn exact_p_agrees_with_monte_carlo() {
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let a: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0) + 0.3).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
            let exact = mann_whitney_one_sided(&a, &b).unwrap();
            let mut pooled: Vec<f64> = a.iter().chain(&b).copied().collect();
            let trials = 20_000;
            let mut hits = 0;
            for _ in 0..trials {
                pooled.shuffle(&mut rng);
                if twice_u(&pooled[..6], &pooled[6..]) as f64 / 2.0 >= exact.u {
                    hits += 1;
                }
            }
            let est = hits as f64 / trials as f64;
            let sigma = (exact.p * (1.0 - exact.p) / trials as f64).sqrt();
            assert!((est - exact.p).abs() <= 3.0 * sigma + 1e-9, "exact {} mc {est}", exact.p);
        }
    }
}
