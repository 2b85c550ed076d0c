//! Zone segmentation to calving front: patch merging, argmax, largest-ocean
//! retention with hole filling, ocean/glacier boundary extraction, bounding
//! box masking and the minimum front length filter.
//!
//! Connectivity conventions: components (ocean and front) are 8-connected,
//! the complement used for hole filling is 4-connected, and the ocean/glacier
//! boundary test uses 4-adjacency.

use std::cmp::Ordering;
use std::collections::VecDeque;

use crate::error::{Error, Result};
pub use crate::raster::{BBox, ConfidenceMap, FrontMask, Raster, Zone, ZoneMask};

/// Fronts shorter than this many meters are discarded.
pub const MIN_FRONT_LENGTH_M: f64 = 750.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

/// Connected-component labelling of the `true` pixels. Labels start at 1 in
/// row-major order of each component's first pixel; 0 marks background.
/// Returns the label grid and the size of every component (index = label - 1).
pub fn label_components(mask: &Raster<bool>, conn: Connectivity) -> (Raster<u32>, Vec<usize>) {
    let (rows, cols) = mask.dims();
    let mut labels = Raster::filled(rows, cols, 0u32);
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for r in 0..rows {
        for c in 0..cols {
            if !mask.get(r, c) || labels.get(r, c) != 0 {
                continue;
            }
            let label = sizes.len() as u32 + 1;
            let mut size = 0;
            labels.set(r, c, label);
            queue.push_back((r, c));
            while let Some((pr, pc)) = queue.pop_front() {
                size += 1;
                let nbrs: Vec<(usize, usize)> = match conn {
                    Connectivity::Four => mask.neighbors4(pr, pc).collect(),
                    Connectivity::Eight => mask.neighbors8(pr, pc).collect(),
                };
                for (nr, nc) in nbrs {
                    if mask.get(nr, nc) && labels.get(nr, nc) == 0 {
                        labels.set(nr, nc, label);
                        queue.push_back((nr, nc));
                    }
                }
            }
            sizes.push(size);
        }
    }
    (labels, sizes)
}

fn cmp_patch(a: &(ConfidenceMap, (usize, usize)), b: &(ConfidenceMap, (usize, usize))) -> Ordering {
    a.1.cmp(&b.1)
        .then_with(|| a.0.dims().cmp(&b.0.dims()))
        .then_with(|| {
            a.0.data()
                .iter()
                .zip(b.0.data())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// Averages overlapping patch confidences onto a `canvas` grid.
///
/// Patches are summed in a canonical order (position, then contents), so the
/// result does not depend on how the caller enumerates them.
pub fn merge_patches(patches: &[(ConfidenceMap, (usize, usize))], canvas: (usize, usize)) -> Result<ConfidenceMap> {
    let mut merged = mean_patches(patches, canvas)?;
    merged.renormalize();
    Ok(merged)
}

/// Per-pixel mean of overlapping class-major maps without renormalisation,
/// with the same ordering and coverage rules as [`merge_patches`].
pub fn mean_patches(patches: &[(ConfidenceMap, (usize, usize))], canvas: (usize, usize)) -> Result<ConfidenceMap> {
    let (rows, cols) = canvas;
    let mut order: Vec<&(ConfidenceMap, (usize, usize))> = patches.iter().collect();
    order.sort_by(|a, b| cmp_patch(a, b));
    let mut sum = ConfidenceMap::zeros(rows, cols);
    let mut count = Raster::filled(rows, cols, 0u32);
    for (patch, (r0, c0)) in order {
        let (h, w) = patch.dims();
        if r0 + h > rows || c0 + w > cols {
            return Err(Error::contract(
                "merge_patches",
                format!("patch {h}x{w} at ({r0}, {c0}) exceeds canvas {rows}x{cols}"),
            ));
        }
        for r in 0..h {
            for c in 0..w {
                for k in 0..Zone::COUNT {
                    let v = sum.get(k, r0 + r, c0 + c) + patch.get(k, r, c);
                    sum.set(k, r0 + r, c0 + c, v);
                }
                count.set(r0 + r, c0 + c, count.get(r0 + r, c0 + c) + 1);
            }
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            let n = count.get(r, c);
            if n == 0 {
                return Err(Error::Coverage { row: r, col: c });
            }
            for k in 0..Zone::COUNT {
                sum.set(k, r, c, sum.get(k, r, c) / n as f64);
            }
        }
    }
    Ok(sum)
}

/// Per-pixel argmax; on ties the higher class id wins.
pub fn argmax_zones(conf: &ConfidenceMap, resolution: f64) -> Result<ZoneMask> {
    let grid = Raster::from_fn(conf.rows(), conf.cols(), |r, c| {
        let mut best = 0usize;
        for k in 1..Zone::COUNT {
            if conf.get(k, r, c) >= conf.get(best, r, c) {
                best = k;
            }
        }
        best as u8
    });
    ZoneMask::new(grid, resolution)
}

/// Keeps only the largest 8-connected ocean component (others become
/// glacier) and turns every non-ocean region enclosed by it into ocean.
/// Regions touching the image border are never considered enclosed.
pub fn largest_ocean_fill(zones: &ZoneMask) -> ZoneMask {
    let ocean = zones.grid.map(|z| z == Zone::Ocean.id());
    let (labels, sizes) = label_components(&ocean, Connectivity::Eight);
    let Some(keep) = sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i as u32 + 1)
    else {
        return zones.clone();
    };

    let mut out = zones.clone();
    for (i, &l) in labels.data().iter().enumerate() {
        if l != 0 && l != keep {
            out.grid.data_mut()[i] = Zone::Glacier.id();
        }
    }

    let outside = labels.map(|l| l != keep);
    let (holes, hole_sizes) = label_components(&outside, Connectivity::Four);
    let (rows, cols) = holes.dims();
    let mut touches_border = vec![false; hole_sizes.len() + 1];
    for r in 0..rows {
        for c in 0..cols {
            if r == 0 || c == 0 || r + 1 == rows || c + 1 == cols {
                touches_border[holes.get(r, c) as usize] = true;
            }
        }
    }
    for (i, &h) in holes.data().iter().enumerate() {
        if h != 0 && !touches_border[h as usize] {
            out.grid.data_mut()[i] = Zone::Ocean.id();
        }
    }
    out
}

/// Ocean pixels with at least one 4-adjacent glacier pixel.
pub fn extract_front(zones: &ZoneMask) -> FrontMask {
    let g = &zones.grid;
    let ocean = Zone::Ocean.id();
    let glacier = Zone::Glacier.id();
    let grid = Raster::from_fn(g.rows(), g.cols(), |r, c| {
        g.get(r, c) == ocean && g.neighbors4(r, c).any(|(nr, nc)| g.get(nr, nc) == glacier)
    });
    FrontMask { grid, resolution: zones.resolution }
}

/// Clears front pixels outside `bbox`.
pub fn mask_bbox(front: &FrontMask, bbox: &BBox) -> FrontMask {
    let g = &front.grid;
    let grid = Raster::from_fn(g.rows(), g.cols(), |r, c| g.get(r, c) && bbox.contains(r, c));
    FrontMask { grid, resolution: front.resolution }
}

/// Removes 8-connected front pieces whose length (pixel count times
/// resolution) is below `min_len_m`.
pub fn filter_short_fronts(front: &FrontMask, min_len_m: f64) -> FrontMask {
    let (labels, sizes) = label_components(&front.grid, Connectivity::Eight);
    let keep: Vec<bool> = sizes.iter().map(|&n| n as f64 * front.resolution >= min_len_m).collect();
    let grid = labels.map(|l| l != 0 && keep[l as usize - 1]);
    FrontMask { grid, resolution: front.resolution }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub zones: ZoneMask,
    pub front: FrontMask,
}

impl PipelineOutput {
    /// Set when no front survives post-processing.
    pub fn no_front(&self) -> bool {
        self.front.is_empty()
    }
}

/// Argmax onwards, starting from an already merged confidence map.
pub fn zones_to_front(conf: &ConfidenceMap, bbox: &BBox, resolution: f64) -> Result<PipelineOutput> {
    if !bbox.fits(conf.rows(), conf.cols()) {
        return Err(Error::Validation(format!("bounding box {bbox:?} exceeds the {}x{} scene", conf.rows(), conf.cols())));
    }
    let zones = argmax_zones(conf, resolution)?;
    let zones = largest_ocean_fill(&zones);
    let front = extract_front(&zones);
    let front = mask_bbox(&front, bbox);
    let front = filter_short_fronts(&front, MIN_FRONT_LENGTH_M);
    Ok(PipelineOutput { zones, front })
}

/// Full chain: merge -> argmax -> ocean fill -> boundary -> bbox -> length filter.
pub fn run_pipeline(
    patches: &[(ConfidenceMap, (usize, usize))],
    canvas: (usize, usize),
    bbox: &BBox,
    resolution: f64,
) -> Result<PipelineOutput> {
    let merged = merge_patches(patches, canvas)?;
    zones_to_front(&merged, bbox, resolution)
}
