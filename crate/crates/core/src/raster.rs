//! Grid types shared by the segmentation, post-processing and I/O layers.

use crate::error::{Error, Result};

/// Row-major 2-D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Raster { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Validation(format!(
                "raster {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Raster { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Raster { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Raster<U> {
        Raster { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Copy of the window `[r0, r0+h) x [c0, c0+w)`.
    pub fn window(&self, r0: usize, c0: usize, h: usize, w: usize) -> Raster<T> {
        Raster::from_fn(h, w, |r, c| self.get(r0 + r, c0 + c))
    }

    /// 4-neighbours inside the grid.
    pub fn neighbors4(&self, r: usize, c: usize) -> impl Iterator<Item = (usize, usize)> {
        neighbors(self.rows, self.cols, r, c, &N4)
    }

    /// 8-neighbours inside the grid.
    pub fn neighbors8(&self, r: usize, c: usize) -> impl Iterator<Item = (usize, usize)> {
        neighbors(self.rows, self.cols, r, c, &N8)
    }
}

const N4: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
const N8: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

fn neighbors(
    rows: usize,
    cols: usize,
    r: usize,
    c: usize,
    offsets: &'static [(isize, isize)],
) -> impl Iterator<Item = (usize, usize)> {
    offsets.iter().filter_map(move |&(dr, dc)| {
        let nr = r as isize + dr;
        let nc = c as isize + dc;
        (nr >= 0 && nc >= 0 && (nr as usize) < rows && (nc as usize) < cols).then_some((nr as usize, nc as usize))
    })
}

/// Landscape zone classes in channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Zone {
    NoInfo = 0,
    Rock = 1,
    Glacier = 2,
    Ocean = 3,
}

impl Zone {
    pub const ALL: [Zone; 4] = [Zone::NoInfo, Zone::Rock, Zone::Glacier, Zone::Ocean];
    pub const COUNT: usize = 4;

    pub fn from_id(id: u8) -> Option<Zone> {
        Zone::ALL.get(id as usize).copied()
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    /// Grayscale value used in zone label images.
    pub fn gray(self) -> u8 {
        match self {
            Zone::NoInfo => 0,
            Zone::Rock => 64,
            Zone::Glacier => 127,
            Zone::Ocean => 254,
        }
    }

    pub fn from_gray(v: u8) -> Option<Zone> {
        Zone::ALL.into_iter().find(|z| z.gray() == v)
    }
}

/// Per-pixel zone ids with ground sampling distance.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoneMask {
    pub grid: Raster<u8>,
    /// Meters per pixel.
    pub resolution: f64,
}

impl ZoneMask {
    pub fn new(grid: Raster<u8>, resolution: f64) -> Result<Self> {
        if let Some(bad) = grid.data().iter().find(|&&v| v as usize >= Zone::COUNT) {
            return Err(Error::Validation(format!("zone id {bad} outside 0..=3")));
        }
        if !(resolution > 0.0) {
            return Err(Error::Validation(format!("resolution must be positive, got {resolution}")));
        }
        Ok(ZoneMask { grid, resolution })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dims()
    }

    pub fn zone(&self, r: usize, c: usize) -> Zone {
        Zone::from_id(self.grid.get(r, c)).expect("validated zone id")
    }

    pub fn count(&self, zone: Zone) -> usize {
        self.grid.data().iter().filter(|&&v| v == zone.id()).count()
    }
}

/// Boolean calving-front pixels with ground sampling distance.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontMask {
    pub grid: Raster<bool>,
    pub resolution: f64,
}

impl FrontMask {
    pub fn empty(rows: usize, cols: usize, resolution: f64) -> Self {
        FrontMask { grid: Raster::filled(rows, cols, false), resolution }
    }

    pub fn count(&self) -> usize {
        self.grid.data().iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Front pixel coordinates in row-major order.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        let cols = self.grid.cols();
        self.grid
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(|(i, _)| (i / cols, i % cols))
            .collect()
    }
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub min_row: usize,
    pub max_row: usize,
    pub min_col: usize,
    pub max_col: usize,
}

impl BBox {
    pub fn new(min_row: usize, max_row: usize, min_col: usize, max_col: usize) -> Result<Self> {
        if min_row > max_row || min_col > max_col {
            return Err(Error::Validation(format!(
                "bbox rows {min_row}..={max_row}, cols {min_col}..={max_col} is inverted"
            )));
        }
        Ok(BBox { min_row, max_row, min_col, max_col })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        BBox { min_row: 0, max_row: rows.saturating_sub(1), min_col: 0, max_col: cols.saturating_sub(1) }
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.min_row..=self.max_row).contains(&r) && (self.min_col..=self.max_col).contains(&c)
    }

    pub fn fits(&self, rows: usize, cols: usize) -> bool {
        self.max_row < rows && self.max_col < cols
    }
}

/// Per-pixel class probabilities, stored class-major (`[class][row][col]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ConfidenceMap {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != Zone::COUNT * rows * cols {
            return Err(Error::Validation(format!(
                "confidence map {rows}x{cols} needs {} values, got {}",
                Zone::COUNT * rows * cols,
                data.len()
            )));
        }
        Ok(ConfidenceMap { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        ConfidenceMap { rows, cols, data: vec![0.0; Zone::COUNT * rows * cols] }
    }

    /// Same distribution at every pixel.
    pub fn constant(rows: usize, cols: usize, probs: [f64; 4]) -> Self {
        let mut m = Self::zeros(rows, cols);
        for (k, p) in probs.iter().enumerate() {
            m.data[k * rows * cols..(k + 1) * rows * cols].fill(*p);
        }
        m
    }

    /// One-hot confidences of a zone mask.
    pub fn one_hot(zones: &ZoneMask) -> Self {
        let (rows, cols) = zones.dims();
        let mut m = Self::zeros(rows, cols);
        for (i, &z) in zones.grid.data().iter().enumerate() {
            m.data[z as usize * rows * cols + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, class: usize, r: usize, c: usize) -> f64 {
        self.data[(class * self.rows + r) * self.cols + c]
    }

    pub fn set(&mut self, class: usize, r: usize, c: usize, v: f64) {
        self.data[(class * self.rows + r) * self.cols + c] = v;
    }

    pub fn pixel(&self, r: usize, c: usize) -> [f64; 4] {
        std::array::from_fn(|k| self.get(k, r, c))
    }

    /// Copy of the window `[r0, r0+h) x [c0, c0+w)`.
    pub fn window(&self, r0: usize, c0: usize, h: usize, w: usize) -> ConfidenceMap {
        let mut out = Self::zeros(h, w);
        for k in 0..Zone::COUNT {
            for r in 0..h {
                for c in 0..w {
                    out.set(k, r, c, self.get(k, r0 + r, c0 + c));
                }
            }
        }
        out
    }

    /// Rescales every pixel to sum to one.
    pub fn renormalize(&mut self) {
        let plane = self.rows * self.cols;
        for i in 0..plane {
            let s: f64 = (0..Zone::COUNT).map(|k| self.data[k * plane + i]).sum();
            if s > 0.0 {
                for k in 0..Zone::COUNT {
                    self.data[k * plane + i] /= s;
                }
            }
        }
    }

    /// Largest deviation of a per-pixel sum from one.
    pub fn max_sum_error(&self) -> f64 {
        let plane = self.rows * self.cols;
        (0..plane)
            .map(|i| ((0..Zone::COUNT).map(|k| self.data[k * plane + i]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zone_gray_codes_roundtrip() {
        for z in Zone::ALL {
            assert_eq!(Zone::from_gray(z.gray()), Some(z));
        }
        assert_eq!(Zone::from_gray(100), None);
    }

    #[test]
    fn zone_mask_rejects_bad_ids_and_resolution() {
        assert!(ZoneMask::new(Raster::filled(2, 2, 4u8), 10.0).is_err());
        assert!(ZoneMask::new(Raster::filled(2, 2, 3u8), 0.0).is_err());
    }

    #[test]
    fn neighbors_respect_borders() {
        let r = Raster::filled(3, 3, 0u8);
        assert_eq!(r.neighbors4(0, 0).count(), 2);
        assert_eq!(r.neighbors8(0, 0).count(), 3);
        assert_eq!(r.neighbors8(1, 1).count(), 8);
    }
}
