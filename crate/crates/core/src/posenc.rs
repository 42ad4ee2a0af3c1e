//! Axial 2D rotary encodings and their coarse-scale variants.
//!
//! An encoding of width `dim` holds `dim/2` complex factors `(cos, sin)`.
//! The first `dim/4` factors rotate by `x·f_j`, the last `dim/4` by
//! `y·f_j`, with `f_j = base^(-2j/(dim/2))`.

use crate::error::{Error, Result};
use crate::grid::FrameGrid;

pub const DEFAULT_BASE: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RopeTable {
    pub dim: usize,
    pub base: f64,
    /// `(x, y)` of each entry.
    pub coords: Vec<(f64, f64)>,
    /// `len × dim` values as `(re, im)` pairs.
    pub factors: Vec<f64>,
}

impl RopeTable {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn factor(&self, i: usize) -> &[f64] {
        &self.factors[i * self.dim..(i + 1) * self.dim]
    }

    /// Rotates one vector of width `dim` by entry `i`.
    pub fn apply(&self, i: usize, v: &[f64]) -> Vec<f64> {
        let f = self.factor(i);
        let mut out = vec![0.0; self.dim];
        for p in 0..self.dim / 2 {
            let (re, im) = (f[2 * p], f[2 * p + 1]);
            out[2 * p] = v[2 * p] * re - v[2 * p + 1] * im;
            out[2 * p + 1] = v[2 * p] * im + v[2 * p + 1] * re;
        }
        out
    }

    /// Norm of each complex factor of entry `i`.
    pub fn pair_norms(&self, i: usize) -> Vec<f64> {
        self.factor(i).chunks(2).map(|p| p[0].hypot(p[1])).collect()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.factors.iter().map(|&v| v as f32).collect()
    }

    /// Entries at the given positions, in order.
    pub fn select(&self, idx: &[usize]) -> RopeTable {
        RopeTable {
            dim: self.dim,
            base: self.base,
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
            factors: idx.iter().flat_map(|&i| self.factor(i).iter().copied()).collect(),
        }
    }
}

pub fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::Config(format!("rotary width must be a positive multiple of 4, got {dim}")));
    }
    Ok(())
}

pub fn frequencies(dim: usize, base: f64) -> Vec<f64> {
    let half = (dim / 2) as f64;
    (0..dim / 4).map(|j| base.powf(-2.0 * j as f64 / half)).collect()
}

/// Rotation angles of one coordinate: `dim/4` x-angles then `dim/4` y-angles.
pub fn angles(x: f64, y: f64, freqs: &[f64]) -> Vec<f64> {
    freqs.iter().map(|f| x * f).chain(freqs.iter().map(|f| y * f)).collect()
}

pub fn rope_angles(coords: &[(f64, f64)], dim: usize, base: f64) -> Result<RopeTable> {
    check_dim(dim)?;
    let freqs = frequencies(dim, base);
    let mut factors = Vec::with_capacity(coords.len() * dim);
    for &(x, y) in coords {
        for a in angles(x, y, &freqs) {
            factors.push(a.cos());
            factors.push(a.sin());
        }
    }
    Ok(RopeTable {
        dim,
        base,
        coords: coords.to_vec(),
        factors,
    })
}

/// Encoding of every fine cell of the expanded grid, row-major.
pub fn grid_table(grid: &FrameGrid, dim: usize, base: f64) -> Result<RopeTable> {
    let coords: Vec<(f64, f64)> = (0..grid.cells()).map(|i| grid.center(1, i)).collect();
    rope_angles(&coords, dim, base)
}

/// Averages the fine encodings of each outside `s×s` window. `fine` must
/// cover the full expanded grid row-major.
pub fn avgpool_encoding(fine: &RopeTable, grid: &FrameGrid, s: usize) -> Result<RopeTable> {
    if fine.len() != grid.cells() {
        return Err(Error::Config(format!(
            "table has {} entries but the grid has {} cells",
            fine.len(),
            grid.cells()
        )));
    }
    let coarse = grid.scale_cells(s)?;
    let dim = fine.dim;
    let norm = 1.0 / (s * s) as f64;
    let mut coords = Vec::with_capacity(coarse.len());
    let mut factors = Vec::with_capacity(coarse.len() * dim);
    for &c in &coarse {
        let mut acc = vec![0.0; dim];
        for child in grid.children(s, 1, c)? {
            for (a, v) in acc.iter_mut().zip(fine.factor(child)) {
                *a += v;
            }
        }
        factors.extend(acc.iter().map(|a| a * norm));
        coords.push(grid.center(s, c));
    }
    Ok(RopeTable {
        dim,
        base: fine.base,
        coords,
        factors,
    })
}

/// Encodes the mean coordinate of each outside `s×s` window.
pub fn center_sampling_encoding(grid: &FrameGrid, s: usize, dim: usize, base: f64) -> Result<RopeTable> {
    let coarse = grid.scale_cells(s)?;
    let coords: Vec<(f64, f64)> = coarse.iter().map(|&c| grid.center(s, c)).collect();
    rope_angles(&coords, dim, base)
}
