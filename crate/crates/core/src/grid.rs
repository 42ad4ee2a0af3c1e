//! Cell layout of the expanded frame at feature resolution.
//!
//! The expanded grid is `k·n` cells on a side, where `n` is the in-image
//! feature side. Cells are indexed row-major. A scale `s` groups `s×s`
//! fine cells into one coarse cell.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameGrid {
    /// Feature cells per side of the input crop.
    pub n_in: usize,
    pub k: usize,
}

impl FrameGrid {
    pub fn new(n_in: usize, k: usize) -> Result<Self> {
        if n_in == 0 || k == 0 {
            return Err(Error::Config(format!("grid needs n_in, k > 0 (got {n_in}, {k})")));
        }
        if ((k - 1) * n_in) % 2 != 0 {
            return Err(Error::Config(format!(
                "inner region of a {n_in}-cell crop with k={k} does not align to cells"
            )));
        }
        Ok(FrameGrid { n_in, k })
    }

    pub fn side(&self) -> usize {
        self.k * self.n_in
    }

    pub fn cells(&self) -> usize {
        self.side() * self.side()
    }

    /// First inner row/column.
    pub fn offset(&self) -> usize {
        (self.k - 1) * self.n_in / 2
    }

    pub fn is_inside(&self, row: usize, col: usize) -> bool {
        let o = self.offset();
        (o..o + self.n_in).contains(&row) && (o..o + self.n_in).contains(&col)
    }

    /// Expanded-grid indices of the inner cells, row-major.
    pub fn in_cells(&self) -> Vec<usize> {
        let o = self.offset();
        let side = self.side();
        (0..self.n_in)
            .flat_map(|r| (0..self.n_in).map(move |c| (r + o) * side + c + o))
            .collect()
    }

    /// Expanded-grid indices of the cells outside the crop, row-major.
    pub fn out_cells(&self) -> Vec<usize> {
        self.scale_cells(1).expect("scale 1 always divides")
    }

    pub fn outside_mask(&self) -> Vec<bool> {
        let side = self.side();
        (0..self.cells()).map(|i| !self.is_inside(i / side, i % side)).collect()
    }

    pub fn check_scale(&self, s: usize) -> Result<()> {
        if s == 0 || self.n_in % s != 0 || self.offset() % s != 0 {
            return Err(Error::Config(format!(
                "scale {s} does not tile a {}-cell crop at offset {}",
                self.n_in,
                self.offset()
            )));
        }
        Ok(())
    }

    /// Coarse-grid indices (coarse side = side/s) of the outside cells at
    /// scale `s`, row-major.
    pub fn scale_cells(&self, s: usize) -> Result<Vec<usize>> {
        self.check_scale(s)?;
        let cs = self.side() / s;
        let o = self.offset() / s;
        let n = self.n_in / s;
        let inside = |r: usize, c: usize| (o..o + n).contains(&r) && (o..o + n).contains(&c);
        Ok((0..cs * cs).filter(|&i| !inside(i / cs, i % cs)).collect())
    }

    /// Children of coarse cell `idx` at scale `s` on the grid of scale
    /// `t`, row-major within the block.
    pub fn children(&self, s: usize, t: usize, idx: usize) -> Result<Vec<usize>> {
        if t == 0 || s % t != 0 {
            return Err(Error::Config(format!("scale {t} does not divide {s}")));
        }
        let f = s / t;
        let cs = self.side() / s;
        let ts = self.side() / t;
        let (r, c) = (idx / cs, idx % cs);
        Ok((0..f)
            .flat_map(|dr| (0..f).map(move |dc| (r * f + dr) * ts + c * f + dc))
            .collect())
    }

    /// Center of coarse cell `idx` at scale `s`, in fine-cell units
    /// `(x, y)`; fine cell `(r, c)` sits at `(c, r)`.
    pub fn center(&self, s: usize, idx: usize) -> (f64, f64) {
        let cs = self.side() / s;
        let half = (s as f64 - 1.0) / 2.0;
        let (r, c) = (idx / cs, idx % cs);
        ((c * s) as f64 + half, (r * s) as f64 + half)
    }
}
