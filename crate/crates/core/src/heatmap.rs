//! Per-class scalar fields over the expanded frame.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, ExpandedFrame};

pub const MAGIC: &[u8; 4] = b"EXAH";

/// Values in `[0, 1]`, laid out `[class][row][col]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub classes: usize,
    pub rows: usize,
    pub cols: usize,
    /// Pixels per cell.
    pub cell: f64,
    pub data: Vec<f32>,
}

impl Heatmap {
    pub fn zeros(classes: usize, rows: usize, cols: usize, cell: f64) -> Self {
        Heatmap {
            classes,
            rows,
            cols,
            cell,
            data: vec![0.0; classes * rows * cols],
        }
    }

    pub fn plane(&self, class: usize) -> &[f32] {
        let n = self.rows * self.cols;
        &self.data[class * n..(class + 1) * n]
    }

    pub fn plane_mut(&mut self, class: usize) -> &mut [f32] {
        let n = self.rows * self.cols;
        &mut self.data[class * n..(class + 1) * n]
    }

    pub fn same_grid(&self, other: &Heatmap) -> bool {
        (self.classes, self.rows, self.cols) == (other.classes, other.rows, other.cols)
    }

    /// Bilinear resampling by an integer factor with half-pixel centers.
    pub fn upsample(&self, factor: usize) -> Heatmap {
        if factor == 1 {
            return self.clone();
        }
        let (rows, cols) = (self.rows * factor, self.cols * factor);
        let mut out = Heatmap::zeros(self.classes, rows, cols, self.cell / factor as f64);
        let f = factor as f64;
        let coord = |i: usize, n: usize| {
            let src = ((i as f64 + 0.5) / f - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            (lo, hi, src - lo as f64)
        };
        let ys: Vec<_> = (0..rows).map(|r| coord(r, self.rows)).collect();
        let xs: Vec<_> = (0..cols).map(|c| coord(c, self.cols)).collect();
        for k in 0..self.classes {
            let src = self.plane(k);
            let dst = out.plane_mut(k);
            for (r, &(y0, y1, ty)) in ys.iter().enumerate() {
                for (c, &(x0, x1, tx)) in xs.iter().enumerate() {
                    let at = |y: usize, x: usize| src[y * self.cols + x] as f64;
                    let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                    let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                    dst[r * cols + c] = (top * (1.0 - ty) + bot * ty) as f32;
                }
            }
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        for d in [self.classes, self.rows, self.cols] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes an `EXAH` payload; the cell size is not stored and is set
    /// to `cell`.
    pub fn decode(bytes: &[u8], cell: f64) -> std::result::Result<Heatmap, String> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err("missing EXAH header".into());
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (classes, rows, cols) = (dim(0), dim(1), dim(2));
        let n = classes * rows * cols;
        if bytes.len() != 16 + 4 * n {
            return Err(format!("payload holds {} bytes, expected {}", bytes.len() - 16, 4 * n));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Heatmap {
            classes,
            rows,
            cols,
            cell,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, cell: f64) -> Result<Heatmap> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Heatmap::decode(&bytes, cell).map_err(|r| Error::format(path, r))
    }

    /// Binary 8-bit PGM of one class plane.
    pub fn to_pgm(&self, class: usize) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(self.plane(class).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }
}

/// CenterNet radius for which a box shifted by it keeps IoU `min_overlap`
/// with the original. Kept verbatim, including its unusual quadratic
/// normalization, so maps agree with the reference implementation.
pub fn gaussian_radius(w: f64, h: f64, min_overlap: f64) -> f64 {
    let o = min_overlap;
    let b1 = h + w;
    let c1 = w * h * (1.0 - o) / (1.0 + o);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - o) * w * h;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;
    let a3 = 4.0 * o;
    let b3 = -2.0 * o * (h + w);
    let c3 = (o - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

pub const MIN_OVERLAP: f64 = 0.7;

/// Kernel width of a box measured in cells.
pub fn sigma_for(w_cells: f64, h_cells: f64) -> f64 {
    gaussian_radius(w_cells, h_cells, MIN_OVERLAP) / 3.0
}

/// Cell holding a point, clamped to the grid.
pub fn center_cell(x: f64, y: f64, cell: f64, rows: usize, cols: usize) -> (usize, usize) {
    let r = ((y / cell).floor().max(0.0) as usize).min(rows - 1);
    let c = ((x / cell).floor().max(0.0) as usize).min(cols - 1);
    (r, c)
}

/// Ground-truth map: per class, the maximum over boxes of a unit-peak
/// Gaussian at the box's center cell, zero beyond three standard deviations.
pub fn render_gt(boxes: &[BoundingBox], frame: &ExpandedFrame, cell: f64, classes: usize) -> Result<Heatmap> {
    let rows = frame.height() / cell;
    let cols = frame.width() / cell;
    if !(cell > 0.0) || rows.fract() != 0.0 || cols.fract() != 0.0 {
        return Err(Error::Config(format!(
            "cell size {cell} does not divide the {}x{} frame",
            frame.width(),
            frame.height()
        )));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let mut map = Heatmap::zeros(classes, rows, cols, cell);
    for b in boxes {
        let k = b.class.index();
        if k >= classes {
            continue;
        }
        let (r0, c0) = center_cell(b.cx, b.cy, cell, rows, cols);
        let sigma = sigma_for(b.w / cell, b.h / cell);
        let reach = (3.0 * sigma).floor() as isize;
        let plane = map.plane_mut(k);
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let (r, c) = (r0 as isize + dr, c0 as isize + dc);
                if r < 0 || c < 0 || r >= rows as isize || c >= cols as isize {
                    continue;
                }
                let v = gaussian_value(dr as f64, dc as f64, sigma);
                let slot = &mut plane[r as usize * cols + c as usize];
                *slot = slot.max(v as f32);
            }
        }
    }
    Ok(map)
}

/// Kernel value at offset `(dr, dc)` cells from the peak.
pub fn gaussian_value(dr: f64, dc: f64, sigma: f64) -> f64 {
    let d2 = dr * dr + dc * dc;
    if d2 == 0.0 {
        return 1.0;
    }
    if sigma <= 0.0 || d2 > 9.0 * sigma * sigma {
        return 0.0;
    }
    (-d2 / (2.0 * sigma * sigma)).exp()
}

pub fn binarize(values: &[f32], threshold: f32) -> Vec<bool> {
    values.iter().map(|&v| v >= threshold).collect()
}

pub fn average_over_dataset(maps: &[Heatmap]) -> Result<Heatmap> {
    let first = maps.first().ok_or_else(|| Error::Input("no heatmaps to average".into()))?;
    let mut acc = vec![0.0f64; first.data.len()];
    for m in maps {
        if !m.same_grid(first) {
            return Err(Error::Input(format!(
                "heatmap grid {}x{}x{} differs from {}x{}x{}",
                m.classes, m.rows, m.cols, first.classes, first.rows, first.cols
            )));
        }
        for (a, v) in acc.iter_mut().zip(&m.data) {
            *a += *v as f64;
        }
    }
    let n = maps.len() as f64;
    Ok(Heatmap {
        data: acc.iter().map(|a| (a / n) as f32).collect(),
        ..first.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ClassId;

    fn frame() -> ExpandedFrame {
        ExpandedFrame::new(16.0, 16.0, 3).unwrap()
    }

    #[test]
    fn radius_matches_reference_values() {
        // frozen from an independent transcription of the reference formula
        assert!((gaussian_radius(10.0, 10.0, 0.7) - 2.733_200_530_681_511).abs() < 1e-12);
        assert!((gaussian_radius(40.0, 20.0, 0.7) - 7.355_850_717_012_267).abs() < 1e-12);
    }

    #[test]
    fn empty_and_single_peak() {
        let m = render_gt(&[], &frame(), 1.0, 2).unwrap();
        assert!(m.data.iter().all(|&v| v == 0.0));
        let b = BoundingBox::new(20.5, 30.5, 12.0, 12.0, ClassId::Face).unwrap();
        let m = render_gt(&[b], &frame(), 1.0, 2).unwrap();
        assert_eq!(m.plane(0)[30 * 48 + 20], 1.0);
        assert!(m.plane(1).iter().all(|&v| v == 0.0));
        assert!(m.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn indivisible_cell_is_rejected() {
        assert!(render_gt(&[], &frame(), 5.0, 1).is_err());
    }

    #[test]
    fn half_level_set_radius() {
        let b = BoundingBox::new(24.5, 24.5, 30.0, 30.0, ClassId::Face).unwrap();
        let m = render_gt(&[b], &frame(), 1.0, 1).unwrap();
        let sigma = sigma_for(30.0, 30.0);
        let r = sigma * (2.0 * 2f64.ln()).sqrt();
        let mask = binarize(m.plane(0), 0.5);
        for (i, &on) in mask.iter().enumerate() {
            let d = (((i / 48) as f64 - 24.0).powi(2) + ((i % 48) as f64 - 24.0).powi(2)).sqrt();
            if (d - r).abs() > 1e-6 {
                assert_eq!(on, d < r, "cell {i} at distance {d} vs radius {r}");
            }
        }
    }

    #[test]
    fn binarize_uses_greater_or_equal() {
        assert_eq!(binarize(&[0.0, 0.5, 0.7], 0.0), vec![true, true, true]);
        assert_eq!(binarize(&[0.0, 0.5, 0.7], 0.5), vec![false, true, true]);
    }

    #[test]
    fn averaging() {
        let mut a = Heatmap::zeros(1, 2, 2, 1.0);
        a.data = vec![0.0, 0.25, 1.0, 0.5];
        let c = Heatmap {
            data: a.data.iter().map(|v| 1.0 - v).collect(),
            ..a.clone()
        };
        let avg = average_over_dataset(&[a.clone(), c]).unwrap();
        assert!(avg.data.iter().all(|&v| v == 0.5));
        assert_eq!(average_over_dataset(&[a.clone()]).unwrap(), a);
        assert!(average_over_dataset(&[]).is_err());
        assert!(average_over_dataset(&[a, Heatmap::zeros(1, 3, 2, 1.0)]).is_err());
    }

    #[test]
    fn file_round_trip_and_pgm() {
        let mut m = Heatmap::zeros(2, 2, 3, 8.0);
        m.data[4] = 1.0;
        let back = Heatmap::decode(&m.encode(), 8.0).unwrap();
        assert_eq!(back, m);
        let pgm = m.to_pgm(0);
        assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(pgm[pgm.len() - 2], 255);
    }

    #[test]
    fn upsample_preserves_constants_and_peak_location() {
        let mut m = Heatmap::zeros(1, 3, 3, 8.0);
        m.data.iter_mut().for_each(|v| *v = 0.5);
        assert!(m.upsample(4).data.iter().all(|&v| v == 0.5));
        let mut p = Heatmap::zeros(1, 3, 3, 8.0);
        p.data[4] = 1.0;
        let u = p.upsample(4);
        assert_eq!(u.rows, 12);
        let at = |r: usize, c: usize| u.data[r * 12 + c];
        assert!(at(5, 5) > 0.5 && at(0, 0) == 0.0);
    }
}
