//! Head outputs to heatmaps and boxes.

use super::config::{ModelConfig, CLASSES, HEAD_FIELDS};
use super::network::Geometry;
use crate::geometry::{BoundingBox, ClassId};
use crate::heatmap::Heatmap;

/// Upper bound on boxes emitted per image.
pub const MAX_DETECTIONS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Per-class probabilities on the expanded grid, one cell per stride.
    pub heatmap: Heatmap,
    /// Boxes in expanded-frame input pixels, by descending score.
    pub boxes: Vec<BoundingBox>,
    /// Outside cells reached by the finest decoder stage, in token order.
    pub active: Vec<bool>,
}

fn sigmoid(x: f32) -> f64 {
    1.0 / (1.0 + (-(x as f64)).exp())
}

/// Scatters both heads into one expanded-grid heatmap.
pub fn assemble_heatmap(cfg: &ModelConfig, geo: &Geometry, in_head: &[f32], out_head: &[f32]) -> Heatmap {
    let side = geo.grid.side();
    let width = CLASSES * HEAD_FIELDS;
    let mut map = Heatmap::zeros(CLASSES, side, side, cfg.stride as f64);
    for (cells, head) in [(&geo.in_cells, in_head), (&geo.out_cells, out_head)] {
        for (row, &cell) in cells.iter().enumerate() {
            for k in 0..CLASSES {
                map.plane_mut(k)[cell] = sigmoid(head[row * width + k * HEAD_FIELDS]) as f32;
            }
        }
    }
    map
}

/// Cells that equal the maximum of their 3×3 neighbourhood.
pub fn peaks(plane: &[f32], rows: usize, cols: usize, min_score: f32) -> Vec<usize> {
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let v = plane[r * cols + c];
            if v < min_score {
                continue;
            }
            let mut is_max = true;
            for rr in r.saturating_sub(1)..(r + 2).min(rows) {
                for cc in c.saturating_sub(1)..(c + 2).min(cols) {
                    if plane[rr * cols + cc] > v {
                        is_max = false;
                    }
                }
            }
            if is_max {
                out.push(r * cols + c);
            }
        }
    }
    out
}

/// Decodes peaks into boxes. Outside peaks are kept only at cells the
/// finest decoder stage reached.
pub fn decode_boxes(cfg: &ModelConfig, geo: &Geometry, in_head: &[f32], out_head: &[f32], active: &[bool]) -> Prediction {
    let heatmap = assemble_heatmap(cfg, geo, in_head, out_head);
    let side = geo.grid.side();
    let width = CLASSES * HEAD_FIELDS;
    let mut source = vec![None; side * side];
    for (row, &cell) in geo.in_cells.iter().enumerate() {
        source[cell] = Some((in_head, row));
    }
    for (row, &cell) in geo.out_cells.iter().enumerate() {
        if active.get(row).copied().unwrap_or(false) {
            source[cell] = Some((out_head, row));
        }
    }
    let stride = cfg.stride as f64;
    let mut boxes = Vec::new();
    for (k, class) in ClassId::ALL.into_iter().enumerate() {
        let plane = heatmap.plane(k);
        for cell in peaks(plane, side, side, cfg.min_score as f32) {
            let Some((head, row)) = source[cell] else { continue };
            let f = &head[row * width + k * HEAD_FIELDS..][..HEAD_FIELDS];
            let (r, c) = ((cell / side) as f64, (cell % side) as f64);
            boxes.push(BoundingBox {
                cx: (c + sigmoid(f[1])) * stride,
                cy: (r + sigmoid(f[2])) * stride,
                w: (f[3] as f64).exp(),
                h: (f[4] as f64).exp(),
                class,
                score: plane[cell] as f64,
            });
        }
    }
    boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
    boxes.truncate(MAX_DETECTIONS);
    Prediction {
        heatmap,
        boxes,
        active: active.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_cells_are_all_peaks() {
        let plane = [0.5, 0.5, 0.1, 0.1, 0.1, 0.9, 0.0, 0.0, 0.0];
        assert_eq!(peaks(&plane, 3, 3, 0.05), vec![0, 5]);
        let flat = [0.3f32; 4];
        assert_eq!(peaks(&flat, 2, 2, 0.05), vec![0, 1, 2, 3]);
        assert!(peaks(&flat, 2, 2, 0.5).is_empty());
    }
}
