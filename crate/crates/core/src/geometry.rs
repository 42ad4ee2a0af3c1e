//! Boxes, the expanded frame around a crop, and the matching primitives used
//! by evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassId {
    Face = 0,
    Body = 1,
}

impl ClassId {
    pub const ALL: [ClassId; 2] = [ClassId::Face, ClassId::Body];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Axis-aligned box stored by center and size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class: ClassId,
    /// Confidence for predictions; 1 for ground truth.
    pub score: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, class: ClassId) -> Result<Self> {
        let b = BoundingBox {
            cx,
            cy,
            w,
            h,
            class,
            score: 1.0,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64, class: ClassId) -> Result<Self> {
        Self::new(0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0, class)
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(Error::Input(format!("box size must be positive, got {}x{}", self.w, self.h)));
        }
        if ![self.x0(), self.y0(), self.x1(), self.y1()].iter().all(|v| v.is_finite()) {
            return Err(Error::Input("box corners must be finite".into()));
        }
        Ok(())
    }

    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn x1(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn y1(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Area shared with the axis-aligned rectangle `[x0, x1] x [y0, y1]`.
    pub fn overlap_area(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
        let ow = (self.x1().min(x1) - self.x0().max(x0)).max(0.0);
        let oh = (self.y1().min(y1) - self.y0().max(y0)).max(0.0);
        ow * oh
    }
}

/// The K-times enlarged region centered on an input crop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpandedFrame {
    pub inner_w: f64,
    pub inner_h: f64,
    pub k: u32,
}

impl ExpandedFrame {
    pub fn new(inner_w: f64, inner_h: f64, k: u32) -> Result<Self> {
        if k == 0 || !(inner_w > 0.0 && inner_h > 0.0) {
            return Err(Error::Config(format!("invalid frame {inner_w}x{inner_h} with k={k}")));
        }
        Ok(ExpandedFrame { inner_w, inner_h, k })
    }

    pub fn width(&self) -> f64 {
        self.k as f64 * self.inner_w
    }

    pub fn height(&self) -> f64 {
        self.k as f64 * self.inner_h
    }

    /// Inner region as `(x0, y0, x1, y1)`.
    pub fn inner(&self) -> (f64, f64, f64, f64) {
        let k = self.k as f64;
        (
            0.5 * (k - 1.0) * self.inner_w,
            0.5 * (k - 1.0) * self.inner_h,
            0.5 * (k + 1.0) * self.inner_w,
            0.5 * (k + 1.0) * self.inner_h,
        )
    }

    /// Whether a point lies in the half-open inner region.
    pub fn point_inside(&self, x: f64, y: f64) -> bool {
        let (x0, y0, x1, y1) = self.inner();
        x >= x0 && x < x1 && y >= y0 && y < y1
    }

    pub fn diagonal(&self) -> f64 {
        self.inner_w.hypot(self.inner_h)
    }

    pub fn scaled(&self, f: f64) -> Self {
        ExpandedFrame {
            inner_w: self.inner_w * f,
            inner_h: self.inner_h * f,
            k: self.k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaceCategory {
    Inside,
    Truncated,
    OutsideWithEvidence,
    OutsideWithoutEvidence,
}

impl FaceCategory {
    pub const ALL: [FaceCategory; 4] = [
        FaceCategory::Inside,
        FaceCategory::Truncated,
        FaceCategory::OutsideWithEvidence,
        FaceCategory::OutsideWithoutEvidence,
    ];

    pub fn is_outside(self) -> bool {
        matches!(self, FaceCategory::OutsideWithEvidence | FaceCategory::OutsideWithoutEvidence)
    }

    pub fn label(self) -> &'static str {
        match self {
            FaceCategory::Inside => "inside",
            FaceCategory::Truncated => "truncated",
            FaceCategory::OutsideWithEvidence => "outside_with_evidence",
            FaceCategory::OutsideWithoutEvidence => "outside_without_evidence",
        }
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.overlap_area(b.x0(), b.y0(), b.x1(), b.y1());
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy non-maximum suppression. Boxes are visited by descending score
/// (input order breaks ties); a box survives when its IoU with every
/// earlier survivor is at most `iou_threshold`.
pub fn nms(boxes: &[BoundingBox], iou_threshold: f64, max_keep: usize) -> Vec<BoundingBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score));
    let mut kept: Vec<BoundingBox> = Vec::new();
    for i in order {
        if kept.len() == max_keep {
            break;
        }
        let cand = &boxes[i];
        if kept.iter().all(|k| iou(k, cand) <= iou_threshold) {
            kept.push(*cand);
        }
    }
    kept
}

/// Minimum-cost assignment on an `n x m` cost matrix given row-major.
///
/// Returns `min(n, m)` pairs sorted by row. Among optimal assignments the
/// one whose pair sequence is lexicographically smallest is returned.
pub fn hungarian(cost: &[f64], n: usize, m: usize) -> Result<Vec<(usize, usize)>> {
    if cost.len() != n * m {
        return Err(Error::Input(format!("cost matrix has {} entries, expected {n}x{m}", cost.len())));
    }
    if let Some(bad) = cost.iter().find(|c| !c.is_finite()) {
        return Err(Error::Input(format!("non-finite cost {bad}")));
    }
    if n == 0 || m == 0 {
        return Ok(Vec::new());
    }
    let size = n.max(m);
    let span = cost.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    let sentinel = 1.0 + 2.0 * span;
    let mut square = vec![sentinel; size * size];
    for r in 0..n {
        square[r * size..r * size + m].copy_from_slice(&cost[r * m..(r + 1) * m]);
    }
    let assignment = lexicographic_assignment(&square, size, span);
    Ok(assignment
        .into_iter()
        .enumerate()
        .filter(|&(r, c)| r < n && c < m)
        .collect())
}

/// Fixes rows in order, each to the smallest column that still admits an
/// optimal completion.
fn lexicographic_assignment(cost: &[f64], size: usize, span: f64) -> Vec<usize> {
    let (best, mut current) = solve_square(cost, size, &[], &[]);
    let tol = 1e-9 * (1.0 + span) * size as f64;
    let mut fixed_rows: Vec<usize> = Vec::new();
    let mut fixed_cols: Vec<usize> = Vec::new();
    let mut fixed_cost = 0.0;
    for row in 0..size {
        let target = current[row];
        for col in 0..target {
            if fixed_cols.contains(&col) {
                continue;
            }
            let mut rows = fixed_rows.clone();
            rows.push(row);
            let mut cols = fixed_cols.clone();
            cols.push(col);
            let (rest, assign) = solve_square(cost, size, &rows, &cols);
            let total = fixed_cost + cost[row * size + col] + rest;
            if total <= best + tol {
                current = merge(&assign, &rows, &cols, size);
                break;
            }
        }
        let col = current[row];
        fixed_rows.push(row);
        fixed_cols.push(col);
        fixed_cost += cost[row * size + col];
    }
    current
}

fn merge(partial: &[usize], rows: &[usize], cols: &[usize], size: usize) -> Vec<usize> {
    let mut full = partial.to_vec();
    full.resize(size, usize::MAX);
    for (r, c) in rows.iter().zip(cols) {
        full[*r] = *c;
    }
    full
}

/// Kuhn-Munkres with potentials over the rows and columns not excluded.
/// Returns the cost of the free part and a full-length assignment where
/// excluded rows map to `usize::MAX`.
fn solve_square(cost: &[f64], size: usize, skip_rows: &[usize], skip_cols: &[usize]) -> (f64, Vec<usize>) {
    let rows: Vec<usize> = (0..size).filter(|r| !skip_rows.contains(r)).collect();
    let cols: Vec<usize> = (0..size).filter(|c| !skip_cols.contains(c)).collect();
    let n = rows.len();
    let mut out = vec![usize::MAX; size];
    if n == 0 {
        return (0.0, out);
    }
    let a = |i: usize, j: usize| cost[rows[i - 1] * size + cols[j - 1]];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=n {
        let (r, c) = (rows[p[j] - 1], cols[j - 1]);
        out[r] = c;
        total += cost[r * size + c];
    }
    (total, out)
}

/// Maps a source-image box center into the expanded frame of a crop
/// centered at `crop_center`. Sizes are unchanged.
pub fn crop_update_center(b: &BoundingBox, crop_center: (f64, f64), frame: &ExpandedFrame) -> BoundingBox {
    let (ox, oy) = crop_offset(crop_center, frame);
    BoundingBox {
        cx: b.cx + ox,
        cy: b.cy + oy,
        ..*b
    }
}

/// Inverse of [`crop_update_center`].
pub fn crop_restore_center(b: &BoundingBox, crop_center: (f64, f64), frame: &ExpandedFrame) -> BoundingBox {
    let (ox, oy) = crop_offset(crop_center, frame);
    BoundingBox {
        cx: b.cx - ox,
        cy: b.cy - oy,
        ..*b
    }
}

fn crop_offset(crop_center: (f64, f64), frame: &ExpandedFrame) -> (f64, f64) {
    (
        0.5 * frame.width() - crop_center.0,
        0.5 * frame.height() - crop_center.1,
    )
}

/// True when all four corners lie in the closed expanded frame.
pub fn containment_filter(b: &BoundingBox, frame: &ExpandedFrame) -> bool {
    b.x0() >= 0.0 && b.y0() >= 0.0 && b.x1() <= frame.width() && b.y1() <= frame.height()
}

pub fn categorize(face: &BoundingBox, frame: &ExpandedFrame, body: Option<&BoundingBox>) -> FaceCategory {
    let (x0, y0, x1, y1) = frame.inner();
    if face.x0() >= x0 && face.x1() <= x1 && face.y0() >= y0 && face.y1() <= y1 {
        return FaceCategory::Inside;
    }
    if face.overlap_area(x0, y0, x1, y1) > 0.0 {
        return FaceCategory::Truncated;
    }
    match body {
        Some(b) if b.overlap_area(x0, y0, x1, y1) > 0.0 => FaceCategory::OutsideWithEvidence,
        _ => FaceCategory::OutsideWithoutEvidence,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn face(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(cx, cy, w, h, ClassId::Face).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = face(10.0, 10.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &face(100.0, 10.0, 10.0, 10.0)), 0.0);
        let third = iou(&a, &face(15.0, 10.0, 10.0, 10.0));
        assert!((third - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_matches_rasterization() {
        let a = face(10.0, 10.0, 10.0, 10.0);
        let b = face(15.0, 10.0, 10.0, 10.0);
        let step = 0.01;
        let (mut inter, mut union) = (0u64, 0u64);
        for i in 0..2500 {
            for j in 0..2000 {
                let x = i as f64 * step + step / 2.0;
                let y = j as f64 * step + step / 2.0;
                let ina = x >= a.x0() && x < a.x1() && y >= a.y0() && y < a.y1();
                let inb = x >= b.x0() && x < b.x1() && y >= b.y0() && y < b.y1();
                inter += (ina && inb) as u64;
                union += (ina || inb) as u64;
            }
        }
        assert!((inter as f64 / union as f64 - iou(&a, &b)).abs() < 1e-3);
    }

    #[test]
    fn nms_examples() {
        let a = face(0.0, 0.0, 4.0, 4.0).with_score(0.9);
        assert_eq!(nms(&[a], 0.7, 10), vec![a]);
        let b = a.with_score(0.8);
        assert_eq!(nms(&[b, a], 0.7, 10), vec![a]);
        assert!(nms(&[a, face(50.0, 0.0, 4.0, 4.0)], 0.7, 1).len() == 1);
    }

    #[test]
    fn hungarian_examples() {
        assert_eq!(hungarian(&[4.0, 1.0, 2.0, 8.0], 2, 2).unwrap(), vec![(0, 1), (1, 0)]);
        let diag = [0.0, 5.0, 5.0, 5.0, 0.0, 5.0, 5.0, 5.0, 0.0];
        assert_eq!(hungarian(&diag, 3, 3).unwrap(), vec![(0, 0), (1, 1), (2, 2)]);
        assert!(hungarian(&[f64::NAN, 1.0], 1, 2).is_err());
    }

    #[test]
    fn hungarian_ties_go_to_lexicographically_smallest() {
        assert_eq!(hungarian(&[1.0; 9], 3, 3).unwrap(), vec![(0, 0), (1, 1), (2, 2)]);
        // rectangular: both columns equally good for the single row
        assert_eq!(hungarian(&[2.0, 2.0], 1, 2).unwrap(), vec![(0, 0)]);
        assert_eq!(hungarian(&[3.0, 3.0], 2, 1).unwrap(), vec![(0, 0)]);
    }

    #[test]
    fn hungarian_rectangular_uses_cheapest_rows() {
        let cost = [9.0, 1.0, 5.0];
        assert_eq!(hungarian(&cost, 3, 1).unwrap(), vec![(1, 0)]);
        assert_eq!(hungarian(&cost, 1, 3).unwrap(), vec![(0, 1)]);
        assert!(hungarian(&[], 0, 4).unwrap().is_empty());
    }

    #[test]
    fn crop_update_example_and_fixed_point() {
        let frame = ExpandedFrame::new(100.0, 80.0, 3).unwrap();
        let b = face(250.0, 170.0, 10.0, 10.0);
        let u = crop_update_center(&b, (200.0, 150.0), &frame);
        assert_eq!((u.cx, u.cy), (200.0, 140.0));
        assert_eq!((u.w, u.h), (10.0, 10.0));
        let c = crop_update_center(&face(200.0, 150.0, 1.0, 1.0), (200.0, 150.0), &frame);
        assert_eq!((c.cx, c.cy), (150.0, 120.0));
        let back = crop_restore_center(&u, (200.0, 150.0), &frame);
        assert_eq!((back.cx, back.cy), (250.0, 170.0));
    }

    #[test]
    fn containment_is_closed() {
        let frame = ExpandedFrame::new(10.0, 10.0, 3).unwrap();
        assert!(containment_filter(&face(15.0, 15.0, 4.0, 4.0), &frame));
        assert!(!containment_filter(&face(1.0, 5.0, 4.0, 4.0), &frame));
        assert!(containment_filter(&face(2.0, 28.0, 4.0, 4.0), &frame));
    }

    #[test]
    fn categorize_examples() {
        let frame = ExpandedFrame::new(10.0, 10.0, 3).unwrap();
        assert_eq!(categorize(&face(15.0, 15.0, 2.0, 2.0), &frame, None), FaceCategory::Inside);
        assert_eq!(categorize(&face(10.0, 15.0, 2.0, 2.0), &frame, None), FaceCategory::Truncated);
        let out = face(15.0, 8.0, 2.0, 2.0);
        let body = BoundingBox::new(15.0, 10.0, 4.0, 6.0, ClassId::Body).unwrap();
        assert_eq!(categorize(&out, &frame, Some(&body)), FaceCategory::OutsideWithEvidence);
        assert_eq!(categorize(&out, &frame, None), FaceCategory::OutsideWithoutEvidence);
        // edge contact only
        assert_eq!(categorize(&face(9.0, 15.0, 2.0, 2.0), &frame, None), FaceCategory::OutsideWithoutEvidence);
        let touching_body = BoundingBox::new(15.0, 8.0, 2.0, 4.0, ClassId::Body).unwrap();
        assert_eq!(categorize(&out, &frame, Some(&touching_body)), FaceCategory::OutsideWithoutEvidence);
    }

    #[test]
    fn invalid_boxes_are_rejected() {
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 1.0, ClassId::Face).is_err());
        assert!(BoundingBox::new(f64::INFINITY, 0.0, 1.0, 1.0, ClassId::Face).is_err());
    }
}
