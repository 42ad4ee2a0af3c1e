//! Detection and heatmap metrics over face subsets.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SampleMeta;
use crate::error::{Error, Result};
use crate::geometry::{hungarian, iou, nms, BoundingBox, ClassId, ExpandedFrame, FaceCategory};
use crate::heatmap::{render_gt, Heatmap};
use crate::model::CLASSES;

pub const AP_IOU: f64 = 0.25;
pub const NMS_IOU: f64 = 0.7;
pub const TOP_K: usize = 1000;
pub const MASK_THRESHOLD: f32 = 0.5;
pub const ENTROPY_EPS: f64 = 1e-12;

/// `0.05, 0.10, …, 0.95`.
pub fn recall_thresholds() -> Vec<f32> {
    (1..20).map(|i| (i as f64 / 20.0) as f32).collect()
}

/// A prediction or ground-truth box tagged with its image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tagged {
    pub image: usize,
    pub bbox: BoundingBox,
}

/// Average precision at `threshold` IoU with all-point interpolation.
///
/// Predictions are matched greedily by descending score, each to the
/// unmatched ground truth of its image with the highest IoU. Ground truth
/// with `counted = false` still absorbs matches, but such matches count as
/// neither true nor false positives.
pub fn average_precision(preds: &[Tagged], gts: &[(Tagged, bool)], threshold: f64) -> f64 {
    let positives = gts.iter().filter(|g| g.1).count();
    let mut by_image: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.0.image).or_default().push(i);
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].bbox.score.total_cmp(&preds[a].bbox.score));
    let mut taken = vec![false; gts.len()];
    let mut hits = Vec::with_capacity(preds.len());
    for i in order {
        let p = &preds[i];
        let mut best: Option<(f64, usize)> = None;
        for &j in by_image.get(&p.image).map(Vec::as_slice).unwrap_or(&[]) {
            if taken[j] {
                continue;
            }
            let v = iou(&p.bbox, &gts[j].0.bbox);
            if v >= threshold && best.map_or(true, |(b, _)| v > b) {
                best = Some((v, j));
            }
        }
        match best {
            Some((_, j)) => {
                taken[j] = true;
                if gts[j].1 {
                    hits.push(true);
                }
            }
            None => hits.push(false),
        }
    }
    if positives == 0 {
        return if hits.is_empty() { 100.0 } else { 0.0 };
    }
    interpolated_area(&hits, positives) * 100.0
}

/// Area under the precision envelope of a ranked hit list.
pub fn interpolated_area(hits: &[bool], positives: usize) -> f64 {
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        recall.push(tp as f64 / positives as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut area = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.into_iter().zip(precision) {
        area += (r - prev) * p;
        prev = r;
    }
    area
}

/// Distance from each ground-truth center to its Hungarian partner among
/// the `|gt|` best predictions; unpaired centers score the distance to the
/// nearest corner of the expanded frame.
pub fn center_errors(preds: &[BoundingBox], gts: &[(f64, f64)], frame: &ExpandedFrame) -> Result<Vec<f64>> {
    let mut ranked: Vec<&BoundingBox> = preds.iter().collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    ranked.truncate(gts.len());
    let (n, m) = (gts.len(), ranked.len());
    let cost: Vec<f64> = gts
        .iter()
        .flat_map(|g| ranked.iter().map(move |p| (p.cx - g.0).hypot(p.cy - g.1)))
        .collect();
    let corners = [(0.0, 0.0), (frame.width(), 0.0), (0.0, frame.height()), (frame.width(), frame.height())];
    let mut out: Vec<f64> = gts
        .iter()
        .map(|g| corners.iter().map(|c| (c.0 - g.0).hypot(c.1 - g.1)).fold(f64::INFINITY, f64::min))
        .collect();
    for (r, c) in hungarian(&cost, n, m)? {
        out[r] = cost[r * m + c];
    }
    Ok(out)
}

/// Diagonal of the visible input, the unit of MAE.
pub fn input_diagonal(frame: &ExpandedFrame) -> f64 {
    frame.inner_w.hypot(frame.inner_h)
}

/// Intersection over union of the thresholded masks, or `None` when the
/// ground-truth mask is empty.
pub fn mask_iou(pred: &[f32], gt: &[f32]) -> Option<f64> {
    let (mut inter, mut union, mut positives) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (a, b) = (p >= MASK_THRESHOLD, g >= MASK_THRESHOLD);
        inter += usize::from(a && b);
        union += usize::from(a || b);
        positives += usize::from(b);
    }
    (positives > 0).then(|| inter as f64 / union as f64 * 100.0)
}

/// Recall of the ground-truth mask averaged over the threshold grid, or
/// `None` when the mask is empty.
pub fn mask_recall(pred: &[f32], gt: &[f32]) -> Option<f64> {
    let thresholds = recall_thresholds();
    let mut hits = vec![0usize; thresholds.len()];
    let mut positives = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        if g < MASK_THRESHOLD {
            continue;
        }
        positives += 1;
        for (h, &t) in hits.iter_mut().zip(&thresholds) {
            *h += usize::from(p >= t);
        }
    }
    (positives > 0).then(|| hits.iter().map(|&h| h as f64 / positives as f64).sum::<f64>() / thresholds.len() as f64 * 100.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entropies {
    pub se: f64,
    pub ce: f64,
    /// The averaged prediction was zero everywhere.
    pub degenerate: bool,
}

fn distribution(values: &[f64]) -> (Vec<f64>, bool) {
    let floored: Vec<f64> = values.iter().map(|&v| v.max(ENTROPY_EPS)).collect();
    let total: f64 = floored.iter().sum();
    (floored.iter().map(|v| v / total).collect(), values.iter().all(|&v| v <= 0.0))
}

/// Self-entropy of the averaged prediction and its cross-entropy against
/// the averaged ground truth, both as percentages of `ln M`.
pub fn entropy_metrics(pred_mean: &[f64], gt_mean: &[f64]) -> Result<Entropies> {
    if pred_mean.len() != gt_mean.len() || pred_mean.len() < 2 {
        return Err(Error::Input(format!(
            "entropy needs two maps of equal size >= 2, got {} and {}",
            pred_mean.len(),
            gt_mean.len()
        )));
    }
    let (p, degenerate) = distribution(pred_mean);
    let (g, _) = distribution(gt_mean);
    let norm = (p.len() as f64).ln();
    let se = -p.iter().map(|&v| v * v.ln()).sum::<f64>() / norm * 100.0;
    let ce = -g.iter().zip(&p).map(|(&a, &b)| a * b.ln()).sum::<f64>() / norm * 100.0;
    Ok(Entropies { se, ce, degenerate })
}

/// Model output for one sample. `boxes = None` marks a heatmap-only
/// method, whose box metrics are reported as absent.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageOutput {
    pub id: u64,
    pub boxes: Option<Vec<BoundingBox>>,
    pub heatmap: Heatmap,
}

/// Metrics of one face subset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetScores {
    pub faces: usize,
    pub ap: Option<f64>,
    pub mae: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub images: usize,
    pub all: SubsetScores,
    pub inside: SubsetScores,
    pub truncated: SubsetScores,
    pub outside: SubsetScores,
    pub outside_with_evidence: SubsetScores,
    pub outside_without_evidence: SubsetScores,
    pub miou_o: Option<f64>,
    pub ar_o: Option<f64>,
    pub se_o: f64,
    pub ce_o: f64,
    pub degenerate: bool,
}

pub const CSV_HEADER: &str = "method,AP,AP_t,AP_o,AP_o+,AP_o-,MAE,MAE_t,MAE_o,MAE_o+,MAE_o-,mIoU_o,AR_o,SE_o,CE_o";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "--".to_string(), |x| format!("{x:.2}"))
}

impl EvalReport {
    /// One row in the column order of [`CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        let subsets = [
            &self.all,
            &self.truncated,
            &self.outside,
            &self.outside_with_evidence,
            &self.outside_without_evidence,
        ];
        let mut row = self.method.clone();
        for s in subsets {
            let _ = write!(row, ",{}", cell(s.ap));
        }
        for s in subsets {
            let _ = write!(row, ",{}", cell(s.mae));
        }
        let _ = write!(
            row,
            ",{},{},{},{}",
            cell(self.miou_o),
            cell(self.ar_o),
            cell(Some(self.se_o)),
            cell(Some(self.ce_o))
        );
        row
    }

    pub fn to_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}\n", self.csv_row())
    }
}

/// Per-image partial results, reduced in image order.
struct ImageTerms {
    faces: Vec<(BoundingBox, FaceCategory)>,
    preds: Option<Vec<BoundingBox>>,
    errors: Option<Vec<f64>>,
    miou: Option<f64>,
    recall: Option<f64>,
    pred_out: Vec<f32>,
    gt_out: Vec<f32>,
}

/// Single-class plane upsampled to pixels; returns its outside values.
fn outside_pixels(plane: &[f32], rows: usize, cols: usize, cell: f64, frame: &ExpandedFrame) -> Result<Vec<f32>> {
    let factor = cell.round() as usize;
    if factor == 0 || (cell - factor as f64).abs() > 1e-9 {
        return Err(Error::Input(format!("heatmap cell size {cell} is not a whole number of pixels")));
    }
    let single = Heatmap {
        classes: 1,
        rows,
        cols,
        cell,
        data: plane.to_vec(),
    };
    let up = single.upsample(factor);
    let (x0, y0, x1, y1) = frame.inner();
    let mut out = Vec::with_capacity(up.data.len());
    for r in 0..up.rows {
        for c in 0..up.cols {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            if !(x > x0 && x < x1 && y > y0 && y < y1) {
                out.push(up.data[r * up.cols + c]);
            }
        }
    }
    Ok(out)
}

fn image_terms(meta: &SampleMeta, out: &ImageOutput) -> Result<ImageTerms> {
    let frame = meta.frame();
    let face = ClassId::Face.index();
    let faces: Vec<(BoundingBox, FaceCategory)> = meta
        .faces()
        .map(|b| (b.bbox(), b.category.unwrap_or(FaceCategory::Inside)))
        .collect();
    let hm = &out.heatmap;
    let all_boxes: Vec<BoundingBox> = meta.boxes.iter().map(|b| b.bbox()).collect();
    let gt = render_gt(&all_boxes, &frame, hm.cell, CLASSES)?;
    if !gt.same_grid(hm) {
        return Err(Error::Input(format!(
            "sample {}: heatmap is {}x{}x{}, ground truth is {}x{}x{}",
            meta.id, hm.classes, hm.rows, hm.cols, gt.classes, gt.rows, gt.cols
        )));
    }
    let pred_out = outside_pixels(hm.plane(face), hm.rows, hm.cols, hm.cell, &frame)?;
    let gt_out = outside_pixels(gt.plane(face), gt.rows, gt.cols, gt.cell, &frame)?;
    let preds = out.boxes.as_ref().map(|b| {
        let faces: Vec<BoundingBox> = b.iter().filter(|x| x.class == ClassId::Face).copied().collect();
        nms(&faces, NMS_IOU, TOP_K)
    });
    let errors = match &preds {
        Some(p) => {
            let centers: Vec<(f64, f64)> = faces.iter().map(|(b, _)| (b.cx, b.cy)).collect();
            let diag = input_diagonal(&frame);
            Some(center_errors(p, &centers, &frame)?.into_iter().map(|e| e / diag * 100.0).collect())
        }
        None => None,
    };
    Ok(ImageTerms {
        miou: mask_iou(&pred_out, &gt_out),
        recall: mask_recall(&pred_out, &gt_out),
        faces,
        preds,
        errors,
        pred_out,
        gt_out,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Full evaluation of `outputs` against `metas`, paired by position and
/// checked by id.
pub fn evaluate(method: &str, metas: &[SampleMeta], outputs: &[ImageOutput]) -> Result<EvalReport> {
    if metas.len() != outputs.len() {
        return Err(Error::IdMismatch(format!("{} samples but {} outputs", metas.len(), outputs.len())));
    }
    if metas.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    if let Some((m, o)) = metas.iter().zip(outputs).find(|(m, o)| m.id != o.id) {
        return Err(Error::IdMismatch(format!("sample {} paired with output {}", m.id, o.id)));
    }
    let terms: Vec<ImageTerms> = metas
        .par_iter()
        .zip(outputs)
        .map(|(m, o)| image_terms(m, o))
        .collect::<Result<_>>()?;
    let has_boxes = terms.iter().all(|t| t.preds.is_some());

    let size = terms[0].pred_out.len();
    if terms.iter().any(|t| t.pred_out.len() != size) {
        return Err(Error::Input("outside regions differ in size across samples".into()));
    }
    let mut pred_mean = vec![0.0f64; size];
    let mut gt_mean = vec![0.0f64; size];
    for t in &terms {
        for (a, &v) in pred_mean.iter_mut().zip(&t.pred_out) {
            *a += v as f64;
        }
        for (a, &v) in gt_mean.iter_mut().zip(&t.gt_out) {
            *a += v as f64;
        }
    }
    let n = terms.len() as f64;
    pred_mean.iter_mut().chain(gt_mean.iter_mut()).for_each(|v| *v /= n);
    let ent = entropy_metrics(&pred_mean, &gt_mean)?;

    let preds: Vec<Tagged> = if has_boxes {
        terms
            .iter()
            .enumerate()
            .flat_map(|(image, t)| t.preds.iter().flatten().map(move |&bbox| Tagged { image, bbox }))
            .collect()
    } else {
        Vec::new()
    };
    let subset = |member: &dyn Fn(FaceCategory) -> bool| {
        let gts: Vec<(Tagged, bool)> = terms
            .iter()
            .enumerate()
            .flat_map(|(image, t)| t.faces.iter().map(move |&(bbox, c)| (Tagged { image, bbox }, c)))
            .map(|(g, c)| (g, member(c)))
            .collect();
        let faces = gts.iter().filter(|g| g.1).count();
        let errors = terms.iter().flat_map(|t| {
            let errs = t.errors.as_deref().unwrap_or(&[]);
            t.faces.iter().zip(errs).filter(|((_, c), _)| member(*c)).map(|(_, &e)| e)
        });
        SubsetScores {
            faces,
            ap: has_boxes.then(|| average_precision(&preds, &gts, AP_IOU)),
            mae: if has_boxes { mean(errors) } else { None },
        }
    };
    Ok(EvalReport {
        method: method.to_string(),
        images: terms.len(),
        all: subset(&|_| true),
        inside: subset(&|c| c == FaceCategory::Inside),
        truncated: subset(&|c| c == FaceCategory::Truncated),
        outside: subset(&|c| c.is_outside()),
        outside_with_evidence: subset(&|c| c == FaceCategory::OutsideWithEvidence),
        outside_without_evidence: subset(&|c| c == FaceCategory::OutsideWithoutEvidence),
        miou_o: mean(terms.iter().filter_map(|t| t.miou)),
        ar_o: mean(terms.iter().filter_map(|t| t.recall)),
        se_o: ent.se,
        ce_o: ent.ce,
        degenerate: ent.degenerate,
    })
}

/// Constant 0.5 heatmap with no boxes.
pub fn uniform_output(meta: &SampleMeta, cell: f64) -> Result<ImageOutput> {
    let mut heatmap = render_gt(&[], &meta.frame(), cell, CLASSES)?;
    heatmap.data.fill(0.5);
    Ok(ImageOutput {
        id: meta.id,
        boxes: None,
        heatmap,
    })
}

/// Ground truth replayed as a prediction.
pub fn oracle_output(meta: &SampleMeta, cell: f64) -> Result<ImageOutput> {
    let boxes: Vec<BoundingBox> = meta.boxes.iter().map(|b| b.bbox()).collect();
    Ok(ImageOutput {
        id: meta.id,
        heatmap: render_gt(&boxes, &meta.frame(), cell, CLASSES)?,
        boxes: Some(boxes),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn face(cx: f64, cy: f64, score: f64) -> BoundingBox {
        BoundingBox::new(cx, cy, 10.0, 10.0, ClassId::Face).unwrap().with_score(score)
    }

    #[test]
    fn false_positive_ranked_first_halves_precision() {
        let gt = [(Tagged { image: 0, bbox: face(20.0, 20.0, 1.0) }, true)];
        let preds = [
            Tagged { image: 0, bbox: face(20.0, 20.0, 0.9) },
            Tagged { image: 0, bbox: face(80.0, 80.0, 0.95) },
        ];
        assert!((average_precision(&preds, &gt, AP_IOU) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn empty_ground_truth_conventions() {
        assert_eq!(average_precision(&[], &[], AP_IOU), 100.0);
        let p = [Tagged { image: 0, bbox: face(1.0, 1.0, 0.5) }];
        assert_eq!(average_precision(&p, &[], AP_IOU), 0.0);
    }

    #[test]
    fn matches_outside_the_subset_are_ignored() {
        let gts = [
            (Tagged { image: 0, bbox: face(20.0, 20.0, 1.0) }, false),
            (Tagged { image: 0, bbox: face(60.0, 20.0, 1.0) }, true),
        ];
        let preds = [
            Tagged { image: 0, bbox: face(20.0, 20.0, 0.9) },
            Tagged { image: 0, bbox: face(60.0, 20.0, 0.8) },
        ];
        assert_eq!(average_precision(&preds, &gts, AP_IOU), 100.0);
    }

    #[test]
    fn mae_offset_of_a_tenth_diagonal() {
        let frame = ExpandedFrame::new(48.0, 48.0, 3).unwrap();
        let diag = input_diagonal(&frame);
        let g = (72.0, 72.0);
        let step = diag / 10.0 / 2f64.sqrt();
        let p = face(72.0 + step, 72.0 + step, 1.0);
        let e = center_errors(&[p], &[g], &frame).unwrap();
        assert!((e[0] / diag * 100.0 - 10.0).abs() < 1e-9);
    }

    #[test]
    fn unmatched_ground_truth_pays_corner_distance() {
        let frame = ExpandedFrame::new(48.0, 48.0, 3).unwrap();
        let e = center_errors(&[], &[(10.0, 20.0)], &frame).unwrap();
        assert!((e[0] - 10f64.hypot(20.0)).abs() < 1e-12);
    }

    #[test]
    fn mask_metrics() {
        let gt = [1.0, 0.6, 0.0, 0.0];
        assert_eq!(mask_iou(&gt, &gt), Some(100.0));
        assert_eq!(mask_iou(&[1.0; 4], &gt), Some(50.0));
        assert_eq!(mask_iou(&[0.0; 4], &gt), Some(0.0));
        assert_eq!(mask_iou(&gt, &[0.0; 4]), None);
        let r = mask_recall(&[0.5; 4], &gt).unwrap();
        assert!((r - 1000.0 / 19.0).abs() < 1e-9);
        assert_eq!(mask_recall(&[1.0; 4], &gt), Some(100.0));
        assert_eq!(mask_recall(&[0.0; 4], &gt), Some(0.0));
    }

    #[test]
    fn entropy_anchors() {
        let g = [0.1, 0.0, 0.7, 0.2];
        let u = entropy_metrics(&[0.5; 4], &g).unwrap();
        assert!((u.se - 100.0).abs() < 1e-9 && (u.ce - 100.0).abs() < 1e-9);
        let same = entropy_metrics(&g, &g).unwrap();
        assert_eq!(same.se, same.ce);
        let delta = entropy_metrics(&[0.0, 1.0, 0.0, 0.0], &g).unwrap();
        assert!(delta.se.abs() < 1e-6);
        assert!(entropy_metrics(&[0.0; 4], &g).unwrap().degenerate);
    }

    #[test]
    fn csv_columns() {
        assert_eq!(CSV_HEADER.split(',').count(), 15);
    }
}
