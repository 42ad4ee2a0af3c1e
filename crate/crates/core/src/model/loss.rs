//! Training targets and the detection loss.

use exa_tensor::{Scalar, Tape, Var};

use super::config::{ModelConfig, CLASSES, HEAD_FIELDS};
use super::network::{Forward, Geometry};
use crate::dataset::SampleMeta;
use crate::error::Result;
use crate::geometry::BoundingBox;
use crate::heatmap::{center_cell, render_gt};

/// A box center assigned to one head row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Positive {
    pub row: usize,
    pub class: usize,
    pub offset: (f64, f64),
    pub log_size: (f64, f64),
}

/// Targets of one head (inner or outside cells).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegionTargets {
    /// `rows × CLASSES` Gaussian targets, row-major.
    pub heatmap: Vec<f64>,
    pub positives: Vec<Positive>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub inner: RegionTargets,
    pub outer: RegionTargets,
    /// Expanded-grid cells holding a box center.
    pub centers: Vec<usize>,
}

impl Targets {
    pub fn build(cfg: &ModelConfig, geo: &Geometry, meta: &SampleMeta) -> Result<Self> {
        let boxes: Vec<BoundingBox> = meta.boxes.iter().map(|b| b.bbox()).collect();
        let cell = cfg.stride as f64;
        let gt = render_gt(&boxes, &meta.frame(), cell, CLASSES)?;
        let side = geo.grid.side();
        let region = |cells: &[usize]| RegionTargets {
            heatmap: cells
                .iter()
                .flat_map(|&i| (0..CLASSES).map(move |k| (i, k)))
                .map(|(i, k)| gt.plane(k)[i] as f64)
                .collect(),
            positives: Vec::new(),
        };
        let mut inner = region(&geo.in_cells);
        let mut outer = region(&geo.out_cells);
        let mut row_of = vec![(false, usize::MAX); side * side];
        for (r, &i) in geo.in_cells.iter().enumerate() {
            row_of[i] = (true, r);
        }
        for (r, &i) in geo.out_cells.iter().enumerate() {
            row_of[i] = (false, r);
        }
        let mut centers = Vec::new();
        let mut taken = vec![[false; CLASSES]; side * side];
        for b in &boxes {
            let k = b.class.index();
            let (r, c) = center_cell(b.cx, b.cy, cell, side, side);
            let idx = r * side + c;
            centers.push(idx);
            if std::mem::replace(&mut taken[idx][k], true) {
                continue;
            }
            let pos = Positive {
                row: row_of[idx].1,
                class: k,
                offset: ((b.cx / cell - c as f64).clamp(0.0, 1.0), (b.cy / cell - r as f64).clamp(0.0, 1.0)),
                log_size: (b.w.ln(), b.h.ln()),
            };
            if row_of[idx].0 {
                inner.positives.push(pos);
            } else {
                outer.positives.push(pos);
            }
        }
        centers.sort_unstable();
        centers.dedup();
        Ok(Targets { inner, outer, centers })
    }

    pub fn positives(&self) -> usize {
        self.inner.positives.len() + self.outer.positives.len()
    }

    /// Score target of each token of a stage: 1 iff its window holds a
    /// box center.
    pub fn score_labels(&self, geo: &Geometry, scale: usize, cells: &[usize]) -> Vec<f64> {
        let side = geo.grid.side();
        let cs = side / scale;
        let mut hit = vec![false; cs * cs];
        for &i in &self.centers {
            hit[(i / side / scale) * cs + (i % side) / scale] = true;
        }
        cells.iter().map(|&c| if hit[c] { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub heatmap: f64,
    pub offset: f64,
    pub size: f64,
    pub score: f64,
    pub total: f64,
}

/// Positions of the heatmap logits of every row and class.
fn heatmap_columns(rows: usize) -> Vec<usize> {
    (0..rows)
        .flat_map(|r| (0..CLASSES).map(move |k| r * CLASSES * HEAD_FIELDS + k * HEAD_FIELDS))
        .collect()
}

fn field(p: &Positive, f: usize) -> usize {
    p.row * CLASSES * HEAD_FIELDS + p.class * HEAD_FIELDS + f
}

struct Sums {
    heatmap: Option<Var>,
    offset: Option<Var>,
    size: Option<Var>,
}

fn region_loss<T: Scalar>(tape: &mut Tape<T>, cfg: &ModelConfig, head: Var, t: &RegionTargets) -> Result<Sums> {
    let rows = tape.shape(head)[0];
    let mut sums = Sums {
        heatmap: None,
        offset: None,
        size: None,
    };
    if rows > 0 {
        let logits = tape.gather_elems(head, &heatmap_columns(rows))?;
        let target: Vec<T> = t.heatmap.iter().map(|&v| T::of(v)).collect();
        sums.heatmap = Some(tape.focal_loss(logits, &target, cfg.focal_alpha, cfg.focal_beta)?);
    }
    if !t.positives.is_empty() {
        let off_idx: Vec<usize> = t.positives.iter().flat_map(|p| [field(p, 1), field(p, 2)]).collect();
        let off_target: Vec<T> = t.positives.iter().flat_map(|p| [T::of(p.offset.0), T::of(p.offset.1)]).collect();
        let off = tape.gather_elems(head, &off_idx)?;
        let off = tape.sigmoid(off);
        sums.offset = Some(tape.l1_loss(off, &off_target)?);
        let size_idx: Vec<usize> = t.positives.iter().flat_map(|p| [field(p, 3), field(p, 4)]).collect();
        let size_target: Vec<T> = t.positives.iter().flat_map(|p| [T::of(p.log_size.0), T::of(p.log_size.1)]).collect();
        let size = tape.gather_elems(head, &size_idx)?;
        sums.size = Some(tape.l1_loss(size, &size_target)?);
    }
    Ok(sums)
}

fn total<T: Scalar>(tape: &mut Tape<T>, terms: &[Option<Var>]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &t in terms.iter().flatten() {
        acc = Some(match acc {
            Some(a) => tape.add(a, t)?,
            None => t,
        });
    }
    Ok(acc)
}

/// Focal heatmap loss and L1 box regression on both heads, normalized by
/// the number of box centers, plus the mean token-score cross-entropy of
/// every selecting stage.
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    geo: &Geometry,
    fwd: &Forward,
    targets: &Targets,
) -> Result<(Var, LossParts)> {
    let inner = region_loss(tape, cfg, fwd.in_head, &targets.inner)?;
    let outer = region_loss(tape, cfg, fwd.out_head, &targets.outer)?;
    let norm = 1.0 / targets.positives().max(1) as f64;
    let w = &cfg.loss;
    let mut parts = LossParts::default();
    let mut terms = Vec::new();
    for (a, b, weight, slot) in [
        (inner.heatmap, outer.heatmap, w.heatmap, &mut parts.heatmap),
        (inner.offset, outer.offset, w.offset, &mut parts.offset),
        (inner.size, outer.size, w.size, &mut parts.size),
    ] {
        if let Some(s) = total(tape, &[a, b])? {
            let s = tape.scale(s, norm);
            *slot = tape.value(s).item().f64();
            terms.push(Some(tape.scale(s, weight)));
        }
    }
    if cfg.score_supervision {
        for st in &fwd.stages {
            let Some(score) = st.score else { continue };
            let n = st.cells.len().max(1) as f64;
            let labels: Vec<T> = targets
                .score_labels(geo, st.scale, &st.cells)
                .into_iter()
                .map(T::of)
                .collect();
            let s = tape.bce_with_logits(score, &labels)?;
            let s = tape.scale(s, 1.0 / n);
            parts.score += tape.value(s).item().f64();
            terms.push(Some(tape.scale(s, w.score)));
        }
    }
    let loss = total(tape, &terms)?.expect("the heatmap term is always present");
    parts.total = tape.value(loss).item().f64();
    Ok((loss, parts))
}
