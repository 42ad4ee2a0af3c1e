//! Forward pass: stem, encoder, selective coarse-to-fine decoder, heads.

use std::sync::Arc;

use exa_tensor::{Scalar, Tape, Tensor, Var};

use super::config::{CoarseEncoding, ModelConfig};
use super::params::Bound;
use crate::error::{Error, Result};
use crate::grid::FrameGrid;
use crate::posenc::{avgpool_encoding, center_sampling_encoding, grid_table, RopeTable};

const LN_EPS: f64 = 1e-5;

/// Encodings and index maps that depend only on the configuration.
#[derive(Clone, Debug)]
pub struct Geometry {
    pub grid: FrameGrid,
    /// Expanded-grid indices of inner cells, in token order.
    pub in_cells: Vec<usize>,
    /// Expanded-grid indices of outside cells, in token order.
    pub out_cells: Vec<usize>,
    /// Rotary factors of the inner cells, `head_dim` wide.
    pub rope_in: RopeTable,
    pub scales: Vec<ScaleTables>,
}

/// Tables for one decoder scale, indexed by position in `cells`.
#[derive(Clone, Debug)]
pub struct ScaleTables {
    pub scale: usize,
    /// Coarse-grid indices of all outside cells at this scale.
    pub cells: Vec<usize>,
    /// Coarse-grid index to position in `cells`.
    pub position: Vec<usize>,
    /// Rotary factors, `head_dim` wide.
    pub rope: RopeTable,
    /// Positional features, `d` wide, fed to projections.
    pub features: RopeTable,
}

impl Geometry {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let fine_rope = grid_table(&grid, cfg.head_dim(), cfg.rope_base)?;
        let fine_feat = grid_table(&grid, cfg.d, cfg.rope_base)?;
        let in_cells = grid.in_cells();
        let out_cells = grid.out_cells();
        let rope_in = fine_rope.select(&in_cells);
        let mut scales = Vec::new();
        for &s in &cfg.scales {
            let cells = grid.scale_cells(s)?;
            let side = grid.side() / s;
            let mut position = vec![usize::MAX; side * side];
            for (i, &c) in cells.iter().enumerate() {
                position[c] = i;
            }
            let (rope, features) = match cfg.coarse_encoding {
                CoarseEncoding::AvgPool => (avgpool_encoding(&fine_rope, &grid, s)?, avgpool_encoding(&fine_feat, &grid, s)?),
                CoarseEncoding::CenterSampling => (
                    center_sampling_encoding(&grid, s, cfg.head_dim(), cfg.rope_base)?,
                    center_sampling_encoding(&grid, s, cfg.d, cfg.rope_base)?,
                ),
            };
            scales.push(ScaleTables {
                scale: s,
                cells,
                position,
                rope,
                features,
            });
        }
        Ok(Geometry {
            grid,
            in_cells,
            out_cells,
            rope_in,
            scales,
        })
    }
}

/// Tokens of one decoder stage.
#[derive(Clone, Debug)]
pub struct StageTrace {
    pub scale: usize,
    /// Coarse-grid indices at this scale, in token order.
    pub cells: Vec<usize>,
    pub output: Var,
    /// `[tokens, 1]` logits when this stage selects tokens for the next.
    pub score: Option<Var>,
    /// Token positions retained for refinement, ascending.
    pub kept: Vec<usize>,
}

pub struct Forward {
    pub y_in: Var,
    pub z_in: Var,
    pub y_out: Var,
    /// `[in cells, CLASSES·HEAD_FIELDS]`
    pub in_head: Var,
    /// `[outside cells, CLASSES·HEAD_FIELDS]`
    pub out_head: Var,
    pub stages: Vec<StageTrace>,
    /// Outside cells (token order) reached by the finest stage.
    pub active: Vec<bool>,
    pub decoder_flops: u64,
}

pub(crate) fn table<T: Scalar>(t: &RopeTable) -> Arc<[T]> {
    t.factors.iter().map(|&v| T::of(v)).collect()
}

fn constant_rows<T: Scalar>(tape: &mut Tape<T>, t: &RopeTable) -> Result<Var> {
    let data = t.factors.iter().map(|&v| T::of(v)).collect();
    Ok(tape.constant(Tensor::new([t.len(), t.dim], data)?))
}

pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add_row(y, b)?)
}

fn norm<T: Scalar>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    Ok(tape.layer_norm(x, p.get(&format!("{prefix}.g")), p.get(&format!("{prefix}.b")), LN_EPS)?)
}

/// Pre-norm attention layer followed by a feed-forward sublayer. With
/// `memory = None` the layer attends to itself.
#[allow(clippy::too_many_arguments)]
pub fn attention_layer<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    cfg: &ModelConfig,
    x: Var,
    rope_q: &Arc<[T]>,
    memory: Option<Var>,
    rope_k: &Arc<[T]>,
) -> Result<Var> {
    let w = |n: &str| p.get(&format!("{prefix}.{n}"));
    let h = norm(tape, p, &format!("{prefix}.ln1"), x)?;
    let src = memory.unwrap_or(h);
    let q = linear(tape, h, w("wq"), w("bq"))?;
    let q = tape.rope(q, rope_q.clone(), cfg.head_dim())?;
    let k = linear(tape, src, w("wk"), w("bk"))?;
    let k = tape.rope(k, rope_k.clone(), cfg.head_dim())?;
    let v = linear(tape, src, w("wv"), w("bv"))?;
    let a = tape.attention(q, k, v, cfg.heads)?;
    let o = linear(tape, a, w("wo"), w("bo"))?;
    let x = tape.add(x, o)?;
    let h = norm(tape, p, &format!("{prefix}.ln2"), x)?;
    let f = linear(tape, h, w("w1"), w("b1"))?;
    let f = tape.silu(f);
    let f = linear(tape, f, w("w2"), w("b2"))?;
    Ok(tape.add(x, f)?)
}

/// Convolutional stem: stride-2 blocks of conv, channel norm and SiLU.
/// Returns `[cells, d]` tokens in row-major cell order.
pub fn extract_features<T: Scalar>(tape: &mut Tape<T>, p: &Bound, cfg: &ModelConfig, image: &[f32]) -> Result<Var> {
    let s = cfg.input_size;
    if image.len() != 3 * s * s {
        return Err(Error::Input(format!("image has {} values, expected 3x{s}x{s}", image.len())));
    }
    let mut x = tape.constant(Tensor::new([3, s, s], image.iter().map(|&v| T::of(v as f64)).collect())?);
    let blocks = cfg.stem_blocks();
    for i in 0..blocks {
        let y = tape.conv2d(x, p.get(&format!("stem.{i}.w")), Some(p.get(&format!("stem.{i}.b"))), 2, 1)?;
        let c = tape.shape(y)[0];
        let side = tape.shape(y)[1];
        let y = tape.reshape(y, &[c, side * side])?;
        let y = tape.transpose(y)?;
        let y = norm(tape, p, &format!("stem.{i}.ln"), y)?;
        let y = tape.silu(y);
        if i + 1 == blocks {
            return Ok(y);
        }
        let y = tape.transpose(y)?;
        x = tape.reshape(y, &[c, side, side])?;
    }
    unreachable!("stride >= 2 implies at least one block")
}

pub fn encode<T: Scalar>(tape: &mut Tape<T>, p: &Bound, cfg: &ModelConfig, y_in: Var, rope_in: &Arc<[T]>) -> Result<Var> {
    let mut x = y_in;
    for l in 0..cfg.encoder_layers {
        x = attention_layer(tape, p, &format!("enc.{l}"), cfg, x, rope_in, None, rope_in)?;
    }
    norm(tape, p, "enc.ln", x)
}

/// The decoder layers of stage `stage` over query tokens `x`.
#[allow(clippy::too_many_arguments)]
pub fn decode_block<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    stage: usize,
    x: Var,
    rope_out: &Arc<[T]>,
    z_in: Var,
    rope_in: &Arc<[T]>,
) -> Result<Var> {
    if tape.shape(z_in)[0] == 0 {
        return Err(Error::Input("decoder memory is empty".into()));
    }
    let mut x = x;
    for l in 0..cfg.decoder_layers {
        x = attention_layer(tape, p, &format!("dec.{stage}.{l}"), cfg, x, rope_out, Some(z_in), rope_in)?;
    }
    Ok(x)
}

/// Number of tokens kept at retention `mu` percent.
pub fn retained(mu: f64, n: usize) -> usize {
    let x = mu * n as f64 / 100.0;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (k as usize).clamp(usize::from(n > 0), n)
}

/// Positions of the `retained(mu, n)` highest scores; ties favor the lower
/// grid index. Returned ascending.
pub fn select_top(scores: &[f64], cells: &[usize], mu: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(cells[a].cmp(&cells[b])));
    let mut kept: Vec<usize> = order.into_iter().take(retained(mu, scores.len())).collect();
    kept.sort_unstable();
    kept
}

/// Scores tokens of stage `stage`, keeps the top share and duplicates each
/// kept token into its children at the next scale. Returns the score
/// logits, the kept positions, the child cells and the child features.
pub fn score_and_select<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    geo: &Geometry,
    stage: usize,
    y: Var,
    cells: &[usize],
) -> Result<(Var, Vec<usize>, Vec<usize>, Var)> {
    let (s, t) = (geo.scales[stage].scale, geo.scales[stage + 1].scale);
    let score = linear(tape, y, p.get(&format!("dec.{stage}.score.w")), p.get(&format!("dec.{stage}.score.b")))?;
    let values: Vec<f64> = tape.value(score).data().iter().map(|v| v.f64()).collect();
    let kept = select_top(&values, cells, cfg.mu);
    let mut parents = Vec::new();
    let mut children = Vec::new();
    for &k in &kept {
        for c in geo.grid.children(s, t, cells[k])? {
            parents.push(k);
            children.push(c);
        }
    }
    let mut feat = tape.gather_rows(y, &parents)?;
    if cfg.score_gate {
        let g = tape.gather_rows(score, &parents)?;
        let g = tape.sigmoid(g);
        feat = tape.scale_rows(feat, g)?;
    }
    let next = &geo.scales[stage + 1];
    let pos: Vec<usize> = children.iter().map(|&c| next.position[c]).collect();
    let pe = constant_rows(tape, &next.features.select(&pos))?;
    let inject = tape.matmul(pe, p.get(&format!("dec.{stage}.child.w")))?;
    let x = tape.add(feat, inject)?;
    Ok((score, kept, children, x))
}

/// Sums stage outputs on the outside cells of the finest grid. Coarse
/// stages pass through a transposed convolution with kernel = stride = s.
pub fn aggregate<T: Scalar>(tape: &mut Tape<T>, p: &Bound, geo: &Geometry, stages: &[StageTrace]) -> Result<(Var, Vec<bool>)> {
    let m = geo.out_cells.len();
    let last = stages.last().ok_or_else(|| Error::Input("no decoder stages".into()))?;
    let fine = &geo.scales[geo.scales.len() - 1];
    let pos: Vec<usize> = last.cells.iter().map(|&c| fine.position[c]).collect();
    let mut active = vec![false; m];
    for &i in &pos {
        active[i] = true;
    }
    let identity = pos.len() == m && pos.iter().enumerate().all(|(i, &q)| i == q);
    let mut acc = if identity {
        last.output
    } else {
        tape.scatter_rows(last.output, &pos, m)?
    };
    let side = geo.grid.side();
    for (i, st) in stages.iter().enumerate() {
        if st.scale == 1 {
            continue;
        }
        let cs = side / st.scale;
        let d = tape.shape(st.output)[1];
        let dense = tape.scatter_rows(st.output, &st.cells, cs * cs)?;
        let dense = tape.transpose(dense)?;
        let dense = tape.reshape(dense, &[d, cs, cs])?;
        let up = tape.conv_transpose2d(dense, p.get(&format!("dec.{i}.up.w")), st.scale)?;
        let up = tape.reshape(up, &[d, side * side])?;
        let up = tape.transpose(up)?;
        let up = tape.gather_rows(up, &geo.out_cells)?;
        acc = tape.add(acc, up)?;
    }
    Ok((acc, active))
}

/// Selective coarse-to-fine decoder.
pub fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    geo: &Geometry,
    z_in: Var,
    rope_in: &Arc<[T]>,
) -> Result<(Var, Vec<bool>, Vec<StageTrace>)> {
    let first = &geo.scales[0];
    let pe = constant_rows(tape, &first.features)?;
    let mut x = linear(tape, pe, p.get("dec.init.w"), p.get("dec.init.b"))?;
    let mut cells = first.cells.clone();
    let mut stages = Vec::new();
    for i in 0..geo.scales.len() {
        let sc = &geo.scales[i];
        let pos: Vec<usize> = cells.iter().map(|&c| sc.position[c]).collect();
        let rope_out = table::<T>(&sc.rope.select(&pos));
        let y = decode_block(tape, p, cfg, i, x, &rope_out, z_in, rope_in)?;
        let mut trace = StageTrace {
            scale: sc.scale,
            cells: cells.clone(),
            output: y,
            score: None,
            kept: Vec::new(),
        };
        if i + 1 < geo.scales.len() {
            let (score, kept, children, next) = score_and_select(tape, p, cfg, geo, i, y, &cells)?;
            trace.score = Some(score);
            trace.kept = kept;
            cells = children;
            x = next;
        }
        stages.push(trace);
    }
    let (y_out, active) = aggregate(tape, p, geo, &stages)?;
    Ok((y_out, active, stages))
}

/// Plain full-resolution cross-attention decoder over every outside cell.
/// Equivalent to [`decode`] with a single unit scale and full retention.
pub fn reference_decoder<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    geo: &Geometry,
    z_in: Var,
    rope_in: &Arc<[T]>,
) -> Result<Var> {
    let fine = geo
        .scales
        .iter()
        .find(|s| s.scale == 1)
        .ok_or_else(|| Error::Config("reference decoder needs a unit scale".into()))?;
    let pe = constant_rows(tape, &fine.features)?;
    let mut x = linear(tape, pe, p.get("dec.init.w"), p.get("dec.init.b"))?;
    let rope_out = table::<T>(&fine.rope);
    for l in 0..cfg.decoder_layers {
        x = attention_layer(tape, p, &format!("dec.0.{l}"), cfg, x, &rope_out, Some(z_in), rope_in)?;
    }
    Ok(x)
}

/// Per-cell head: norm, hidden SiLU layer, linear outputs.
pub fn head<T: Scalar>(tape: &mut Tape<T>, p: &Bound, which: &str, y: Var) -> Result<Var> {
    let h = norm(tape, p, &format!("head.{which}.ln"), y)?;
    let h = linear(tape, h, p.get(&format!("head.{which}.w1")), p.get(&format!("head.{which}.b1")))?;
    let h = tape.silu(h);
    linear(tape, h, p.get(&format!("head.{which}.w2")), p.get(&format!("head.{which}.b2")))
}

pub fn forward<T: Scalar>(tape: &mut Tape<T>, p: &Bound, cfg: &ModelConfig, geo: &Geometry, image: &[f32]) -> Result<Forward> {
    let rope_in = table::<T>(&geo.rope_in);
    let y_in = extract_features(tape, p, cfg, image)?;
    let z_in = encode(tape, p, cfg, y_in, &rope_in)?;
    let before = tape.flops();
    let (y_out, active, stages) = if cfg.is_dense() {
        let y = reference_decoder(tape, p, cfg, geo, z_in, &rope_in)?;
        let cells = geo.scales[0].cells.clone();
        let trace = StageTrace {
            scale: 1,
            cells,
            output: y,
            score: None,
            kept: Vec::new(),
        };
        (y, vec![true; geo.out_cells.len()], vec![trace])
    } else {
        decode(tape, p, cfg, geo, z_in, &rope_in)?
    };
    let decoder_flops = tape.flops() - before;
    let in_head = head(tape, p, "in", y_in)?;
    let out_head = head(tape, p, "out", y_out)?;
    Ok(Forward {
        y_in,
        z_in,
        y_out,
        in_head,
        out_head,
        stages,
        active,
        decoder_flops,
    })
}
