//! Activations, normalization, rotary encodings and fused losses.

use std::sync::Arc;

use crate::array::Tensor;
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{GradSink, Op, Tape, Var};

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Silu { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid { x: x.0 })
    }

    /// Softmax along `axis`, stabilized by subtracting the running maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid("softmax", &shape, format!("axis {axis} out of range")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = src.to_vec();
        let mut lane = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, l) in lane.iter_mut().enumerate() {
                    *l = src[base + j * inner];
                }
                softmax_in_place(&mut lane);
                for (j, &l) in lane.iter().enumerate() {
                    out[base + j * inner] = l;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { x: x.0, outer, len, inner }))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`
    /// (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap_or(&0);
        if cols < 2 {
            return Err(TensorError::invalid("layer_norm", &shape, "last axis must have size >= 2"));
        }
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(TensorError::mismatch("layer_norm", &shape, self.shape(gain)));
        }
        let eps = T::of(eps);
        let n = T::of(cols as f64);
        let src = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.len() / cols;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = if var + eps > T::zero() {
                T::one() / (var + eps).sqrt()
            } else {
                T::zero()
            };
            rstd[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv[c] + bv[c];
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                cols,
                xhat,
                rstd,
            },
        ))
    }

    /// Rotates consecutive channel pairs of `x: [n, d]` by per-row complex
    /// factors. `table` holds `n × head_dim` values laid out as
    /// `(re, im)` pairs; the same table applies to every head of width
    /// `head_dim`. Factors need not be unit-norm.
    pub fn rope(&mut self, x: Var, table: Arc<[T]>, head_dim: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || head_dim == 0 || head_dim % 2 != 0 || shape[1] % head_dim != 0 {
            return Err(TensorError::invalid(
                "rope",
                &shape,
                format!("width must be a multiple of an even head_dim {head_dim}"),
            ));
        }
        if table.len() != shape[0] * head_dim {
            return Err(TensorError::mismatch("rope", &shape, &[table.len() / head_dim.max(1), head_dim]));
        }
        let (n, d) = (shape[0], shape[1]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            let t = &table[r * head_dim..(r + 1) * head_dim];
            for h in 0..d / head_dim {
                let base = r * d + h * head_dim;
                for p in 0..head_dim / 2 {
                    let (re, im) = (t[2 * p], t[2 * p + 1]);
                    let (x0, x1) = (src[base + 2 * p], src[base + 2 * p + 1]);
                    out[base + 2 * p] = x0 * re - x1 * im;
                    out[base + 2 * p + 1] = x0 * im + x1 * re;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Rope { x: x.0, table, head_dim }))
    }

    /// CenterNet penalty-reduced focal loss, summed over elements.
    /// Cells whose target equals exactly 1 are positives.
    pub fn focal_loss(&mut self, logits: Var, target: &[T], alpha: f64, beta: f64) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.iter().product::<usize>() != target.len() {
            return Err(TensorError::mismatch("focal_loss", &shape, &[target.len()]));
        }
        let (a, b) = (T::of(alpha), T::of(beta));
        let total = self
            .value(logits)
            .data()
            .iter()
            .zip(target)
            .map(|(&x, &t)| focal_term(x, t, a, b))
            .sum::<T>();
        Ok(self.push(
            Tensor::scalar(total),
            Op::FocalLoss {
                logits: logits.0,
                target: target.to_vec(),
                alpha: a,
                beta: b,
            },
        ))
    }

    /// Binary cross-entropy on logits, summed over elements.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[T]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.iter().product::<usize>() != target.len() {
            return Err(TensorError::mismatch("bce_with_logits", &shape, &[target.len()]));
        }
        let total = self
            .value(logits)
            .data()
            .iter()
            .zip(target)
            .map(|(&x, &t)| softplus(x) - t * x)
            .sum::<T>();
        Ok(self.push(
            Tensor::scalar(total),
            Op::BceWithLogits {
                logits: logits.0,
                target: target.to_vec(),
            },
        ))
    }

    /// `Σ |x - target|`.
    pub fn l1_loss(&mut self, x: Var, target: &[T]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.iter().product::<usize>() != target.len() {
            return Err(TensorError::mismatch("l1_loss", &shape, &[target.len()]));
        }
        let total = self
            .value(x)
            .data()
            .iter()
            .zip(target)
            .map(|(&x, &t)| (x - t).abs())
            .sum::<T>();
        Ok(self.push(
            Tensor::scalar(total),
            Op::L1Loss {
                x: x.0,
                target: target.to_vec(),
            },
        ))
    }
}

fn focal_term<T: Scalar>(x: T, t: T, alpha: T, beta: T) -> T {
    let p = sigmoid(x);
    if t == T::one() {
        // log p = -softplus(-x)
        (T::one() - p).powf(alpha) * softplus(-x)
    } else {
        // log(1 - p) = -softplus(x)
        (T::one() - t).powf(beta) * p.powf(alpha) * softplus(x)
    }
}

pub(crate) fn focal_loss_backward<T: Scalar>(
    logits: &[T],
    target: &[T],
    alpha: T,
    beta: T,
    g: T,
    id: usize,
    sink: &mut GradSink<'_, T>,
) {
    let Some(d) = sink.get(id) else { return };
    for ((d, &x), &t) in d.iter_mut().zip(logits).zip(target) {
        let p = sigmoid(x);
        let q = T::one() - p;
        let grad = if t == T::one() {
            // d/dx [-(1-p)^a log p] = a p (1-p)^a log p - (1-p)^(a+1)
            -alpha * p * q.powf(alpha) * softplus(-x) - q.powf(alpha + T::one())
        } else {
            // d/dx [-w p^a log(1-p)] = w (p^(a+1) - a p^a (1-p) log(1-p))
            let w = (T::one() - t).powf(beta);
            w * (p.powf(alpha + T::one()) + alpha * p.powf(alpha) * q * softplus(x))
        };
        *d = *d + g * grad;
    }
}

pub(crate) fn silu_backward<T: Scalar>(x: &[T], g: &[T], id: usize, sink: &mut GradSink<'_, T>) {
    if let Some(d) = sink.get(id) {
        for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
            let s = sigmoid(x);
            *d = *d + g * s * (T::one() + x * (T::one() - s));
        }
    }
}

pub(crate) fn softmax_backward<T: Scalar>(
    y: &[T],
    g: &[T],
    outer: usize,
    len: usize,
    inner: usize,
    id: usize,
    sink: &mut GradSink<'_, T>,
) {
    let Some(d) = sink.get(id) else { return };
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot = (0..len).fold(T::zero(), |acc, j| acc + g[base + j * inner] * y[base + j * inner]);
            for j in 0..len {
                let at = base + j * inner;
                d[at] = d[at] + y[at] * (g[at] - dot);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<T: Scalar>(
    gain: &[T],
    g: &[T],
    xhat: &[T],
    rstd: &[T],
    cols: usize,
    ix: usize,
    igain: usize,
    ibias: usize,
    sink: &mut GradSink<'_, T>,
) {
    if let Some(dg) = sink.get(igain) {
        for (grow, hrow) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
            for c in 0..cols {
                dg[c] = dg[c] + grow[c] * hrow[c];
            }
        }
    }
    if let Some(db) = sink.get(ibias) {
        for grow in g.chunks_exact(cols) {
            db.iter_mut().zip(grow).for_each(|(d, &g)| *d = *d + g);
        }
    }
    if let Some(dx) = sink.get(ix) {
        let n = T::of(cols as f64);
        let mut dh = vec![T::zero(); cols];
        for (r, &inv) in rstd.iter().enumerate() {
            let grow = &g[r * cols..(r + 1) * cols];
            let hrow = &xhat[r * cols..(r + 1) * cols];
            for c in 0..cols {
                dh[c] = grow[c] * gain[c];
            }
            let mean_dh = dh.iter().copied().sum::<T>() / n;
            let mean_dh_h = dh.iter().zip(hrow).fold(T::zero(), |acc, (&a, &b)| acc + a * b) / n;
            let drow = &mut dx[r * cols..(r + 1) * cols];
            for c in 0..cols {
                drow[c] = drow[c] + inv * (dh[c] - mean_dh - hrow[c] * mean_dh_h);
            }
        }
    }
}

pub(crate) fn rope_backward<T: Scalar>(g: &[T], table: &[T], head_dim: usize, id: usize, sink: &mut GradSink<'_, T>) {
    let Some(d) = sink.get(id) else { return };
    let n = table.len() / head_dim;
    let width = g.len() / n;
    for r in 0..n {
        let t = &table[r * head_dim..(r + 1) * head_dim];
        for h in 0..width / head_dim {
            let base = r * width + h * head_dim;
            for p in 0..head_dim / 2 {
                let (re, im) = (t[2 * p], t[2 * p + 1]);
                let (g0, g1) = (g[base + 2 * p], g[base + 2 * p + 1]);
                d[base + 2 * p] = d[base + 2 * p] + g0 * re + g1 * im;
                d[base + 2 * p + 1] = d[base + 2 * p + 1] - g0 * im + g1 * re;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn softmax_example() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(Tensor::from_f64([2usize], &[0.0, 3f64.ln()]).unwrap());
        let y = tp.softmax(x, 0).unwrap();
        let d = tp.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant_and_stable() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(Tensor::from_f64([1usize, 3], &[1000.0, 1001.0, 999.0]).unwrap());
        let y = tp.softmax(x, 1).unwrap();
        let s: f64 = tp.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(tp.value(y).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn layer_norm_example() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(Tensor::from_f64([1usize, 2], &[1.0, 3.0]).unwrap());
        let g = tp.constant(Tensor::ones([2usize]));
        let b = tp.constant(Tensor::zeros([2usize]));
        let y = tp.layer_norm(x, g, b, 0.0).unwrap();
        assert_eq!(tp.value(y).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn rope_with_unit_table_is_identity() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(Tensor::from_f64([1usize, 4], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let table: Vec<f64> = vec![1.0, 0.0, 1.0, 0.0];
        let y = tp.rope(x, table.into(), 4).unwrap();
        assert_eq!(tp.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn focal_loss_vanishes_for_confident_correct_predictions() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(Tensor::from_f64([2usize], &[40.0, -40.0]).unwrap());
        let l = tp.focal_loss(x, &[1.0, 0.0], 2.0, 4.0).unwrap();
        assert!(tp.value(l).item() < 1e-15);
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(Tensor::from_f64([1usize], &[0.0]).unwrap());
        let l = tp.bce_with_logits(x, &[1.0]).unwrap();
        assert!((tp.value(l).item() - 2f64.ln()).abs() < 1e-12);
    }
}
