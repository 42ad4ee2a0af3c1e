//! Elementwise arithmetic, reductions and structural ops.

use crate::array::Tensor;
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{GradSink, Op, Tape, Var};

impl<T: Scalar> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub { a: a.0, b: b.0 }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x: x.0, c })
    }

    /// Adds `bias: [n]` to every row of `x: [.., n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(TensorError::mismatch("add_row", &sx, &sb));
        }
        let n = sb[0];
        let bv = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % n])
            .collect();
        let value = Tensor::new(sx, data)?;
        Ok(self.push(value, Op::AddRow { x: x.0, bias: bias.0 }))
    }

    /// Multiplies row `i` of `x: [m, n]` by `s[i]` (`s` has `m` elements).
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x).to_vec(), self.shape(s).to_vec());
        let m = ss.iter().product::<usize>();
        if sx.len() != 2 || sx[0] != m {
            return Err(TensorError::mismatch("scale_rows", &sx, &ss));
        }
        let n = sx[1];
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / n])
            .collect();
        let value = Tensor::new(sx, data)?;
        Ok(self.push(value, Op::ScaleRows { x: x.0, s: s.0 }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(total), Op::Sum { x: x.0 })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let total = v.data().iter().copied().sum::<T>() / T::of(v.numel().max(1) as f64);
        self.push(Tensor::scalar(total), Op::Mean { x: x.0 })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { x: x.0 }))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::invalid("transpose", &s, "expected rank 2"));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let value = Tensor::new([cols, rows], out)?;
        Ok(self.push(value, Op::Transpose { x: x.0, rows, cols }))
    }

    /// Selects rows of `x: [m, n]`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::invalid("gather_rows", &s, "expected rank 2"));
        }
        let (m, cols) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(TensorError::invalid("gather_rows", &s, format!("row {bad} out of range")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new([idx.len(), cols], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
                cols,
            },
        ))
    }

    /// Adds row `i` of `x` into row `idx[i]` of a zero `[rows_out, n]` tensor.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows_out: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != idx.len() {
            return Err(TensorError::mismatch("scatter_rows", &s, &[idx.len()]));
        }
        let cols = s[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows_out) {
            return Err(TensorError::invalid("scatter_rows", &s, format!("target row {bad} out of range")));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); rows_out * cols];
        for (r, &dst) in idx.iter().enumerate() {
            let drow = &mut out[dst * cols..(dst + 1) * cols];
            drow.iter_mut()
                .zip(&src[r * cols..(r + 1) * cols])
                .for_each(|(d, &v)| *d = *d + v);
        }
        let value = Tensor::new([rows_out, cols], out)?;
        Ok(self.push(
            value,
            Op::ScatterRows {
                x: x.0,
                idx: idx.to_vec(),
                cols,
            },
        ))
    }

    /// Stacks rank-2 tensors with equal width along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Config("concat_rows of nothing".into()));
        };
        let s0 = self.shape(first).to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != s0[1] {
                return Err(TensorError::mismatch("concat_rows", &s0, s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new([rows, s0[1]], out)?;
        Ok(self.push(
            value,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    /// Flat gather: `out[i] = x.flat[idx[i]]`, shaped `[idx.len()]`.
    pub fn gather_elems(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(TensorError::invalid(
                "gather_elems",
                self.shape(x),
                format!("element {bad} out of range"),
            ));
        }
        let out = idx.iter().map(|&i| src[i]).collect();
        let value = Tensor::new([idx.len()], out)?;
        Ok(self.push(
            value,
            Op::GatherElems {
                x: x.0,
                idx: idx.to_vec(),
            },
        ))
    }
}

pub(crate) fn scale_rows_backward<T: Scalar>(
    x: &[T],
    s: &[T],
    g: &[T],
    ix: usize,
    is: usize,
    sink: &mut GradSink<'_, T>,
) {
    let n = x.len() / s.len().max(1);
    if let Some(dx) = sink.get(ix) {
        for (i, (d, &g)) in dx.iter_mut().zip(g).enumerate() {
            *d = *d + g * s[i / n];
        }
    }
    if let Some(ds) = sink.get(is) {
        for (r, d) in ds.iter_mut().enumerate() {
            let dot = (0..n).fold(T::zero(), |acc, c| acc + g[r * n + c] * x[r * n + c]);
            *d = *d + dot;
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn scatter_then_gather_recovers_rows() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(Tensor::from_f64([2usize, 2], &[1., 2., 3., 4.]).unwrap());
        let s = tp.scatter_rows(x, &[3, 1], 4).unwrap();
        assert_eq!(tp.value(s).data(), &[0., 0., 3., 4., 0., 0., 1., 2.]);
        let g = tp.gather_rows(s, &[3, 1]).unwrap();
        assert_eq!(tp.value(g).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn scatter_accumulates_duplicates() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(Tensor::from_f64([2usize, 1], &[1., 2.]).unwrap());
        let s = tp.scatter_rows(x, &[0, 0], 1).unwrap();
        assert_eq!(tp.value(s).data(), &[3.]);
    }

    #[test]
    fn transpose_and_concat() {
        let mut tp = Tape::<f64>::new();
        let a = tp.constant(Tensor::from_f64([2usize, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let t = tp.transpose(a).unwrap();
        assert_eq!(tp.value(t).data(), &[1., 4., 2., 5., 3., 6.]);
        let c = tp.concat_rows(&[a, a]).unwrap();
        assert_eq!(tp.shape(c), &[4, 3]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tp = Tape::<f32>::new();
        let a = tp.constant(Tensor::zeros([2usize, 3]));
        let b = tp.constant(Tensor::zeros([3usize, 2]));
        assert!(tp.add(a, b).is_err());
        assert!(tp.gather_rows(a, &[2]).is_err());
    }
}
