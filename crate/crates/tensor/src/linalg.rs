//! Matrix products, convolutions and multi-head attention.

use crate::array::Tensor;
use crate::error::{Result, TensorError};
use crate::scalar::{gemm, Scalar, Strides};
use crate::tape::{ConvGeom, GradSink, Op, Tape, Var};

impl<T: Scalar> Tape<T> {
    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            Strides::row_major(k),
            self.value(b).data(),
            Strides::row_major(n),
            T::zero(),
            &mut out,
            Strides::row_major(n),
        );
        self.add_flops(2 * (m * k * n) as u64);
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0, m, k, n }))
    }

    /// Cross-correlation of `x: [c_in,h,w]` with `w: [c_out,c_in,k,k]`,
    /// optional per-channel `bias: [c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(TensorError::mismatch("conv2d", &sx, &sw));
        }
        if stride == 0 {
            return Err(TensorError::Config("conv2d stride must be >= 1".into()));
        }
        let kernel = sw[2];
        let (ph, pw) = (sx[1] + 2 * padding, sx[2] + 2 * padding);
        if kernel > ph || kernel > pw {
            return Err(TensorError::mismatch("conv2d (kernel larger than padded input)", &sx, &sw));
        }
        let geom = ConvGeom {
            c_in: sx[0],
            c_out: sw[0],
            in_h: sx[1],
            in_w: sx[2],
            kernel,
            stride,
            padding,
            out_h: (ph - kernel) / stride + 1,
            out_w: (pw - kernel) / stride + 1,
        };
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(TensorError::mismatch("conv2d bias", self.shape(b), &[geom.c_out]));
            }
        }
        let cols = im2col(self.value(x).data(), &geom);
        let rows = geom.c_in * kernel * kernel;
        let positions = geom.out_h * geom.out_w;
        let mut out = vec![T::zero(); geom.c_out * positions];
        gemm(
            geom.c_out,
            rows,
            positions,
            T::one(),
            self.value(w).data(),
            Strides::row_major(rows),
            &cols,
            Strides::row_major(positions),
            T::zero(),
            &mut out,
            Strides::row_major(positions),
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (row, &bias) in out.chunks_exact_mut(positions).zip(bv) {
                row.iter_mut().for_each(|v| *v = *v + bias);
            }
        }
        self.add_flops(2 * (geom.c_out * rows * positions) as u64);
        let value = Tensor::new([geom.c_out, geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: bias.map(|b| b.0),
                geom,
                cols,
            },
        ))
    }

    /// Transposed convolution of `x: [c_in,h,w]` with `w: [c_in,c_out,k,k]`,
    /// no padding. Output is `[c_out, (h-1)*stride+k, (w-1)*stride+k]`; the
    /// operator is the adjoint of `conv2d` with the same kernel and stride.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sx[0] || sw[2] != sw[3] {
            return Err(TensorError::mismatch("transposed_conv2d", &sx, &sw));
        }
        if stride == 0 {
            return Err(TensorError::Config("transposed_conv2d stride must be >= 1".into()));
        }
        let kernel = sw[2];
        // Geometry of the forward convolution this operator is the adjoint of:
        // it maps the (large) output back to the (small) input.
        let geom = ConvGeom {
            c_in: sw[1],
            c_out: sx[0],
            in_h: (sx[1] - 1) * stride + kernel,
            in_w: (sx[2] - 1) * stride + kernel,
            kernel,
            stride,
            padding: 0,
            out_h: sx[1],
            out_w: sx[2],
        };
        let rows = geom.c_in * kernel * kernel;
        let positions = geom.out_h * geom.out_w;
        let mut cols = vec![T::zero(); rows * positions];
        // cols = Wᵀ · x, with W viewed as [c_in_x, rows].
        gemm(
            rows,
            geom.c_out,
            positions,
            T::one(),
            self.value(w).data(),
            Strides::transposed(rows),
            self.value(x).data(),
            Strides::row_major(positions),
            T::zero(),
            &mut cols,
            Strides::row_major(positions),
        );
        let mut out = vec![T::zero(); geom.c_in * geom.in_h * geom.in_w];
        col2im_add(&cols, &geom, &mut out);
        self.add_flops(2 * (geom.c_out * rows * positions) as u64);
        let value = Tensor::new([geom.c_in, geom.in_h, geom.in_w], out)?;
        Ok(self.push(value, Op::ConvTranspose2d { x: x.0, w: w.0, geom }))
    }

    /// Multi-head scaled dot-product attention,
    /// `softmax(q·kᵀ/√d_head)·v` per head, heads splitting the last axis.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 2 || sk.len() != 2 || sk != sv || sq[1] != sk[1] {
            return Err(TensorError::mismatch("attention", &sq, &sk));
        }
        let (nq, nk, d) = (sq[0], sk[0], sq[1]);
        if nk == 0 {
            return Err(TensorError::invalid("attention", &sk, "needs at least one key"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Config(format!(
                "attention: width {d} not divisible by {heads} heads"
            )));
        }
        let dims = AttnDims { heads, nq, nk, d };
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut out = vec![T::zero(); nq * d];
        for h in 0..heads {
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            gemm(
                nq,
                dh,
                nk,
                scale,
                &qv[h * dh..],
                Strides::row_major(d),
                &kv[h * dh..],
                Strides::transposed(d),
                T::zero(),
                p,
                Strides::row_major(nk),
            );
            for row in p.chunks_exact_mut(nk) {
                crate::nn::softmax_in_place(row);
            }
            gemm(
                nq,
                nk,
                dh,
                T::one(),
                p,
                Strides::row_major(nk),
                &vv[h * dh..],
                Strides::row_major(d),
                T::zero(),
                &mut out[h * dh..],
                Strides::row_major(d),
            );
        }
        self.add_flops(4 * (nq * nk * d) as u64);
        let value = Tensor::new([nq, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads: dims.heads,
                nq,
                nk,
                d,
                probs,
            },
        ))
    }
}

#[derive(Clone, Copy)]
pub(crate) struct AttnDims {
    pub heads: usize,
    pub nq: usize,
    pub nk: usize,
    pub d: usize,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_backward<T: Scalar>(
    a: &[T],
    b: &[T],
    g: &[T],
    m: usize,
    k: usize,
    n: usize,
    ia: usize,
    ib: usize,
    sink: &mut GradSink<'_, T>,
) {
    if let Some(da) = sink.get(ia) {
        // da += g · bᵀ
        gemm(
            m,
            n,
            k,
            T::one(),
            g,
            Strides::row_major(n),
            b,
            Strides::transposed(n),
            T::one(),
            da,
            Strides::row_major(k),
        );
    }
    if let Some(db) = sink.get(ib) {
        // db += aᵀ · g
        gemm(
            k,
            m,
            n,
            T::one(),
            a,
            Strides::transposed(k),
            g,
            Strides::row_major(n),
            T::one(),
            db,
            Strides::row_major(n),
        );
    }
}

/// Unfolds `x: [c_in,h,w]` into `[c_in*k*k, out_h*out_w]` patches.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let k = g.kernel;
    let positions = g.out_h * g.out_w;
    let mut cols = vec![T::zero(); g.c_in * k * k * positions];
    for c in 0..g.c_in {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst[oy * g.out_w + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds patch columns back, summing overlaps.
pub(crate) fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let k = g.kernel;
    let positions = g.out_h * g.out_w;
    for c in 0..g.c_in {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    w: &[T],
    g: &[T],
    cols: &[T],
    geom: &ConvGeom,
    ix: usize,
    iw: usize,
    ib: Option<usize>,
    sink: &mut GradSink<'_, T>,
) {
    let rows = geom.c_in * geom.kernel * geom.kernel;
    let positions = geom.out_h * geom.out_w;
    if let Some(dw) = sink.get(iw) {
        gemm(
            geom.c_out,
            positions,
            rows,
            T::one(),
            g,
            Strides::row_major(positions),
            cols,
            Strides::transposed(positions),
            T::one(),
            dw,
            Strides::row_major(rows),
        );
    }
    if let Some(ib) = ib {
        if let Some(db) = sink.get(ib) {
            for (d, row) in db.iter_mut().zip(g.chunks_exact(positions)) {
                *d = *d + row.iter().copied().sum::<T>();
            }
        }
    }
    if let Some(dx) = sink.get(ix) {
        let mut dcols = vec![T::zero(); rows * positions];
        gemm(
            rows,
            geom.c_out,
            positions,
            T::one(),
            w,
            Strides::transposed(rows),
            g,
            Strides::row_major(positions),
            T::zero(),
            &mut dcols,
            Strides::row_major(positions),
        );
        col2im_add(&dcols, geom, dx);
    }
}

pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &[T],
    geom: &ConvGeom,
    ix: usize,
    iw: usize,
    sink: &mut GradSink<'_, T>,
) {
    let rows = geom.c_in * geom.kernel * geom.kernel;
    let positions = geom.out_h * geom.out_w;
    let gcols = im2col(g, geom);
    if let Some(dx) = sink.get(ix) {
        gemm(
            geom.c_out,
            rows,
            positions,
            T::one(),
            w,
            Strides::row_major(rows),
            &gcols,
            Strides::row_major(positions),
            T::one(),
            dx,
            Strides::row_major(positions),
        );
    }
    if let Some(dw) = sink.get(iw) {
        gemm(
            geom.c_out,
            positions,
            rows,
            T::one(),
            x,
            Strides::row_major(positions),
            &gcols,
            Strides::transposed(positions),
            T::one(),
            dw,
            Strides::row_major(rows),
        );
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    g: &[T],
    probs: &[T],
    dims: AttnDims,
    ids: [usize; 3],
    sink: &mut GradSink<'_, T>,
) {
    let AttnDims { heads, nq, nk, d } = dims;
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut ds_all = vec![T::zero(); heads * nq * nk];
    for h in 0..heads {
        let p = &probs[h * nq * nk..(h + 1) * nq * nk];
        let ds = &mut ds_all[h * nq * nk..(h + 1) * nq * nk];
        // dP = dO · Vᵀ
        gemm(
            nq,
            dh,
            nk,
            T::one(),
            &g[h * dh..],
            Strides::row_major(d),
            &v[h * dh..],
            Strides::transposed(d),
            T::zero(),
            ds,
            Strides::row_major(nk),
        );
        for (drow, prow) in ds.chunks_exact_mut(nk).zip(p.chunks_exact(nk)) {
            let dot = drow.iter().zip(prow).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            for (dv, &pv) in drow.iter_mut().zip(prow) {
                *dv = pv * (*dv - dot);
            }
        }
    }
    if let Some(dv) = sink.get(ids[2]) {
        for h in 0..heads {
            let p = &probs[h * nq * nk..(h + 1) * nq * nk];
            gemm(
                nk,
                nq,
                dh,
                T::one(),
                p,
                Strides::transposed(nk),
                &g[h * dh..],
                Strides::row_major(d),
                T::one(),
                &mut dv[h * dh..],
                Strides::row_major(d),
            );
        }
    }
    if let Some(dq) = sink.get(ids[0]) {
        for h in 0..heads {
            let ds = &ds_all[h * nq * nk..(h + 1) * nq * nk];
            gemm(
                nq,
                nk,
                dh,
                scale,
                ds,
                Strides::row_major(nk),
                &k[h * dh..],
                Strides::row_major(d),
                T::one(),
                &mut dq[h * dh..],
                Strides::row_major(d),
            );
        }
    }
    if let Some(dk) = sink.get(ids[1]) {
        for h in 0..heads {
            let ds = &ds_all[h * nq * nk..(h + 1) * nq * nk];
            gemm(
                nk,
                nq,
                dh,
                scale,
                ds,
                Strides::transposed(nk),
                &q[h * dh..],
                Strides::row_major(d),
                T::one(),
                &mut dk[h * dh..],
                Strides::row_major(d),
            );
        }
    }
}
