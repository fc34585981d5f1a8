//! Dense row-major tensors and the convolution kernels used by the graph ops.
//!
//! Shapes are dynamic (`Vec<usize>`); the networks in this crate only ever use
//! rank 0 (scalars), rank 2 `(batch, features)` and rank 4 `(batch, channels,
//! height, width)`.
//!
//! Convolutions are im2col + GEMM. Batch items are independent, so forward and
//! input-gradient passes fan out over fixed-size batch chunks; weight
//! gradients are reduced chunk-by-chunk in a fixed order, which keeps every
//! result bit-identical across reruns regardless of thread scheduling.

use crate::scalar::Scalar;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Batch chunk size for parallel convolution kernels. Fixed (not derived from
/// the thread count) so reduction order never depends on the machine load.
const CONV_CHUNK: usize = 16;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Builds a tensor from raw data; panics if the element count mismatches.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of len {}", self.len());
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += alpha * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Self, alpha: T) {
        assert_eq!(self.shape, other.shape, "add_scaled shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn add_inplace(&mut self, other: &Self) {
        self.add_scaled(other, T::one());
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Self {
        assert!(!items.is_empty(), "stack of zero tensors");
        let inner = items[0].shape.clone();
        let mut shape = Vec::with_capacity(inner.len() + 1);
        shape.push(items.len());
        shape.extend_from_slice(&inner);
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        for item in items {
            assert_eq!(item.shape, inner, "stack shape mismatch");
            data.extend_from_slice(&item.data);
        }
        Tensor { shape, data }
    }

    /// Splits the leading axis back into per-item tensors.
    pub fn unstack(&self) -> Vec<Tensor<T>> {
        assert!(!self.shape.is_empty(), "unstack of rank-0 tensor");
        let n = self.shape[0];
        let inner: Vec<usize> = self.shape[1..].to_vec();
        let step = inner.iter().product::<usize>();
        (0..n)
            .map(|i| Tensor {
                shape: inner.clone(),
                data: self.data[i * step..(i + 1) * step].to_vec(),
            })
            .collect()
    }
}

/// Geometry of a stride-`s` convolution with square kernel `k` and padding `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Output size of the transposed convolution: `(in-1)*s - 2p + k`.
    pub fn out_size_transposed(&self, input: usize) -> usize {
        (input - 1) * self.stride + self.kernel - 2 * self.pad
    }
}

/// Unfolds one image `(c, h, w)` into a `(c*k*k, ho*wo)` column matrix.
fn im2col<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, g: ConvGeom, col: &mut [T]) {
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let cols = ho * wo;
    debug_assert_eq!(col.len(), c * g.kernel * g.kernel * cols);
    for ch in 0..c {
        let img_ch = &img[ch * h * w..(ch + 1) * h * w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = ((ch * g.kernel + ky) * g.kernel + kx) * cols;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = row + oy * wo;
                    if iy < 0 || iy >= h as isize {
                        col[out_row..out_row + wo].fill(T::zero());
                        continue;
                    }
                    let src = iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        col[out_row + ox] = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            img_ch[src + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a column matrix back into an image.
fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, g: ConvGeom, img: &mut [T]) {
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let cols = ho * wo;
    debug_assert_eq!(col.len(), c * g.kernel * g.kernel * cols);
    img.fill(T::zero());
    for ch in 0..c {
        let img_ch = &mut img[ch * h * w..(ch + 1) * h * w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = ((ch * g.kernel + ky) * g.kernel + kx) * cols;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            img_ch[dst + ix as usize] += col[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> (usize, usize, usize, usize, usize) {
    assert_eq!(x.rank(), 4, "conv input must be (n, c, h, w)");
    assert_eq!(w.rank(), 4, "conv weight must be rank 4");
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    assert_eq!(h, wd, "conv kernels assume square inputs");
    (n, c, h, wd, w.shape[0])
}

/// Forward convolution. `w` is `(c_out, c_in, k, k)`, `b` is `(c_out,)`.
pub fn conv2d_fwd<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, g: ConvGeom) -> Tensor<T> {
    let (n, c, h, wd, c_out) = conv_dims(x, w);
    assert_eq!(w.shape()[1], c, "conv weight c_in mismatch");
    let (ho, wo) = (g.out_size(h), g.out_size(wd));
    let cols = ho * wo;
    let k2 = c * g.kernel * g.kernel;
    let mut out = Tensor::zeros(&[n, c_out, ho, wo]);
    let in_step = c * h * wd;
    let out_step = c_out * cols;

    out.data
        .par_chunks_mut(out_step * CONV_CHUNK)
        .zip(x.data.par_chunks(in_step * CONV_CHUNK))
        .for_each(|(out_chunk, in_chunk)| {
            let mut col = vec![T::zero(); k2 * cols];
            for (out_img, in_img) in out_chunk
                .chunks_mut(out_step)
                .zip(in_chunk.chunks(in_step))
            {
                im2col(in_img, c, h, wd, g, &mut col);
                // out = W(c_out x k2) . col(k2 x cols)
                T::gemm(
                    c_out,
                    k2,
                    cols,
                    T::one(),
                    w.data(),
                    k2 as isize,
                    1,
                    &col,
                    cols as isize,
                    1,
                    T::zero(),
                    out_img,
                    cols as isize,
                    1,
                );
                for oc in 0..c_out {
                    let bias = b.data()[oc];
                    for v in &mut out_img[oc * cols..(oc + 1) * cols] {
                        *v += bias;
                    }
                }
            }
        });
    out
}

/// Gradients of [`conv2d_fwd`] with respect to input, weight and bias.
pub fn conv2d_bwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    g: ConvGeom,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, h, wd, c_out) = conv_dims(x, w);
    let (ho, wo) = (g.out_size(h), g.out_size(wd));
    let cols = ho * wo;
    let k2 = c * g.kernel * g.kernel;
    let in_step = c * h * wd;
    let out_step = c_out * cols;

    let mut gx = Tensor::zeros(x.shape());
    gx.data
        .par_chunks_mut(in_step * CONV_CHUNK)
        .zip(gy.data.par_chunks(out_step * CONV_CHUNK))
        .for_each(|(gx_chunk, gy_chunk)| {
            let mut gcol = vec![T::zero(); k2 * cols];
            for (gx_img, gy_img) in gx_chunk.chunks_mut(in_step).zip(gy_chunk.chunks(out_step)) {
                // gcol = W^T . gy
                T::gemm(
                    k2,
                    c_out,
                    cols,
                    T::one(),
                    w.data(),
                    1,
                    k2 as isize,
                    gy_img,
                    cols as isize,
                    1,
                    T::zero(),
                    &mut gcol,
                    cols as isize,
                    1,
                );
                col2im(&gcol, c, h, wd, g, gx_img);
            }
        });

    // Per-chunk weight/bias partials, reduced in fixed chunk order.
    let n_chunks = n.div_ceil(CONV_CHUNK);
    let partials: Vec<(Vec<T>, Vec<T>)> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let lo = ci * CONV_CHUNK;
            let hi = (lo + CONV_CHUNK).min(n);
            let mut gw = vec![T::zero(); c_out * k2];
            let mut gb = vec![T::zero(); c_out];
            let mut col = vec![T::zero(); k2 * cols];
            for i in lo..hi {
                let x_img = &x.data[i * in_step..(i + 1) * in_step];
                let gy_img = &gy.data[i * out_step..(i + 1) * out_step];
                im2col(x_img, c, h, wd, g, &mut col);
                // gw += gy(c_out x cols) . col^T(cols x k2)
                T::gemm(
                    c_out,
                    cols,
                    k2,
                    T::one(),
                    gy_img,
                    cols as isize,
                    1,
                    &col,
                    1,
                    cols as isize,
                    T::one(),
                    &mut gw,
                    k2 as isize,
                    1,
                );
                for oc in 0..c_out {
                    for &v in &gy_img[oc * cols..(oc + 1) * cols] {
                        gb[oc] += v;
                    }
                }
            }
            (gw, gb)
        })
        .collect();

    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[c_out]);
    for (pw, pb) in &partials {
        for (a, &b) in gw.data.iter_mut().zip(pw) {
            *a += b;
        }
        for (a, &b) in gb.data.iter_mut().zip(pb) {
            *a += b;
        }
    }
    (gx, gw, gb)
}

/// Forward transposed convolution. `w` is `(c_in, c_out, k, k)`, `b` is `(c_out,)`.
pub fn conv_transpose2d_fwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    g: ConvGeom,
) -> Tensor<T> {
    assert_eq!(x.rank(), 4, "conv_transpose input must be (n, c, h, w)");
    let (n, c_in, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    assert_eq!(w.shape()[0], c_in, "conv_transpose weight c_in mismatch");
    let c_out = w.shape()[1];
    let (ho, wo) = (g.out_size_transposed(h), g.out_size_transposed(wd));
    let cols = h * wd;
    let k2 = c_out * g.kernel * g.kernel;
    let in_step = c_in * cols;
    let out_step = c_out * ho * wo;

    let mut out = Tensor::zeros(&[n, c_out, ho, wo]);
    out.data
        .par_chunks_mut(out_step * CONV_CHUNK)
        .zip(x.data.par_chunks(in_step * CONV_CHUNK))
        .for_each(|(out_chunk, in_chunk)| {
            let mut col = vec![T::zero(); k2 * cols];
            for (out_img, in_img) in out_chunk
                .chunks_mut(out_step)
                .zip(in_chunk.chunks(in_step))
            {
                // col = W^T(k2 x c_in) . x(c_in x cols)
                T::gemm(
                    k2,
                    c_in,
                    cols,
                    T::one(),
                    w.data(),
                    1,
                    k2 as isize,
                    in_img,
                    cols as isize,
                    1,
                    T::zero(),
                    &mut col,
                    cols as isize,
                    1,
                );
                col2im(&col, c_out, ho, wo, g, out_img);
                for oc in 0..c_out {
                    let bias = b.data()[oc];
                    for v in &mut out_img[oc * ho * wo..(oc + 1) * ho * wo] {
                        *v += bias;
                    }
                }
            }
        });
    out
}

/// Gradients of [`conv_transpose2d_fwd`].
pub fn conv_transpose2d_bwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    g: ConvGeom,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c_in, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let c_out = w.shape()[1];
    let (ho, wo) = (g.out_size_transposed(h), g.out_size_transposed(wd));
    let cols = h * wd;
    let k2 = c_out * g.kernel * g.kernel;
    let in_step = c_in * cols;
    let out_step = c_out * ho * wo;

    let mut gx = Tensor::zeros(x.shape());
    gx.data
        .par_chunks_mut(in_step * CONV_CHUNK)
        .zip(gy.data.par_chunks(out_step * CONV_CHUNK))
        .for_each(|(gx_chunk, gy_chunk)| {
            let mut col = vec![T::zero(); k2 * cols];
            for (gx_img, gy_img) in gx_chunk.chunks_mut(in_step).zip(gy_chunk.chunks(out_step)) {
                im2col(gy_img, c_out, ho, wo, g, &mut col);
                // gx = W(c_in x k2) . col(k2 x cols)
                T::gemm(
                    c_in,
                    k2,
                    cols,
                    T::one(),
                    w.data(),
                    k2 as isize,
                    1,
                    &col,
                    cols as isize,
                    1,
                    T::zero(),
                    gx_img,
                    cols as isize,
                    1,
                );
            }
        });

    let n_chunks = n.div_ceil(CONV_CHUNK);
    let partials: Vec<(Vec<T>, Vec<T>)> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let lo = ci * CONV_CHUNK;
            let hi = (lo + CONV_CHUNK).min(n);
            let mut gw = vec![T::zero(); c_in * k2];
            let mut gb = vec![T::zero(); c_out];
            let mut col = vec![T::zero(); k2 * cols];
            for i in lo..hi {
                let x_img = &x.data[i * in_step..(i + 1) * in_step];
                let gy_img = &gy.data[i * out_step..(i + 1) * out_step];
                im2col(gy_img, c_out, ho, wo, g, &mut col);
                // gw += x(c_in x cols) . col^T(cols x k2)
                T::gemm(
                    c_in,
                    cols,
                    k2,
                    T::one(),
                    x_img,
                    cols as isize,
                    1,
                    &col,
                    1,
                    cols as isize,
                    T::one(),
                    &mut gw,
                    k2 as isize,
                    1,
                );
                for oc in 0..c_out {
                    for &v in &gy_img[oc * ho * wo..(oc + 1) * ho * wo] {
                        gb[oc] += v;
                    }
                }
            }
            (gw, gb)
        })
        .collect();

    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[c_out]);
    for (pw, pb) in &partials {
        for (a, &b) in gw.data.iter_mut().zip(pw) {
            *a += b;
        }
        for (a, &b) in gb.data.iter_mut().zip(pb) {
            *a += b;
        }
    }
    (gx, gw, gb)
}
