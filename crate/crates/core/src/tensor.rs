//! Dense row-major `f64` tensors and the numeric kernels the autodiff graph is built on.
//!
//! Image batches use NCHW layout. Convolutions are lowered to im2col + GEMM, with the
//! GEMM delegated to `ndarray` (single-threaded, fixed reduction order).

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        ensure!(
            shape.iter().product::<usize>() == data.len(),
            InvalidInput,
            "shape {:?} needs {} elements, got {}",
            shape,
            shape.iter().product::<usize>(),
            data.len()
        );
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Row `i` of the leading axis, as an owned tensor with the remaining shape.
    pub fn index_outer(&self, i: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        Tensor::from_parts(
            self.shape[1..].to_vec(),
            self.data[i * inner..(i + 1) * inner].to_vec(),
        )
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        ensure!(!items.is_empty(), InvalidInput, "cannot stack an empty list");
        let inner = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        for t in items {
            ensure!(
                t.shape == inner,
                InvalidInput,
                "stack shape mismatch: {:?} vs {:?}",
                t.shape,
                inner
            );
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn as_matrix(&self) -> ArrayView2<'_, f64> {
        assert_eq!(self.shape.len(), 2, "expected a matrix, got {:?}", self.shape);
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.data).expect("contiguous")
    }
}

/// Spatial geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad - kernel) / self.stride + 1
    }
}

pub(crate) fn add(a: &Tensor, b: &Tensor) -> Tensor {
    a.zip_map(b, |x, y| x + y)
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2, "matmul inner dims {} vs {}", k, k2);
    let mut out = vec![0.0; m * n];
    {
        let mut c = ArrayViewMut2::from_shape((m, n), &mut out).expect("contiguous");
        general_mat_mul(1.0, &a.as_matrix(), &b.as_matrix(), 0.0, &mut c);
    }
    Tensor::from_parts(vec![m, n], out)
}

pub(crate) fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

/// Lowers one CHW image to a `[C*k*k, Ho*Wo]` column matrix.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, geom: ConvGeom) -> (Vec<f64>, usize, usize) {
    let ho = geom.out_size(h, k);
    let wo = geom.out_size(w, k);
    let cols = ho * wo;
    let mut out = vec![0.0; c * k * k * cols];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oh in 0..ho {
                    let ih = (oh * geom.stride + ki) as isize - geom.pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src = &x[(ci * h + ih as usize) * w..(ci * h + ih as usize + 1) * w];
                    for ow in 0..wo {
                        let iw = (ow * geom.stride + kj) as isize - geom.pad as isize;
                        if iw >= 0 && iw < w as isize {
                            dst[oh * wo + ow] = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
    (out, ho, wo)
}

/// Scatter-adds a column matrix back into a CHW image (adjoint of [`im2col`]).
fn col2im(cols: &[f64], x: &mut [f64], c: usize, h: usize, w: usize, k: usize, geom: ConvGeom) {
    let ho = geom.out_size(h, k);
    let wo = geom.out_size(w, k);
    let ncols = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oh in 0..ho {
                    let ih = (oh * geom.stride + ki) as isize - geom.pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let base = (ci * h + ih as usize) * w;
                    for ow in 0..wo {
                        let iw = (ow * geom.stride + kj) as isize - geom.pad as isize;
                        if iw >= 0 && iw < w as isize {
                            x[base + iw as usize] += src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims(x: &[usize], w: &[usize]) -> (usize, usize, usize, usize, usize, usize) {
    assert_eq!(x.len(), 4, "conv input must be NCHW, got {:?}", x);
    assert_eq!(w.len(), 4, "conv weight must be OCKK, got {:?}", w);
    assert_eq!(x[1], w[1], "conv channel mismatch: input {:?}, weight {:?}", x, w);
    assert_eq!(w[2], w[3], "square kernels only");
    (x[0], x[1], x[2], x[3], w[0], w[2])
}

pub(crate) fn conv2d(x: &Tensor, w: &Tensor, geom: ConvGeom) -> Tensor {
    let (n, c, h, wd, o, k) = conv_dims(&x.shape, &w.shape);
    let ho = geom.out_size(h, k);
    let wo = geom.out_size(wd, k);
    let wmat = ArrayView2::from_shape((o, c * k * k), &w.data).expect("contiguous");
    let per_in = c * h * wd;
    let per_out = o * ho * wo;
    let mut out = vec![0.0; n * per_out];
    for b in 0..n {
        let (cols, _, _) = im2col(&x.data[b * per_in..(b + 1) * per_in], c, h, wd, k, geom);
        let cm = ArrayView2::from_shape((c * k * k, ho * wo), &cols).expect("contiguous");
        let mut dst = ArrayViewMut2::from_shape((o, ho * wo), &mut out[b * per_out..(b + 1) * per_out])
            .expect("contiguous");
        general_mat_mul(1.0, &wmat, &cm, 0.0, &mut dst);
    }
    Tensor::from_parts(vec![n, o, ho, wo], out)
}

/// Gradient of `conv2d` with respect to its input: maps `[N,O,Ho,Wo]` back to `in_shape`.
pub(crate) fn conv2d_transpose(g: &Tensor, w: &Tensor, geom: ConvGeom, in_shape: &[usize]) -> Tensor {
    let (n, c, h, wd, o, k) = conv_dims(in_shape, &w.shape);
    let ho = geom.out_size(h, k);
    let wo = geom.out_size(wd, k);
    assert_eq!(g.shape, vec![n, o, ho, wo], "conv transpose grad shape");
    let wmat = ArrayView2::from_shape((o, c * k * k), &w.data).expect("contiguous");
    let wt = wmat.t();
    let per_in = c * h * wd;
    let per_out = o * ho * wo;
    let mut out = vec![0.0; n * per_in];
    let mut cols = vec![0.0; c * k * k * ho * wo];
    for b in 0..n {
        let gm = ArrayView2::from_shape((o, ho * wo), &g.data[b * per_out..(b + 1) * per_out])
            .expect("contiguous");
        {
            let mut cm = ArrayViewMut2::from_shape((c * k * k, ho * wo), &mut cols).expect("contiguous");
            general_mat_mul(1.0, &wt, &gm, 0.0, &mut cm);
        }
        col2im(&cols, &mut out[b * per_in..(b + 1) * per_in], c, h, wd, k, geom);
    }
    Tensor::from_parts(in_shape.to_vec(), out)
}

/// Gradient of `conv2d` with respect to its weight, summed over the batch.
pub(crate) fn conv2d_weight_grad(x: &Tensor, g: &Tensor, geom: ConvGeom, w_shape: &[usize]) -> Tensor {
    let (n, c, h, wd, o, k) = conv_dims(&x.shape, w_shape);
    let ho = geom.out_size(h, k);
    let wo = geom.out_size(wd, k);
    assert_eq!(g.shape, vec![n, o, ho, wo], "conv weight grad shape");
    let per_in = c * h * wd;
    let per_out = o * ho * wo;
    let mut out = vec![0.0; o * c * k * k];
    for b in 0..n {
        let (cols, _, _) = im2col(&x.data[b * per_in..(b + 1) * per_in], c, h, wd, k, geom);
        let cm = ArrayView2::from_shape((c * k * k, ho * wo), &cols).expect("contiguous");
        let gm = ArrayView2::from_shape((o, ho * wo), &g.data[b * per_out..(b + 1) * per_out])
            .expect("contiguous");
        let mut dst = ArrayViewMut2::from_shape((o, c * k * k), &mut out).expect("contiguous");
        general_mat_mul(1.0, &gm, &cm.t(), 1.0, &mut dst);
    }
    Tensor::from_parts(w_shape.to_vec(), out)
}

/// Nearest-neighbour ×2 upsampling of an NCHW tensor.
pub(crate) fn upsample2(x: &Tensor) -> Tensor {
    let (nc, h, w) = (x.shape[0] * x.shape[1], x.shape[2], x.shape[3]);
    let mut out = vec![0.0; nc * 4 * h * w];
    for p in 0..nc {
        for i in 0..2 * h {
            for j in 0..2 * w {
                out[(p * 2 * h + i) * 2 * w + j] = x.data[(p * h + i / 2) * w + j / 2];
            }
        }
    }
    Tensor::from_parts(vec![x.shape[0], x.shape[1], 2 * h, 2 * w], out)
}

/// Sums non-overlapping 2×2 blocks (adjoint of [`upsample2`]).
pub(crate) fn sum_pool2(x: &Tensor) -> Tensor {
    let (nc, h, w) = (x.shape[0] * x.shape[1], x.shape[2], x.shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; nc * ho * wo];
    for p in 0..nc {
        for i in 0..h {
            for j in 0..w {
                out[(p * ho + i / 2) * wo + j / 2] += x.data[(p * h + i) * w + j];
            }
        }
    }
    Tensor::from_parts(vec![x.shape[0], x.shape[1], ho, wo], out)
}

/// Repeats a `[C]` vector along axis 1 of `shape` (`[N, C, ...]`).
pub(crate) fn broadcast_axis1(b: &Tensor, shape: &[usize]) -> Tensor {
    let c = shape[1];
    assert_eq!(b.len(), c, "broadcast_axis1 length");
    let inner: usize = shape[2..].iter().product();
    let mut out = Vec::with_capacity(shape.iter().product());
    for _ in 0..shape[0] {
        for &v in &b.data {
            out.extend(std::iter::repeat_n(v, inner));
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// Sums everything except axis 1, giving a `[C]` vector.
pub(crate) fn sum_to_axis1(x: &Tensor) -> Tensor {
    let c = x.shape[1];
    let inner: usize = x.shape[2..].iter().product();
    let mut out = vec![0.0; c];
    for n in 0..x.shape[0] {
        for (ci, acc) in out.iter_mut().enumerate() {
            let base = (n * c + ci) * inner;
            *acc += x.data[base..base + inner].iter().sum::<f64>();
        }
    }
    Tensor::from_parts(vec![c], out)
}

/// Sums each row of an `[R, D]` matrix.
pub(crate) fn row_sum(x: &Tensor) -> Tensor {
    let d = x.shape[1];
    Tensor::from_parts(
        vec![x.shape[0]],
        x.data.chunks(d).map(|r| r.iter().sum()).collect(),
    )
}

pub(crate) fn row_broadcast(x: &Tensor, d: usize) -> Tensor {
    let mut out = Vec::with_capacity(x.len() * d);
    for &v in &x.data {
        out.extend(std::iter::repeat_n(v, d));
    }
    Tensor::from_parts(vec![x.len(), d], out)
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn huber(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}
