//! Dense row-major tensors and the value-level kernels the model is built on.
//!
//! Everything is stored as `f64`. The autodiff layer in [`crate::autodiff`]
//! wraps these kernels; inference hot paths call them directly.

use std::fmt;

use crate::error::{Error, Result};

/// Row-major dense array of `f64` with a fixed shape.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&s| s > 0), "zero extent in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        let mut t = Self::zeros(shape);
        for i in 0..n {
            t.data[i] = f(i);
        }
        t
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(
            vec![rows.len(), cols],
            rows.iter().flatten().copied().collect(),
        )
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(format!("expected a matrix, got {:?}", self.shape))),
        }
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.last_dim();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self, other, "elementwise")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }
}

pub(crate) fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// `a[m,k] · b[k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dims {k} and {k2} differ"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[m,k] · b[n,k]ᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul_nt inner dims {k} and {k2} differ"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b.data[j * k..(j + 1) * k]);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[k,m]ᵀ · b[k,n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul_tn inner dims {k} and {k2} differ"
        )));
    }
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b.data[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a.data[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x[1..k] · w[k,n]` for a single row, written into `out`.
pub fn vecmat(x: &[f64], w: &Tensor, out: &mut [f64]) {
    let n = w.last_dim();
    debug_assert_eq!(x.len() * n, w.numel());
    out.iter_mut().for_each(|o| *o = 0.0);
    for (p, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(&w.data[p * n..(p + 1) * n]) {
            *o += xv * wv;
        }
    }
}

/// Softmax along `axis`, stable under constant shifts.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape.len() {
        return Err(Error::dim(format!(
            "softmax axis {axis} out of range for {:?}",
            x.shape
        )));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let n = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| x.data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                let e = (x.data[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[idx(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// In-place softmax of a single row.
pub fn softmax_slice(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Normalizes each contiguous block of `block` values to zero mean and unit
/// (biased) variance. Returns the normalized values and `1/sqrt(var+eps)` per
/// block.
pub fn normalize_blocks(x: &Tensor, block: usize, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    if block == 0 || x.numel() % block != 0 {
        return Err(Error::dim(format!(
            "block size {block} does not divide {} values",
            x.numel()
        )));
    }
    let mut out = vec![0.0; x.numel()];
    let mut inv_std = Vec::with_capacity(x.numel() / block);
    for (src, dst) in x.data.chunks(block).zip(out.chunks_mut(block)) {
        let r = normalize_slice(src, dst, eps);
        inv_std.push(r);
    }
    Ok((Tensor::new(x.shape.clone(), out)?, inv_std))
}

/// Two-pass mean/variance normalization of one block; returns `1/sqrt(var+eps)`.
pub fn normalize_slice(src: &[f64], dst: &mut [f64], eps: f64) -> f64 {
    let n = src.len() as f64;
    let mean = src.iter().sum::<f64>() / n;
    let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (s - mean) * inv;
    }
    inv
}

/// Layer normalization over the last axis with per-feature affine.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::dim("layer_norm affine size differs from feature dim"));
    }
    let (mut y, _) = normalize_blocks(x, d, eps)?;
    for row in y.data.chunks_mut(d) {
        for ((v, g), b) in row.iter_mut().zip(&gamma.data).zip(&beta.data) {
            *v = *v * g + b;
        }
    }
    Ok(y)
}

/// Group normalization of `x[L, C]`: each row's features split into `groups`
/// contiguous groups, each normalized independently, then a per-feature affine.
pub fn group_norm(
    x: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let c = x.last_dim();
    if groups == 0 || c % groups != 0 {
        return Err(Error::dim(format!(
            "{c} features not divisible into {groups} groups"
        )));
    }
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::dim("group_norm affine size differs from feature dim"));
    }
    let (mut y, _) = normalize_blocks(x, c / groups, eps)?;
    for row in y.data.chunks_mut(c) {
        for ((v, g), b) in row.iter_mut().zip(&gamma.data).zip(&beta.data) {
            *v = *v * g + b;
        }
    }
    Ok(y)
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return Err(Error::dim(format!(
            "kernel {kernel} does not fit input {input} with padding {pad}"
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// Geometry of a 2D convolution, shared by the forward and backward kernels.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<(Self, usize)> {
        let (c_in, h, w) = match x.shape[..] {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::dim(format!("conv2d input must be [C,H,W], got {:?}", x.shape))),
        };
        let (c_out, kc, kh, kw) = match kernels.shape[..] {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => {
                return Err(Error::dim(format!(
                    "conv2d kernels must be [Cout,Cin,kh,kw], got {:?}",
                    kernels.shape
                )))
            }
        };
        if kc != c_in {
            return Err(Error::dim(format!(
                "conv2d kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        let ho = conv_out_size(h, kh, stride, pad)?;
        let wo = conv_out_size(w, kw, stride, pad)?;
        Ok((
            Self {
                c_in,
                h,
                w,
                kh,
                kw,
                stride,
                pad,
                ho,
                wo,
            },
            c_out,
        ))
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

/// Unfolds `x[C,H,W]` into columns `[C·kh·kw, Ho·Wo]` (zero padding).
pub fn im2col(x: &Tensor, g: &ConvGeom) -> Tensor {
    let cols = g.ho * g.wo;
    let mut out = vec![0.0; g.patch_len() * cols];
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let orow = &mut out[r * cols..(r + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x.data[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            orow[oy * g.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor {
        shape: vec![g.patch_len(), cols],
        data: out,
    }
}

/// Adjoint of [`im2col`]: folds columns back, summing overlaps.
pub fn col2im(cols: &Tensor, g: &ConvGeom) -> Tensor {
    let n = g.ho * g.wo;
    let mut out = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let crow = &cols.data[r * n..(r + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut out[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += crow[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    Tensor {
        shape: vec![g.c_in, g.h, g.w],
        data: out,
    }
}

/// 2D cross-correlation of `x[C_in,H,W]` with `kernels[C_out,C_in,kh,kw]`.
pub fn conv2d(x: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (g, c_out) = ConvGeom::new(x, kernels, stride, pad)?;
    let cols = im2col(x, &g);
    let wmat = Tensor {
        shape: vec![c_out, g.patch_len()],
        data: kernels.data.clone(),
    };
    matmul(&wmat, &cols)?.reshape(&[c_out, g.ho, g.wo])
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x·σ(x)`, the swish gate activation.
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}
