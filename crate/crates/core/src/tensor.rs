//! Dense row-major `f32` tensors and the primitive kernels everything else
//! is assembled from. Every reduction runs in a fixed order and accumulates
//! in `f64`, so results are reproducible bit-for-bit across runs.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Work (in multiply-accumulates) above which matmul rows are spread over
/// the rayon pool. Rows are independent, so the split never changes a bit.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::Invalid(format!("zero extent in shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {len} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        Self {
            shape,
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn randn(shape: impl Into<Vec<usize>>, std: f32, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| std * rng.normal())
    }

    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f32, hi: f32, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| rng.uniform(lo, hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the leading axis of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing extents.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at2(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.shape[1] + j]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::dim(op, format!("expected 2-D, got {:?}", self.shape))),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.check_same(other, "add")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f32]) -> Result<()> {
        if self.cols() != bias.len() {
            return Err(Error::dim(
                "add_row_vector",
                format!("{} columns vs bias of {}", self.cols(), bias.len()),
            ));
        }
        for row in self.data.chunks_mut(bias.len()) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Column sums of a 2-D tensor (fixed row order).
    pub fn sum_rows(&self) -> Vec<f32> {
        let c = self.cols();
        let mut acc = vec![0.0f64; c];
        for row in self.data.chunks(c) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v as f64;
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Gathers the given rows (in order) into a new 2-D tensor.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            shape: vec![idx.len(), c],
            data,
        }
    }

    fn check_same(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }
}

/// Row-major `m×k · k×n` with `f64` accumulation. Products of two `f32`
/// values are exact in `f64`, so the only rounding is the accumulation and
/// the final narrowing.
pub(crate) fn gemm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let mut out = vec![0.0f32; m * n];
    let row = |(i, out_row): (usize, &mut [f32])| {
        let mut acc = vec![0.0f64; n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let av = av as f64;
            let b_row = &b64[p * n..(p + 1) * n];
            for (acc_j, &bv) in acc.iter_mut().zip(b_row) {
                *acc_j += av * bv;
            }
        }
        for (o, v) in out_row.iter_mut().zip(acc) {
            *o = v as f32;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("{m}x{k} · {k2}x{n}: inner extents differ"),
        ));
    }
    Tensor::new([m, n], gemm(&a.data, &b.data, m, k, n))
}

/// Gradients of `out = a · b`: `(dA, dB) = (dO·Bᵀ, Aᵀ·dO)`.
pub fn matmul_backward(dout: &Tensor, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let da = matmul(dout, &b.transpose()?)?;
    let db = matmul(&a.transpose()?, dout)?;
    Ok((da, db))
}

fn axis_strides(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim("softmax", format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Max-shifted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_strides(&x.shape, axis)?;
    let mut out = x.clone();
    for o in 0..outer {
        for i in 0..inner {
            let at = |t: usize| o * len * inner + t * inner + i;
            let max = (0..len).map(|t| x.data[at(t)]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for t in 0..len {
                let e = ((x.data[at(t)] - max) as f64).exp();
                out.data[at(t)] = e as f32;
                sum += e;
            }
            for t in 0..len {
                let e = out.data[at(t)] as f64;
                out.data[at(t)] = (e / sum) as f32;
            }
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of softmax given its output `y`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor, axis: usize) -> Result<Tensor> {
    y.check_same(dy, "softmax_backward")?;
    let (outer, len, inner) = axis_strides(&y.shape, axis)?;
    let mut dx = dy.clone();
    for o in 0..outer {
        for i in 0..inner {
            let at = |t: usize| o * len * inner + t * inner + i;
            let dot: f64 = (0..len).map(|t| y.data[at(t)] as f64 * dy.data[at(t)] as f64).sum();
            for t in 0..len {
                let yv = y.data[at(t)] as f64;
                dx.data[at(t)] = (yv * (dy.data[at(t)] as f64 - dot)) as f32;
            }
        }
    }
    Ok(dx)
}

pub const LAYERNORM_EPS: f32 = 1e-5;

/// Values kept by [`layernorm`] for its backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    width: usize,
}

/// Normalizes each row over the last axis, then applies `gain`/`bias`.
pub fn layernorm(x: &Tensor, gain: &[f32], bias: &[f32], eps: f32) -> Result<(Tensor, LayerNormCache)> {
    let width = *x.shape.last().unwrap_or(&0);
    if gain.len() != width || bias.len() != width {
        return Err(Error::dim(
            "layernorm",
            format!("width {width}, gain {}, bias {}", gain.len(), bias.len()),
        ));
    }
    let mut out = x.clone();
    let rows = x.len() / width;
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(rows);
    for (r, row) in x.data.chunks(width).enumerate() {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / width as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / width as f64;
        let is = 1.0 / (var + eps as f64).sqrt();
        inv_std.push(is);
        for j in 0..width {
            let h = (row[j] as f64 - mean) * is;
            xhat.push(h);
            out.data[r * width + j] = (h * gain[j] as f64 + bias[j] as f64) as f32;
        }
    }
    Ok((out, LayerNormCache { xhat, inv_std, width }))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layernorm_backward(cache: &LayerNormCache, gain: &[f32], dy: &Tensor) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    let w = cache.width;
    if dy.len() != cache.xhat.len() || gain.len() != w {
        return Err(Error::dim("layernorm_backward", "cache/upstream mismatch"));
    }
    let mut dx = dy.clone();
    let mut dgain = vec![0.0f64; w];
    let mut dbias = vec![0.0f64; w];
    for (r, drow) in dy.data.chunks(w).enumerate() {
        let xh = &cache.xhat[r * w..(r + 1) * w];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..w {
            let g = drow[j] as f64;
            dgain[j] += g * xh[j];
            dbias[j] += g;
            let dh = g * gain[j] as f64;
            mean_d += dh;
            mean_dx += dh * xh[j];
        }
        mean_d /= w as f64;
        mean_dx /= w as f64;
        for j in 0..w {
            let dh = drow[j] as f64 * gain[j] as f64;
            dx.data[r * w + j] = (cache.inv_std[r] * (dh - mean_d - xh[j] * mean_dx)) as f32;
        }
    }
    let narrow = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect();
    Ok((dx, narrow(dgain), narrow(dbias)))
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact (erf-based) GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| (v as f64 * normal_cdf(v as f64)) as f32)
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    x.check_same(dy, "gelu_backward")?;
    let mut dx = dy.clone();
    for (d, &v) in dx.data.iter_mut().zip(&x.data) {
        let v = v as f64;
        *d = (*d as f64 * (normal_cdf(v) + v * normal_pdf(v))) as f32;
    }
    Ok(dx)
}

fn dwconv_dims(x: &Tensor, kernels: &Tensor) -> Result<(usize, usize, usize)> {
    let (h, w, c) = match x.shape[..] {
        [h, w, c] => (h, w, c),
        _ => return Err(Error::dim("dwconv3x3", format!("input {:?}", x.shape))),
    };
    if kernels.shape != [3, 3, c] {
        return Err(Error::dim(
            "dwconv3x3",
            format!("kernels {:?} for {c} channels", kernels.shape),
        ));
    }
    Ok((h, w, c))
}

/// Depthwise 3×3 cross-correlation with one cell of zero padding, on an
/// `h×w×c` grid with `3×3×c` kernels.
pub fn dwconv3x3(x: &Tensor, kernels: &Tensor) -> Result<Tensor> {
    let (h, w, c) = dwconv_dims(x, kernels)?;
    let mut out = Tensor::zeros([h, w, c]);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for di in 0..3 {
                    for dj in 0..3 {
                        let (si, sj) = (i + di, j + dj);
                        if si < 1 || sj < 1 || si > h || sj > w {
                            continue;
                        }
                        let xv = x.data[((si - 1) * w + (sj - 1)) * c + ch];
                        acc += xv as f64 * kernels.data[(di * 3 + dj) * c + ch] as f64;
                    }
                }
                out.data[(i * w + j) * c + ch] = acc as f32;
            }
        }
    }
    Ok(out)
}

/// Returns `(dx, dkernels)`.
pub fn dwconv3x3_backward(x: &Tensor, kernels: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    let (h, w, c) = dwconv_dims(x, kernels)?;
    x.check_same(dy, "dwconv3x3_backward")?;
    let mut dx = vec![0.0f64; x.len()];
    let mut dk = vec![0.0f64; 9 * c];
    for i in 0..h {
        for j in 0..w {
            for di in 0..3 {
                for dj in 0..3 {
                    let (si, sj) = (i + di, j + dj);
                    if si < 1 || sj < 1 || si > h || sj > w {
                        continue;
                    }
                    let src = ((si - 1) * w + (sj - 1)) * c;
                    let dst = (i * w + j) * c;
                    let kof = (di * 3 + dj) * c;
                    for ch in 0..c {
                        let g = dy.data[dst + ch] as f64;
                        dx[src + ch] += g * kernels.data[kof + ch] as f64;
                        dk[kof + ch] += g * x.data[src + ch] as f64;
                    }
                }
            }
        }
    }
    let narrow = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect();
    Ok((Tensor::new([h, w, c], narrow(dx))?, Tensor::new([3, 3, c], narrow(dk))?))
}
