//! Shift (sign × power-of-two) and Add (binarized, accumulate-only)
//! reparameterizations of dense weights, with their kernels.
//!
//! Weight matrices are stored `in_dim × out_dim` so a layer computes
//! `x · W` for row-major activations `x`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    PerMatrix,
    /// One scale per contiguous block of `cols / heads` columns.
    PerHead {
        heads: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    pub p_min: i32,
    pub p_max: i32,
    pub scale_mode: ScaleMode,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            p_min: -15,
            p_max: 15,
            scale_mode: ScaleMode::PerMatrix,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p_min >= self.p_max {
            return Err(Error::Invalid(format!(
                "p_min ({}) must be below p_max ({})",
                self.p_min, self.p_max
            )));
        }
        // Exponents are stored as i8 and added to the f64 exponent field.
        if self.p_min < -100 || self.p_max > 100 {
            return Err(Error::Invalid("shift exponent range beyond ±100".into()));
        }
        Ok(())
    }
}

/// Weight `s · 2^P` per entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShiftLinear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// +1 or -1.
    pub sign: Vec<i8>,
    pub exponent: Vec<i8>,
}

/// Weight `gamma · b` with `b ∈ {-1, +1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct AddLinear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub sign: Vec<i8>,
    pub gamma: f32,
}

fn sign_of(v: f32) -> i8 {
    if v < 0.0 {
        -1
    } else {
        1
    }
}

/// `round(log2 |w|)` clamped to the configured range; zero maps to `p_min`.
pub fn shift_exponent(w: f32, cfg: &QuantConfig) -> i32 {
    if w == 0.0 {
        return cfg.p_min;
    }
    let p = w.abs().log2().round();
    if p.is_nan() {
        return cfg.p_min;
    }
    (p as i64).clamp(cfg.p_min as i64, cfg.p_max as i64) as i32
}

pub fn quantize_shift(w: &Tensor, cfg: &QuantConfig) -> Result<ShiftLinear> {
    let (in_dim, out_dim) = w.dims2("quantize_shift")?;
    Ok(ShiftLinear {
        in_dim,
        out_dim,
        sign: w.data().iter().map(|&v| sign_of(v)).collect(),
        exponent: w.data().iter().map(|&v| shift_exponent(v, cfg) as i8).collect(),
    })
}

impl ShiftLinear {
    /// Dense `s · 2^P`, exact in `f32` for exponents within ±126.
    pub fn reconstruct(&self) -> Tensor {
        let data = self
            .sign
            .iter()
            .zip(&self.exponent)
            .map(|(&s, &p)| s as f32 * 2f32.powi(p as i32))
            .collect();
        Tensor::new([self.in_dim, self.out_dim], data).expect("consistent dims")
    }

    pub fn exponent_range(&self) -> Option<(i8, i8)> {
        let lo = self.exponent.iter().copied().min()?;
        let hi = self.exponent.iter().copied().max()?;
        Some((lo, hi))
    }
}

/// Multiplies `v` by `±2^p` by editing its `f64` sign and exponent bits.
/// Every finite `f32` widened to `f64` is a normal number far from the
/// exponent limits, so the edit is exact.
#[inline]
fn shift_f64(v: f64, sign_mask: u64, exp_delta: i64) -> f64 {
    let bits = v.to_bits();
    let exp = (bits >> 52) & 0x7ff;
    if exp == 0 || exp == 0x7ff {
        let w = f64::from_bits(sign_mask | 1f64.to_bits()) * 2f64.powi(exp_delta as i32);
        return v * w;
    }
    f64::from_bits(bits.wrapping_add((exp_delta << 52) as u64) ^ sign_mask)
}

/// `x · (s · 2^P)` realized as sign flips and exponent adds, accumulated in
/// the same order as [`tensor::matmul`]. The result is bit-identical to a
/// dense matmul against [`ShiftLinear::reconstruct`].
pub fn shift_forward(x: &Tensor, layer: &ShiftLinear) -> Result<Tensor> {
    let (m, k) = x.dims2("shift_forward")?;
    if k != layer.in_dim {
        return Err(Error::dim(
            "shift_forward",
            format!("input width {k} vs layer in_dim {}", layer.in_dim),
        ));
    }
    let n = layer.out_dim;
    let codes: Vec<(u64, i64)> = layer
        .sign
        .iter()
        .zip(&layer.exponent)
        .map(|(&s, &p)| (if s < 0 { 1u64 << 63 } else { 0 }, p as i64))
        .collect();
    let mut out = vec![0.0f32; m * n];
    let xd = x.data();
    let row = |(i, out_row): (usize, &mut [f32])| {
        let mut acc = vec![0.0f64; n];
        for (p, &xv) in xd[i * k..(i + 1) * k].iter().enumerate() {
            let xv = xv as f64;
            for (a, &(mask, e)) in acc.iter_mut().zip(&codes[p * n..(p + 1) * n]) {
                *a += shift_f64(xv, mask, e);
            }
        }
        for (o, v) in out_row.iter_mut().zip(acc) {
            *o = v as f32;
        }
    };
    use rayon::prelude::*;
    if m * k * n >= 1 << 16 && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    Tensor::new([m, n], out)
}

/// Straight-through backward: gradients of a dense layer evaluated at the
/// reconstructed weights. Returns `(dX, dW_dense)`.
pub fn shift_backward(dout: &Tensor, x: &Tensor, layer: &ShiftLinear) -> Result<(Tensor, Tensor)> {
    tensor::matmul_backward(dout, x, &layer.reconstruct())
}

/// Sign codes (`sign(0) = +1`) and mean-absolute-value scales.
#[derive(Clone, Debug, PartialEq)]
pub struct Binarized {
    pub codes: Tensor,
    /// One entry for per-matrix scaling, one per head otherwise.
    pub gammas: Vec<f32>,
}

pub fn binarize(x: &Tensor, mode: ScaleMode) -> Result<Binarized> {
    if x.is_empty() {
        return Err(Error::Invalid("binarize of an empty tensor".into()));
    }
    let codes = x.map(|v| sign_of(v) as f32);
    let gammas = match mode {
        ScaleMode::PerMatrix => {
            let s: f64 = x.data().iter().map(|v| v.abs() as f64).sum();
            vec![(s / x.len() as f64) as f32]
        }
        ScaleMode::PerHead { heads } => {
            let cols = x.cols();
            if heads == 0 || !cols.is_multiple_of(heads) {
                return Err(Error::dim(
                    "binarize",
                    format!("{cols} columns not divisible into {heads} heads"),
                ));
            }
            let dk = cols / heads;
            let mut sums = vec![0.0f64; heads];
            for row in x.data().chunks(cols) {
                for (h, chunk) in row.chunks(dk).enumerate() {
                    sums[h] += chunk.iter().map(|v| v.abs() as f64).sum::<f64>();
                }
            }
            let count = (x.rows() * dk) as f64;
            sums.into_iter().map(|s| (s / count) as f32).collect()
        }
    };
    Ok(Binarized { codes, gammas })
}

impl AddLinear {
    pub fn reconstruct(&self) -> Tensor {
        let data = self.sign.iter().map(|&s| s as f32 * self.gamma).collect();
        Tensor::new([self.in_dim, self.out_dim], data).expect("consistent dims")
    }
}

pub fn quantize_add(w: &Tensor) -> Result<AddLinear> {
    let (in_dim, out_dim) = w.dims2("quantize_add")?;
    let b = binarize(w, ScaleMode::PerMatrix)?;
    let gamma = if b.gammas[0] > 0.0 { b.gammas[0] } else { 1.0 };
    Ok(AddLinear {
        in_dim,
        out_dim,
        sign: b.codes.data().iter().map(|&v| v as i8).collect(),
        gamma,
    })
}

/// Signed accumulation of `x` under `b`, scaled once by `gamma` per output.
pub fn add_matmul(x: &Tensor, layer: &AddLinear) -> Result<Tensor> {
    let (m, k) = x.dims2("add_matmul")?;
    if k != layer.in_dim {
        return Err(Error::dim(
            "add_matmul",
            format!("input width {k} vs layer in_dim {}", layer.in_dim),
        ));
    }
    let n = layer.out_dim;
    let gamma = layer.gamma as f64;
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0.0f64; n];
    for row in x.data().chunks(k) {
        acc.fill(0.0);
        for (p, &xv) in row.iter().enumerate() {
            let xv = xv as f64;
            for (a, &s) in acc.iter_mut().zip(&layer.sign[p * n..(p + 1) * n]) {
                if s > 0 {
                    *a += xv;
                } else {
                    *a -= xv;
                }
            }
        }
        out.extend(acc.iter().map(|&a| (a * gamma) as f32));
    }
    Tensor::new([m, n], out)
}

/// `codes · m` for a 0/1 code matrix: each output row is the sum of the rows
/// of `m` whose code is set. Accumulation only.
pub fn select_accumulate(codes: &[u8], rows: usize, m: &Tensor) -> Result<Tensor> {
    let (k, n) = m.dims2("select_accumulate")?;
    if codes.len() != rows * k {
        return Err(Error::dim(
            "select_accumulate",
            format!("{} codes for {rows}x{k}", codes.len()),
        ));
    }
    let mut out = Vec::with_capacity(rows * n);
    let mut acc = vec![0.0f64; n];
    for code_row in codes.chunks(k) {
        acc.fill(0.0);
        for (p, &c) in code_row.iter().enumerate() {
            if c != 0 {
                for (a, &v) in acc.iter_mut().zip(m.row(p)) {
                    *a += v as f64;
                }
            }
        }
        out.extend(acc.iter().map(|&a| a as f32));
    }
    Tensor::new([rows, n], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReparamTarget {
    Shift,
    Add,
}

#[derive(Clone, Debug, PartialEq)]
pub enum QuantLayer {
    Shift(ShiftLinear),
    Add(AddLinear),
}

impl QuantLayer {
    pub fn reconstruct(&self) -> Tensor {
        match self {
            QuantLayer::Shift(l) => l.reconstruct(),
            QuantLayer::Add(l) => l.reconstruct(),
        }
    }
}

/// A quantized layer together with the dense shadow copy that STE
/// finetuning updates.
#[derive(Clone, Debug)]
pub struct Reparameterized {
    pub layer: QuantLayer,
    pub shadow: Tensor,
}

pub fn reparam_linear(dense_w: &Tensor, target: ReparamTarget, cfg: &QuantConfig) -> Result<Reparameterized> {
    cfg.validate()?;
    let layer = match target {
        ReparamTarget::Shift => QuantLayer::Shift(quantize_shift(dense_w, cfg)?),
        ReparamTarget::Add => QuantLayer::Add(quantize_add(dense_w)?),
    };
    Ok(Reparameterized {
        layer,
        shadow: dense_w.clone(),
    })
}
