//! Multi-head attention: softmax `(QKᵀ)V` form and the kernelized `Q(KᵀV)`
//! form, optionally with binarized Q/K so that both token-mixing products
//! reduce to accumulations. In the linear forms a depthwise 3×3 convolution
//! over the token grid runs on V in parallel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Linear, LinearMode, Module};
use crate::moe::MoeLayer;
use crate::param::{join, Param, Params};
use crate::quant::{self, ScaleMode};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

/// Offset added by the ReLU feature map so features stay strictly positive.
pub const FEATURE_EPS: f32 = 1e-6;
pub const DEFAULT_EPS_NORM: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttnMode {
    Softmax,
    Linear,
    LinearBinary,
}

impl AttnMode {
    pub fn is_linear(self) -> bool {
        !matches!(self, AttnMode::Softmax)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub dim: usize,
    pub mode: AttnMode,
    pub eps_norm: f32,
    /// Parallel DWConv branch on V (linear modes only).
    pub dwconv: bool,
}

impl AttentionConfig {
    pub fn new(dim: usize, heads: usize, mode: AttnMode) -> Result<Self> {
        let cfg = Self {
            heads,
            dim,
            mode,
            eps_norm: DEFAULT_EPS_NORM,
            dwconv: mode.is_linear(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!(
                "model dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Copies the `n × dk` block of image `img`, head `head` out of a
/// `(images·n) × d` activation.
fn head_block(m: &Tensor, img: usize, n: usize, head: usize, dk: usize) -> Tensor {
    let d = m.cols();
    let mut out = Vec::with_capacity(n * dk);
    for t in 0..n {
        let row = &m.data()[(img * n + t) * d..];
        out.extend_from_slice(&row[head * dk..(head + 1) * dk]);
    }
    Tensor::new([n, dk], out).expect("non-empty block")
}

fn add_head_block(dst: &mut Tensor, src: &Tensor, img: usize, n: usize, head: usize) {
    let d = dst.cols();
    let dk = src.cols();
    for t in 0..n {
        let row = &mut dst.data_mut()[(img * n + t) * d..];
        for (o, &v) in row[head * dk..(head + 1) * dk].iter_mut().zip(src.row(t)) {
            *o += v;
        }
    }
}

/// Softmax attention for one head: `softmax(q·kᵀ/√dk)·v`. Returns the output
/// and the attention probabilities.
pub fn softmax_head(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let dk = q.cols();
    let scores = tensor::matmul(q, &k.transpose()?)?.scale(1.0 / (dk as f32).sqrt());
    let probs = tensor::softmax(&scores, 1)?;
    Ok((tensor::matmul(&probs, v)?, probs))
}

fn softmax_head_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &Tensor,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let scale = 1.0 / (q.cols() as f32).sqrt();
    let (dprobs, dv) = tensor::matmul_backward(dout, probs, v)?;
    let dscores = tensor::softmax_backward(probs, &dprobs, 1)?.scale(scale);
    let (dq, dkt) = tensor::matmul_backward(&dscores, q, &k.transpose()?)?;
    Ok((dq, dkt.transpose()?, dv))
}

/// Intermediate products of one kernelized head, kept in f64.
#[derive(Clone, Debug)]
struct LinearHead {
    /// `fkᵀ v`, row-major `dk × dv`.
    kv: Vec<f64>,
    /// Column sums of `fk`.
    ksum: Vec<f64>,
    num: Vec<f64>,
    den: Vec<f64>,
}

/// Kernelized attention with nonnegative features:
/// `out_i = (fq_i · (fkᵀ v)) / (fq_i · Σ_t fk_t + eps)`.
pub fn linear_head(fq: &Tensor, fk: &Tensor, v: &Tensor, eps: f32) -> Result<Tensor> {
    Ok(linear_head_parts(fq, fk, v, eps)?.0)
}

fn linear_head_parts(fq: &Tensor, fk: &Tensor, v: &Tensor, eps: f32) -> Result<(Tensor, LinearHead)> {
    let (n, dk) = fq.dims2("linear_head")?;
    let (m, dv) = v.dims2("linear_head")?;
    if fk.shape() != [m, dk] || fq.cols() != dk {
        return Err(Error::dim(
            "linear_head",
            format!("q {:?}, k {:?}, v {:?}", fq.shape(), fk.shape(), v.shape()),
        ));
    }
    let mut kv = vec![0.0f64; dk * dv];
    let mut ksum = vec![0.0f64; dk];
    for t in 0..m {
        let vr = v.row(t);
        for (a, &f) in fk.row(t).iter().enumerate() {
            let f = f as f64;
            ksum[a] += f;
            for (o, &x) in kv[a * dv..(a + 1) * dv].iter_mut().zip(vr) {
                *o += f * x as f64;
            }
        }
    }
    let mut num = vec![0.0f64; n * dv];
    let mut den = vec![eps as f64; n];
    for i in 0..n {
        let row = &mut num[i * dv..(i + 1) * dv];
        for (a, &f) in fq.row(i).iter().enumerate() {
            let f = f as f64;
            den[i] += f * ksum[a];
            for (o, &x) in row.iter_mut().zip(&kv[a * dv..(a + 1) * dv]) {
                *o += f * x;
            }
        }
    }
    let out: Vec<f32> = num.iter().enumerate().map(|(j, &x)| (x / den[j / dv]) as f32).collect();
    Ok((Tensor::new([n, dv], out)?, LinearHead { kv, ksum, num, den }))
}

/// Returns gradients with respect to `(fq, fk, v)`.
fn linear_head_backward(
    fq: &Tensor,
    fk: &Tensor,
    v: &Tensor,
    parts: &LinearHead,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, dk) = fq.dims2("linear_head_backward")?;
    let (m, dv) = v.dims2("linear_head_backward")?;
    // dnum = dout / den, dden = -Σ dout·num / den²
    let mut dnum = vec![0.0f64; n * dv];
    let mut dden = vec![0.0f64; n];
    for i in 0..n {
        let dn = parts.den[i];
        let mut acc = 0.0f64;
        for j in 0..dv {
            let g = dout.data()[i * dv + j] as f64;
            acc += g * parts.num[i * dv + j];
            dnum[i * dv + j] = g / dn;
        }
        dden[i] = -acc / (dn * dn);
    }
    let mut dfq = vec![0.0f64; n * dk];
    let mut dkv = vec![0.0f64; dk * dv];
    let mut dksum = vec![0.0f64; dk];
    for i in 0..n {
        let g = &dnum[i * dv..(i + 1) * dv];
        for a in 0..dk {
            let kvr = &parts.kv[a * dv..(a + 1) * dv];
            dfq[i * dk + a] = g.iter().zip(kvr).map(|(x, y)| x * y).sum::<f64>() + dden[i] * parts.ksum[a];
            let f = fq.data()[i * dk + a] as f64;
            dksum[a] += dden[i] * f;
            for (o, &x) in dkv[a * dv..(a + 1) * dv].iter_mut().zip(g) {
                *o += f * x;
            }
        }
    }
    // kv = fkᵀ v  ⇒  dfk = v · dkvᵀ + dksum, dv = fk · dkv
    let mut dfk = vec![0.0f32; m * dk];
    let mut dvv = vec![0.0f32; m * dv];
    for t in 0..m {
        let vr = v.row(t);
        for a in 0..dk {
            let s: f64 = vr
                .iter()
                .zip(&dkv[a * dv..(a + 1) * dv])
                .map(|(&x, &y)| x as f64 * y)
                .sum();
            dfk[t * dk + a] = (s + dksum[a]) as f32;
        }
        for j in 0..dv {
            let s: f64 = (0..dk).map(|a| fk.data()[t * dk + a] as f64 * dkv[a * dv + j]).sum();
            dvv[t * dv + j] = s as f32;
        }
    }
    Ok((
        Tensor::new([n, dk], dfq.into_iter().map(|x| x as f32).collect())?,
        Tensor::new([m, dk], dfk)?,
        Tensor::new([m, dv], dvv)?,
    ))
}

/// ReLU-plus-epsilon feature map.
pub fn relu_features(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0) + FEATURE_EPS)
}

/// Binarized Q and K of one head-block: 0/1 codes `(sign + 1) / 2` and the
/// per-head mean-absolute scales.
#[derive(Clone, Debug)]
pub struct BinaryQk {
    pub q_codes: Vec<u8>,
    pub k_codes: Vec<u8>,
    pub q_gammas: Vec<f32>,
    pub k_gammas: Vec<f32>,
}

/// Binarizes `q` and `k` (each `n × d`) per head.
pub fn binarize_qk(q: &Tensor, k: &Tensor, heads: usize) -> Result<BinaryQk> {
    let mode = ScaleMode::PerHead { heads };
    let bq = quant::binarize(q, mode)?;
    let bk = quant::binarize(k, mode)?;
    let to_codes = |b: &Tensor| b.data().iter().map(|&v| u8::from(v > 0.0)).collect();
    Ok(BinaryQk {
        q_codes: to_codes(&bq.codes),
        k_codes: to_codes(&bk.codes),
        q_gammas: bq.gammas,
        k_gammas: bk.gammas,
    })
}

/// One head of binarized linear attention computed with accumulations
/// only; the folded `gamma_q · gamma_k` scale is applied once per output.
pub fn binary_head(q_codes: &[u8], k_codes: &[u8], gamma: f32, v: &Tensor, eps: f32) -> Result<Tensor> {
    let (n, dk) = v.dims2("binary_head")?;
    let mut kt = vec![0u8; dk * n];
    for t in 0..n {
        for a in 0..dk {
            kt[a * n + t] = k_codes[t * dk + a];
        }
    }
    let kv = quant::select_accumulate(&kt, dk, v)?;
    let ksum: Vec<u32> = (0..dk)
        .map(|a| kt[a * n..(a + 1) * n].iter().map(|&c| c as u32).sum())
        .collect();
    let num = quant::select_accumulate(q_codes, n, &kv)?;
    let mut out = num;
    for i in 0..n {
        let den: u32 = q_codes[i * dk..(i + 1) * dk]
            .iter()
            .zip(&ksum)
            .filter(|(&c, _)| c != 0)
            .map(|(_, &s)| s)
            .sum();
        let den = gamma as f64 * den as f64 + eps as f64;
        for o in out.row_mut(i) {
            *o = (gamma as f64 * *o as f64 / den) as f32;
        }
    }
    Ok(out)
}

/// Lays `n` token rows on a `⌈√n⌉ × ⌈√n⌉` grid, zero-filling missing cells.
pub fn grid_side(n: usize) -> usize {
    let mut s = (n as f64).sqrt() as usize;
    while s * s < n {
        s += 1;
    }
    s
}

fn to_grid(rows: &Tensor, side: usize) -> Tensor {
    let d = rows.cols();
    let mut data = vec![0.0f32; side * side * d];
    data[..rows.len()].copy_from_slice(rows.data());
    Tensor::new([side, side, d], data).expect("non-empty grid")
}

fn from_grid(grid: &Tensor, n: usize) -> Tensor {
    let d = grid.shape()[2];
    Tensor::new([n, d], grid.data()[..n * d].to_vec()).expect("non-empty rows")
}

/// A projection realized densely, as shift weights, or as an MoE of both.
#[derive(Clone, Debug)]
pub enum Projection {
    Linear(Linear),
    Moe(MoeLayer<Linear>),
}

impl Projection {
    pub fn mode(&self) -> LinearMode {
        match self {
            Projection::Linear(l) => l.mode(),
            Projection::Moe(_) => LinearMode::Moe,
        }
    }

    pub fn aux_loss(&self) -> f64 {
        match self {
            Projection::Linear(_) => 0.0,
            Projection::Moe(m) => m.aux_loss(),
        }
    }
}

impl Params for Projection {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            Projection::Linear(l) => l.visit_params(prefix, f),
            Projection::Moe(m) => m.visit_params(prefix, f),
        }
    }

    fn after_update(&mut self) {
        match self {
            Projection::Linear(l) => l.after_update(),
            Projection::Moe(m) => m.after_update(),
        }
    }
}

impl Module for Projection {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Projection::Linear(l) => l.forward(x, train),
            Projection::Moe(m) => m.forward(x, train),
        }
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        match self {
            Projection::Linear(l) => l.backward(dy),
            Projection::Moe(m) => m.backward(dy),
        }
    }
}

#[derive(Clone, Debug)]
enum HeadCache {
    Softmax { probs: Tensor },
    Linear { fq: Tensor, fk: Tensor, parts: LinearHead },
}

#[derive(Clone, Debug)]
struct AttnCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: Vec<HeadCache>,
    /// Per head-block STE gates for binarized Q/K: `gamma/2` inside the
    /// clipping window, else 0.
    ste: Option<(Tensor, Tensor)>,
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub cfg: AttentionConfig,
    /// Tokens per image; rows of the input come in image-major blocks.
    pub tokens: usize,
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub o: Projection,
    /// `3 × 3 × d` depthwise kernels.
    pub dw: Param,
    cache: Option<AttnCache>,
}

impl Attention {
    pub fn new(cfg: AttentionConfig, tokens: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let mut proj = || Projection::Linear(Linear::new(d, d, rng));
        Ok(Self {
            cfg,
            tokens,
            q: proj(),
            k: proj(),
            v: proj(),
            o: proj(),
            dw: Param::new(Tensor::zeros([3, 3, d])),
            cache: None,
        })
    }

    pub fn projections_mut(&mut self) -> [&mut Projection; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }

    pub fn projections(&self) -> [&Projection; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }

    pub fn aux_loss(&self) -> f64 {
        self.projections().iter().map(|p| p.aux_loss()).sum()
    }

    fn uses_dwconv(&self) -> bool {
        self.cfg.mode.is_linear() && self.cfg.dwconv
    }

    /// Token mixing on already-projected `q`, `k`, `v`.
    pub fn mix(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        Ok(self.mix_cached(q, k, v)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn mix_cached(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
    ) -> Result<(Tensor, Vec<HeadCache>, Option<(Tensor, Tensor)>)> {
        let n = self.tokens;
        let rows = q.rows();
        if !rows.is_multiple_of(n) || q.cols() != self.cfg.dim {
            return Err(Error::dim(
                "attention",
                format!("{rows}x{} input for {n} tokens of width {}", q.cols(), self.cfg.dim),
            ));
        }
        let images = rows / n;
        let (h, dk) = (self.cfg.heads, self.cfg.head_dim());
        let mut out = Tensor::zeros([rows, self.cfg.dim]);
        let mut caches = Vec::with_capacity(images * h);
        let mut ste = None;
        if self.cfg.mode == AttnMode::LinearBinary {
            ste = Some((Tensor::zeros(q.shape().to_vec()), Tensor::zeros(k.shape().to_vec())));
        }
        for img in 0..images {
            let qi = q.gather_rows(&(img * n..(img + 1) * n).collect::<Vec<_>>());
            let ki = k.gather_rows(&(img * n..(img + 1) * n).collect::<Vec<_>>());
            let bin = match self.cfg.mode {
                AttnMode::LinearBinary => Some(binarize_qk(&qi, &ki, h)?),
                _ => None,
            };
            for head in 0..h {
                let qh = head_block(q, img, n, head, dk);
                let kh = head_block(k, img, n, head, dk);
                let vh = head_block(v, img, n, head, dk);
                let (oh, cache) = match self.cfg.mode {
                    AttnMode::Softmax => {
                        let (oh, probs) = softmax_head(&qh, &kh, &vh)?;
                        (oh, HeadCache::Softmax { probs })
                    }
                    AttnMode::Linear => {
                        let fq = relu_features(&qh);
                        let fk = relu_features(&kh);
                        let (oh, parts) = linear_head_parts(&fq, &fk, &vh, self.cfg.eps_norm)?;
                        (oh, HeadCache::Linear { fq, fk, parts })
                    }
                    AttnMode::LinearBinary => {
                        let b = bin.as_ref().expect("binarized above");
                        let (gq, gk) = (b.q_gammas[head], b.k_gammas[head]);
                        let qc = head_codes(&b.q_codes, n, self.cfg.dim, head, dk);
                        let kc = head_codes(&b.k_codes, n, self.cfg.dim, head, dk);
                        let oh = binary_head(&qc, &kc, gq * gk, &vh, self.cfg.eps_norm)?;
                        // Backward treats the codes as features gamma·code.
                        let fq = codes_to_features(&qc, n, dk, gq);
                        let fk = codes_to_features(&kc, n, dk, gk);
                        let (_, parts) = linear_head_parts(&fq, &fk, &vh, self.cfg.eps_norm)?;
                        if let Some((sq, sk)) = ste.as_mut() {
                            add_head_block(sq, &ste_gate(&qh, gq), img, n, head);
                            add_head_block(sk, &ste_gate(&kh, gk), img, n, head);
                        }
                        (oh, HeadCache::Linear { fq, fk, parts })
                    }
                };
                add_head_block(&mut out, &oh, img, n, head);
                caches.push(cache);
            }
        }
        Ok((out, caches, ste))
    }

    fn dwconv_forward(&self, v: &Tensor) -> Result<Tensor> {
        let n = self.tokens;
        let side = grid_side(n);
        let mut out = Tensor::zeros(v.shape().to_vec());
        for img in 0..v.rows() / n {
            let rows = v.gather_rows(&(img * n..(img + 1) * n).collect::<Vec<_>>());
            let y = from_grid(&tensor::dwconv3x3(&to_grid(&rows, side), &self.dw.value)?, n);
            out.data_mut()[img * n * v.cols()..(img + 1) * n * v.cols()].copy_from_slice(y.data());
        }
        Ok(out)
    }

    fn dwconv_backward(&mut self, v: &Tensor, dy: &Tensor) -> Result<Tensor> {
        let n = self.tokens;
        let side = grid_side(n);
        let d = v.cols();
        let mut dv = Tensor::zeros(v.shape().to_vec());
        for img in 0..v.rows() / n {
            let idx: Vec<usize> = (img * n..(img + 1) * n).collect();
            let (dx, dk) = tensor::dwconv3x3_backward(
                &to_grid(&v.gather_rows(&idx), side),
                &self.dw.value,
                &to_grid(&dy.gather_rows(&idx), side),
            )?;
            self.dw.accumulate(dk.data());
            dv.data_mut()[img * n * d..(img + 1) * n * d].copy_from_slice(from_grid(&dx, n).data());
        }
        Ok(dv)
    }
}

fn head_codes(codes: &[u8], n: usize, d: usize, head: usize, dk: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(n * dk);
    for t in 0..n {
        out.extend_from_slice(&codes[t * d + head * dk..t * d + (head + 1) * dk]);
    }
    out
}

fn codes_to_features(codes: &[u8], n: usize, dk: usize, gamma: f32) -> Tensor {
    Tensor::new([n, dk], codes.iter().map(|&c| c as f32 * gamma).collect()).expect("non-empty")
}

/// Straight-through derivative of `gamma · (sign(x) + 1) / 2`, clipped to
/// `|x| ≤ 1`.
fn ste_gate(x: &Tensor, gamma: f32) -> Tensor {
    x.map(|v| if v.abs() <= 1.0 { gamma * 0.5 } else { 0.0 })
}

impl Params for Attention {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.q.visit_params(&join(prefix, "q"), f);
        self.k.visit_params(&join(prefix, "k"), f);
        self.v.visit_params(&join(prefix, "v"), f);
        self.o.visit_params(&join(prefix, "o"), f);
        f(&join(prefix, "dw"), &mut self.dw);
    }

    fn after_update(&mut self) {
        for p in self.projections_mut() {
            p.after_update();
        }
    }
}

impl Module for Attention {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let q = self.q.forward(x, train)?;
        let k = self.k.forward(x, train)?;
        let v = self.v.forward(x, train)?;
        let (mut mixed, heads, ste) = self.mix_cached(&q, &k, &v)?;
        if self.uses_dwconv() {
            mixed.add_assign(&self.dwconv_forward(&v)?)?;
        }
        let out = self.o.forward(&mixed, train)?;
        if train {
            self.cache = Some(AttnCache { q, k, v, heads, ste });
        }
        Ok(out)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("attention: backward called without a cached forward".into()))?;
        let dmix = self.o.backward(dy)?;
        let n = self.tokens;
        let (h, dk) = (self.cfg.heads, self.cfg.head_dim());
        let mut dq = Tensor::zeros(cache.q.shape().to_vec());
        let mut dk_t = Tensor::zeros(cache.k.shape().to_vec());
        let mut dv = Tensor::zeros(cache.v.shape().to_vec());
        for img in 0..cache.q.rows() / n {
            for head in 0..h {
                let hc = &cache.heads[img * h + head];
                let dout = head_block(&dmix, img, n, head, dk);
                let vh = head_block(&cache.v, img, n, head, dk);
                let (gq, gk, gv) = match hc {
                    HeadCache::Softmax { probs } => {
                        let qh = head_block(&cache.q, img, n, head, dk);
                        let kh = head_block(&cache.k, img, n, head, dk);
                        softmax_head_backward(&qh, &kh, &vh, probs, &dout)?
                    }
                    HeadCache::Linear { fq, fk, parts } => {
                        let (mut gq, mut gk, gv) = linear_head_backward(fq, fk, &vh, parts, &dout)?;
                        match &cache.ste {
                            None => {
                                let qh = head_block(&cache.q, img, n, head, dk);
                                let kh = head_block(&cache.k, img, n, head, dk);
                                relu_mask(&mut gq, &qh);
                                relu_mask(&mut gk, &kh);
                            }
                            Some((sq, sk)) => {
                                mul_in_place(&mut gq, &head_block(sq, img, n, head, dk));
                                mul_in_place(&mut gk, &head_block(sk, img, n, head, dk));
                            }
                        }
                        (gq, gk, gv)
                    }
                };
                add_head_block(&mut dq, &gq, img, n, head);
                add_head_block(&mut dk_t, &gk, img, n, head);
                add_head_block(&mut dv, &gv, img, n, head);
            }
        }
        if self.uses_dwconv() {
            let extra = self.dwconv_backward(&cache.v, &dmix)?;
            dv.add_assign(&extra)?;
        }
        let mut dx = self.q.backward(&dq)?;
        dx.add_assign(&self.k.backward(&dk_t)?)?;
        dx.add_assign(&self.v.backward(&dv)?)?;
        Ok(dx)
    }
}

fn relu_mask(g: &mut Tensor, pre: &Tensor) {
    for (gv, &x) in g.data_mut().iter_mut().zip(pre.data()) {
        if x <= 0.0 {
            *gv = 0.0;
        }
    }
}

fn mul_in_place(g: &mut Tensor, s: &Tensor) {
    for (gv, &x) in g.data_mut().iter_mut().zip(s.data()) {
        *gv *= x;
    }
}
