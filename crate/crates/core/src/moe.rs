//! Heterogeneous mixture of experts with top-1 gating.
//!
//! Expert 0 is the multiplication (dense) expert and expert 1 the shift
//! expert. Balancing uses squared-coefficient-of-variation losses whose
//! per-expert terms are weighted by `alpha_i = lat_i / Σ lat`, so the
//! zero-loss assignment gives each expert a token share inversely
//! proportional to its latency.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Module;
use crate::param::{join, Param, Params};
use crate::rng::Rng;
use crate::tensor::{self, normal_cdf, normal_pdf, Tensor};

pub const DEFAULT_SIGMA: f64 = 0.1;
pub const DEFAULT_LAMBDA: f64 = 0.01;
const SCV_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoeConfig {
    /// Noise scale of the differentiable load proxy.
    pub sigma: f64,
    /// Weight of the auxiliary losses in the total loss.
    pub lambda: f64,
    /// Per-expert latencies, `[mult, shift]`.
    pub lat: Vec<f64>,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            lambda: DEFAULT_LAMBDA,
            lat: vec![3.0, 1.0],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Router {
    /// `d × E` gating matrix.
    pub weight: Param,
    pub sigma: f64,
    pub lambda: f64,
}

impl Router {
    pub fn new(weight: Tensor, sigma: f64, lambda: f64) -> Result<Self> {
        let (_, e) = weight.dims2("router")?;
        if e < 2 {
            return Err(Error::Invalid(format!("router needs at least 2 experts, got {e}")));
        }
        if !(sigma > 0.0) || !(lambda >= 0.0) {
            return Err(Error::Invalid(format!(
                "router needs sigma > 0 and lambda >= 0 (got {sigma}, {lambda})"
            )));
        }
        Ok(Self {
            weight: Param::new(weight),
            sigma,
            lambda,
        })
    }

    pub fn zeros(dim: usize, experts: usize, sigma: f64, lambda: f64) -> Result<Self> {
        Self::new(Tensor::zeros([dim, experts]), sigma, lambda)
    }

    pub fn experts(&self) -> usize {
        self.weight.value.shape()[1]
    }
}

/// Gate probabilities `p = softmax(x · W_g)` and the logits.
pub fn route(x: &Tensor, router: &Router) -> Result<(Tensor, Tensor)> {
    let (logits, e) = router_logits(x, router)?;
    let shape = [x.rows(), e];
    Ok((narrow(&shape, &softmax_rows(&logits, e)), narrow(&shape, &logits)))
}

/// `x · W_g` without narrowing to `f32`: gate values feed straight into
/// the expert outputs and the balancing losses.
fn router_logits(x: &Tensor, router: &Router) -> Result<(Vec<f64>, usize)> {
    let (n, d) = x.dims2("route")?;
    let (d2, e) = router.weight.value.dims2("route")?;
    if d != d2 {
        return Err(Error::dim("route", format!("token width {d} vs router {d2}")));
    }
    let w = router.weight.value.data();
    let mut out = vec![0.0f64; n * e];
    for t in 0..n {
        let acc = &mut out[t * e..(t + 1) * e];
        for (k, &xv) in x.row(t).iter().enumerate() {
            for (a, &wv) in acc.iter_mut().zip(&w[k * e..(k + 1) * e]) {
                *a += xv as f64 * wv as f64;
            }
        }
    }
    Ok((out, e))
}

/// Row softmax kept in `f64`.
fn softmax_rows(logits: &[f64], e: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(e) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &v in row {
            let x = (v - max).exp();
            sum += x;
            out.push(x);
        }
        for v in &mut out[start..] {
            *v /= sum;
        }
    }
    out
}

fn narrow(shape: &[usize], values: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), values.iter().map(|&v| v as f32).collect()).expect("same length")
}

#[derive(Clone, Debug, PartialEq)]
pub struct DispatchPlan {
    pub expert_of: Vec<usize>,
    pub gate_of: Vec<f64>,
    /// Token indices per expert, ascending.
    pub tokens: Vec<Vec<usize>>,
}

impl DispatchPlan {
    pub fn shares(&self) -> Vec<f64> {
        let n = self.expert_of.len().max(1) as f64;
        self.tokens.iter().map(|t| t.len() as f64 / n).collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.tokens.iter().map(Vec::len).collect()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_lowest<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 assignment; exact ties go to the lower expert index. `logits` only
/// fixes the expert count, the decision is taken on `p`.
pub fn dispatch(p: &Tensor, logits: &Tensor) -> DispatchPlan {
    let probs: Vec<f64> = p.data().iter().map(|&v| v as f64).collect();
    dispatch_rows(&probs, p.rows(), logits.cols())
}

fn dispatch_rows(probs: &[f64], n: usize, e: usize) -> DispatchPlan {
    let mut plan = DispatchPlan {
        expert_of: Vec::with_capacity(n),
        gate_of: Vec::with_capacity(n),
        tokens: vec![Vec::new(); e],
    };
    for t in 0..n {
        let row = &probs[t * e..(t + 1) * e];
        let best = argmax_lowest(row);
        plan.expert_of.push(best);
        plan.gate_of.push(row[best]);
        plan.tokens[best].push(t);
    }
    plan
}

/// Population variance over squared mean. The mean term is guarded by a
/// 1e-10 epsilon, so an all-zero input yields 0.
pub fn scv(values: &[f64]) -> f64 {
    scv_with_grad(values).0
}

fn scv_with_grad(values: &[f64]) -> (f64, Vec<f64>) {
    let e = values.len() as f64;
    let mean = values.iter().sum::<f64>() / e;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / e;
    let denom = mean * mean + SCV_EPS;
    let value = var / denom;
    let grad = values
        .iter()
        .map(|v| (2.0 * (v - mean) / e) / denom - value * (2.0 * mean / e) / denom)
        .collect();
    (value, grad)
}

/// `alpha_i = lat_i / Σ_j lat_j`.
pub fn latency_coefficients(lat: &[f64]) -> Result<Vec<f64>> {
    if lat.len() < 2 || lat.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(Error::Invalid(format!(
            "latencies must be positive and finite for at least 2 experts: {lat:?}"
        )));
    }
    let total: f64 = lat.iter().sum();
    Ok(lat.iter().map(|l| l / total).collect())
}

/// An auxiliary loss value and its gradient with respect to the input it
/// was computed from.
#[derive(Clone, Debug)]
pub struct AuxTerm {
    pub value: f64,
    pub grad: Tensor,
}

fn check_alpha(cols: usize, alpha: &[f64], op: &'static str) -> Result<()> {
    if cols != alpha.len() {
        return Err(Error::dim(
            op,
            format!("{cols} experts vs {} coefficients", alpha.len()),
        ));
    }
    Ok(())
}

/// `SCV({alpha_i · Σ_x p_i(x)})` with its gradient in `p`.
pub fn importance_loss(p: &Tensor, alpha: &[f64]) -> Result<AuxTerm> {
    let (n, e) = p.dims2("importance_loss")?;
    let probs: Vec<f64> = p.data().iter().map(|&v| v as f64).collect();
    importance_rows(&probs, n, e, alpha)
}

fn importance_rows(probs: &[f64], n: usize, e: usize, alpha: &[f64]) -> Result<AuxTerm> {
    check_alpha(e, alpha, "importance_loss")?;
    let mut mass = vec![0.0f64; e];
    for row in probs.chunks(e) {
        for (m, &v) in mass.iter_mut().zip(row) {
            *m += v;
        }
    }
    let weighted: Vec<f64> = mass.iter().zip(alpha).map(|(m, a)| m * a).collect();
    let (value, g) = scv_with_grad(&weighted);
    let per_expert: Vec<f32> = g.iter().zip(alpha).map(|(g, a)| (g * a) as f32).collect();
    let grad = Tensor::from_fn([n, e], |i| per_expert[i % e]);
    Ok(AuxTerm { value, grad })
}

/// Probability that expert `i` wins the top-1 race under Gaussian noise of
/// scale `sigma` on its logit: `Φ((ℓ_i − max_{j≠i} ℓ_j) / σ)`. Returns the
/// probabilities and, per entry, the index of the strongest competitor.
fn win_probabilities(logits: &[f64], e: usize, sigma: f64) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let n = logits.len() / e;
    let mut q = Vec::with_capacity(n * e);
    let mut z = Vec::with_capacity(n * e);
    let mut rival = Vec::with_capacity(n * e);
    for t in 0..n {
        let row = &logits[t * e..(t + 1) * e];
        for i in 0..e {
            let mut best = usize::MAX;
            for j in 0..e {
                if j != i && (best == usize::MAX || row[j] > row[best]) {
                    best = j;
                }
            }
            let zi = (row[i] - row[best]) / sigma;
            z.push(zi);
            q.push(normal_cdf(zi));
            rival.push(best);
        }
    }
    (q, z, rival)
}

/// `SCV({alpha_i · Σ_x q_i(x)})` with its gradient in the logits.
pub fn load_loss(logits: &Tensor, alpha: &[f64], sigma: f64) -> Result<AuxTerm> {
    let (n, e) = logits.dims2("load_loss")?;
    let raw: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    load_rows(&raw, n, e, alpha, sigma)
}

fn load_rows(logits: &[f64], n: usize, e: usize, alpha: &[f64], sigma: f64) -> Result<AuxTerm> {
    check_alpha(e, alpha, "load_loss")?;
    if !(sigma > 0.0) {
        return Err(Error::Invalid(format!("sigma must be positive, got {sigma}")));
    }
    let (q, z, rival) = win_probabilities(logits, e, sigma);
    let mut load = vec![0.0f64; e];
    for t in 0..n {
        for i in 0..e {
            load[i] += q[t * e + i];
        }
    }
    let weighted: Vec<f64> = load.iter().zip(alpha).map(|(l, a)| l * a).collect();
    let (value, g) = scv_with_grad(&weighted);
    let mut grad = vec![0.0f64; n * e];
    for t in 0..n {
        for i in 0..e {
            let k = t * e + i;
            let dq = g[i] * alpha[i] * normal_pdf(z[k]) / sigma;
            grad[k] += dq;
            grad[t * e + rival[k]] -= dq;
        }
    }
    Ok(AuxTerm {
        value,
        grad: Tensor::new([n, e], grad.into_iter().map(|v| v as f32).collect())?,
    })
}

/// Dense per-token win probabilities (for inspection).
pub fn load_probabilities(logits: &Tensor, sigma: f64) -> Tensor {
    let raw: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    let (q, _, _) = win_probabilities(&raw, logits.cols(), sigma);
    Tensor::new(logits.shape().to_vec(), q.into_iter().map(|v| v as f32).collect()).expect("same shape")
}

/// `L_cls + λ · (L_imp + L_load)`.
pub fn total_loss(l_cls: f64, l_imp: f64, l_load: f64, lambda: f64) -> f64 {
    l_cls + lambda * (l_imp + l_load)
}

/// Latency of an MoE layer when its experts run in parallel: the slowest
/// expert.
pub fn modularized_latency(experts: usize, measured: &[f64]) -> Result<f64> {
    if measured.len() != experts || measured.is_empty() {
        return Err(Error::dim(
            "modularized_latency",
            format!("{} measurements for {experts} experts", measured.len()),
        ));
    }
    Ok(measured.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AuxValues {
    pub importance: f64,
    pub load: f64,
}

#[derive(Clone, Debug)]
struct MoeCache {
    x: Tensor,
    p: Tensor,
    plan: DispatchPlan,
    expert_out: Vec<Option<Tensor>>,
    aux_grad_p: Option<Tensor>,
    aux_grad_logits: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct MoeLayer<E> {
    pub router: Router,
    pub experts: Vec<E>,
    pub lat: Vec<f64>,
    pub alpha: Vec<f64>,
    pub last_plan: Option<DispatchPlan>,
    pub last_aux: AuxValues,
    cache: Option<MoeCache>,
}

impl<E: Module> MoeLayer<E> {
    pub fn new(router: Router, experts: Vec<E>, lat: Vec<f64>) -> Result<Self> {
        if experts.len() != router.experts() || lat.len() != experts.len() {
            return Err(Error::dim(
                "moe",
                format!(
                    "{} experts, {} router outputs, {} latencies",
                    experts.len(),
                    router.experts(),
                    lat.len()
                ),
            ));
        }
        let alpha = latency_coefficients(&lat)?;
        Ok(Self {
            router,
            experts,
            lat,
            alpha,
            last_plan: None,
            last_aux: AuxValues::default(),
            cache: None,
        })
    }

    /// Replaces the latencies (and thus the balancing coefficients).
    pub fn set_latencies(&mut self, lat: Vec<f64>) -> Result<()> {
        if lat.len() != self.experts.len() {
            return Err(Error::dim("moe", "latency count differs from expert count"));
        }
        self.alpha = latency_coefficients(&lat)?;
        self.lat = lat;
        Ok(())
    }

    /// `λ · (L_imp + L_load)` from the last forward pass.
    pub fn aux_loss(&self) -> f64 {
        self.router.lambda * (self.last_aux.importance + self.last_aux.load)
    }
}

impl<E: Params> Params for MoeLayer<E> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "router.weight"), &mut self.router.weight);
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.visit_params(&join(prefix, &format!("expert{i}")), f);
        }
    }

    fn after_update(&mut self) {
        for e in &mut self.experts {
            e.after_update();
        }
    }
}

impl<E: Module> Module for MoeLayer<E> {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (logits, e) = router_logits(x, &self.router)?;
        let n = x.rows();
        let probs = softmax_rows(&logits, e);
        let p = narrow(&[n, e], &probs);
        let plan = dispatch_rows(&probs, n, e);
        let mut out: Option<Tensor> = None;
        let mut expert_out = Vec::with_capacity(self.experts.len());
        for (e, expert) in self.experts.iter_mut().enumerate() {
            let idx = &plan.tokens[e];
            if idx.is_empty() {
                expert_out.push(None);
                continue;
            }
            let ye = expert.forward(&x.gather_rows(idx), train)?;
            let width = ye.cols();
            let y = out.get_or_insert_with(|| Tensor::zeros([x.rows(), width]));
            if y.cols() != width {
                return Err(Error::dim("moe_forward", "experts disagree on output width"));
            }
            for (r, &t) in idx.iter().enumerate() {
                let g = plan.gate_of[t];
                for (o, &v) in y.row_mut(t).iter_mut().zip(ye.row(r)) {
                    *o = (g * v as f64) as f32;
                }
            }
            expert_out.push(Some(ye));
        }
        let out = out.ok_or_else(|| Error::Invalid("moe forward on zero tokens".into()))?;

        let imp = importance_rows(&probs, n, e, &self.alpha)?;
        let load = load_rows(&logits, n, e, &self.alpha, self.router.sigma)?;
        self.last_aux = AuxValues {
            importance: imp.value,
            load: load.value,
        };
        if train {
            let with_aux = self.router.lambda > 0.0;
            self.cache = Some(MoeCache {
                x: x.clone(),
                p,
                plan: plan.clone(),
                expert_out,
                aux_grad_p: with_aux.then_some(imp.grad),
                aux_grad_logits: with_aux.then_some(load.grad),
            });
        }
        self.last_plan = Some(plan);
        Ok(out)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("moe: backward called without a cached forward".into()))?;
        let (n, e) = cache.p.dims2("moe_backward")?;
        let mut dx = Tensor::zeros(cache.x.shape().to_vec());
        let mut dp = Tensor::zeros([n, e]);
        for (ei, expert) in self.experts.iter_mut().enumerate() {
            let idx = &cache.plan.tokens[ei];
            let Some(ye) = &cache.expert_out[ei] else {
                continue;
            };
            let mut dye = dy.gather_rows(idx);
            for (r, &t) in idx.iter().enumerate() {
                let g = cache.plan.gate_of[t] as f32;
                let dot: f64 = dy
                    .row(t)
                    .iter()
                    .zip(ye.row(r))
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                dp.row_mut(t)[ei] = dot as f32;
                for v in dye.row_mut(r) {
                    *v *= g;
                }
            }
            let dxe = expert.backward(&dye)?;
            for (r, &t) in idx.iter().enumerate() {
                for (d, &v) in dx.row_mut(t).iter_mut().zip(dxe.row(r)) {
                    *d += v;
                }
            }
        }
        let lambda = self.router.lambda as f32;
        if let Some(g) = &cache.aux_grad_p {
            dp.add_assign(&g.scale(lambda))?;
        }
        let mut dlogits = tensor::softmax_backward(&cache.p, &dp, 1)?;
        if let Some(g) = &cache.aux_grad_logits {
            dlogits.add_assign(&g.scale(lambda))?;
        }
        let (dx_router, dw) = tensor::matmul_backward(&dlogits, &cache.x, &self.router.weight.value)?;
        self.router.weight.accumulate(dw.data());
        dx.add_assign(&dx_router)?;
        Ok(dx)
    }
}

/// Small random router init; ties would otherwise send every token to
/// expert 0 at the start.
pub fn init_router(dim: usize, experts: usize, cfg: &MoeConfig, rng: &mut Rng) -> Result<Router> {
    Router::new(Tensor::randn([dim, experts], 0.01, rng), cfg.sigma, cfg.lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numeric_grad, rel_error, Probe, DEFAULT_STEP};
    use crate::layers::{Linear, Mlp};
    use crate::quant::QuantConfig;

    fn t2(rows: usize, cols: usize, data: &[f32]) -> Tensor {
        Tensor::new([rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn zero_router_is_uniform() {
        let r = Router::zeros(3, 2, 0.1, 0.01).unwrap();
        let x = Tensor::from_fn([4, 3], |i| i as f32);
        let (p, _) = route(&x, &r).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn route_closed_form() {
        let r = Router::new(t2(1, 2, &[1f32.ln(), 3f32.ln()]), 0.1, 0.01).unwrap();
        let (p, logits) = route(&t2(1, 1, &[1.0]), &r).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-6);
        assert!((p.data()[1] - 0.75).abs() < 1e-6);
        assert_eq!(argmax_lowest(p.row(0)), argmax_lowest(logits.row(0)));
    }

    #[test]
    fn router_validation() {
        assert!(Router::zeros(3, 1, 0.1, 0.0).is_err());
        assert!(Router::zeros(3, 2, 0.0, 0.0).is_err());
        assert!(Router::zeros(3, 2, 0.1, -1.0).is_err());
    }

    #[test]
    fn dispatch_pattern_and_ties() {
        let p = t2(4, 2, &[0.9, 0.1, 0.2, 0.8, 0.3, 0.7, 0.6, 0.4]);
        let plan = dispatch(&p, &p);
        assert_eq!(plan.tokens, vec![vec![0, 3], vec![1, 2]]);
        let tie = t2(1, 2, &[0.5, 0.5]);
        assert_eq!(dispatch(&tie, &tie).expert_of, vec![0]);
    }

    #[test]
    fn scv_cases() {
        assert_eq!(scv(&[2.0, 2.0, 2.0]), 0.0);
        assert!((scv(&[2.0, 0.0]) - 1.0).abs() < 1e-9);
        assert!((scv(&[1.0, 3.0]) - 0.25).abs() < 1e-9);
        assert_eq!(scv(&[0.0, 0.0]), 0.0);
    }

    #[test]
    fn importance_loss_cases() {
        let uniform = Tensor::filled([4, 2], 0.5);
        assert_eq!(importance_loss(&uniform, &[0.5, 0.5]).unwrap().value, 0.0);
        let skew = t2(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let v = importance_loss(&skew, &[0.5, 0.5]).unwrap().value;
        assert!((v - 1.0).abs() < 1e-9);
        // Mass [1, 3]: a 3x slower expert 0 is balanced at a quarter share.
        let p = t2(2, 2, &[0.5, 0.5, 0.5, 2.5]);
        let v = importance_loss(&p, &[0.75, 0.25]).unwrap().value;
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn load_loss_cases() {
        let equal = Tensor::zeros([3, 2]);
        assert!(load_loss(&equal, &[0.5, 0.5], 0.1).unwrap().value.abs() < 1e-15);
        let q = load_probabilities(&equal, 0.1);
        assert!(q.data().iter().all(|&v| v == 0.5));

        let mut rng = Rng::new(2);
        let logits = Tensor::uniform([6, 2], -1.0, 1.0, &mut rng);
        let q = load_probabilities(&logits, 0.3);
        for t in 0..6 {
            assert!((q.row(t)[0] + q.row(t)[1] - 1.0).abs() < 1e-6);
        }
        assert!(load_loss(&logits, &[0.5, 0.5], 0.0).is_err());
    }

    #[test]
    fn aux_gradients_match_finite_differences() {
        let mut rng = Rng::new(3);
        let alpha = [0.75, 0.25];
        let p = tensor::softmax(&Tensor::uniform([6, 2], -1.0, 1.0, &mut rng), 1).unwrap();
        let imp = importance_loss(&p, &alpha).unwrap();
        let num = numeric_grad(&p, DEFAULT_STEP, |pp| importance_loss(pp, &alpha).unwrap().value);
        assert!(rel_error(&imp.grad, &num) <= 1e-4);

        let logits = Tensor::uniform([6, 3], -0.3, 0.3, &mut rng);
        let alpha3 = [0.5, 0.3, 0.2];
        let load = load_loss(&logits, &alpha3, 0.5).unwrap();
        let num = numeric_grad(&logits, DEFAULT_STEP, |l| load_loss(l, &alpha3, 0.5).unwrap().value);
        assert!(rel_error(&load.grad, &num) <= 1e-4);
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(1.0, 0.5, 0.5, 0.0), 1.0);
        assert!((total_loss(1.0, 0.5, 0.5, 0.01) - 1.01).abs() < 1e-12);
        assert!(total_loss(1.0, 0.6, 0.5, 0.01) >= total_loss(1.0, 0.5, 0.5, 0.01));
    }

    #[test]
    fn modularized_latency_is_max() {
        assert_eq!(modularized_latency(2, &[3e-3, 1e-3]).unwrap(), 3e-3);
        assert_eq!(modularized_latency(2, &[2.0, 2.0]).unwrap(), 2.0);
        assert!(modularized_latency(2, &[1.0]).is_err());
    }

    #[test]
    fn latency_coefficients_normalize() {
        let a = latency_coefficients(&[3.0, 1.0]).unwrap();
        assert_eq!(a, vec![0.75, 0.25]);
        assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        assert!(latency_coefficients(&[1.0, 0.0]).is_err());
    }

    fn two_mlp_moe(seed: u64, shift_second: bool) -> MoeLayer<Mlp> {
        let mut rng = Rng::new(seed);
        let dense = Mlp::new(4, 6, &mut rng);
        let mut second = dense.clone();
        if shift_second {
            second.to_shift(QuantConfig::default()).unwrap();
        }
        let router = Router::new(Tensor::randn([4, 2], 1.0, &mut rng), 0.1, 0.01).unwrap();
        MoeLayer::new(router, vec![dense, second], vec![3.0, 1.0]).unwrap()
    }

    #[test]
    fn equal_experts_give_gate_scaled_dense_output() {
        let mut layer = two_mlp_moe(5, false);
        let mut rng = Rng::new(6);
        let x = Tensor::uniform([7, 4], -1.0, 1.0, &mut rng);
        let y = layer.forward(&x, false).unwrap();
        let dense = layer.experts[0].forward(&x, false).unwrap();
        let plan = layer.last_plan.clone().unwrap();
        for t in 0..7 {
            for (a, b) in y.row(t).iter().zip(dense.row(t)) {
                assert!((a - plan.gate_of[t] as f32 * b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn gather_scatter_matches_per_token_loop() {
        let mut layer = two_mlp_moe(7, true);
        let mut rng = Rng::new(8);
        let x = Tensor::uniform([9, 4], -1.0, 1.0, &mut rng);
        let y = layer.forward(&x, false).unwrap();
        let plan = layer.last_plan.clone().unwrap();
        assert!(plan.tokens.iter().all(|t| !t.is_empty()));
        for t in 0..9 {
            let e = plan.expert_of[t];
            let single = layer.experts[e].forward(&x.gather_rows(&[t]), false).unwrap();
            for (a, b) in y.row(t).iter().zip(single.row(0)) {
                assert!((a - plan.gate_of[t] as f32 * b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn all_tokens_to_shift_expert() {
        let mut rng = Rng::new(9);
        let dense = Linear::new(4, 3, &mut rng);
        let mut shift = Linear::new(4, 3, &mut rng);
        shift.to_shift(QuantConfig::default()).unwrap();
        let mut w = Tensor::zeros([4, 2]);
        for i in 0..4 {
            w.data_mut()[i * 2 + 1] = 5.0;
        }
        let router = Router::new(w, 0.1, 0.0).unwrap();
        let mut layer = MoeLayer::new(router, vec![dense, shift], vec![3.0, 1.0]).unwrap();
        let x = Tensor::uniform([5, 4], 0.1, 1.0, &mut rng);
        let y = layer.forward(&x, false).unwrap();
        let plan = layer.last_plan.clone().unwrap();
        assert_eq!(plan.tokens[1].len(), 5);
        let s = layer.experts[1].forward(&x, false).unwrap();
        for t in 0..5 {
            for (a, b) in y.row(t).iter().zip(s.row(t)) {
                assert_eq!(a.to_bits(), ((plan.gate_of[t] * *b as f64) as f32).to_bits());
            }
        }
    }

    #[test]
    fn moe_gradients_match_finite_differences() {
        let mut layer = two_mlp_moe(11, false);
        layer.router.lambda = 0.5;
        let mut rng = Rng::new(12);
        let x = Tensor::uniform([6, 4], -1.0, 1.0, &mut rng);
        let y = layer.forward(&x, true).unwrap();
        let probe = Probe::new(y.shape(), &mut rng);
        layer.zero_grad();
        let dx = layer.backward(&probe.weights).unwrap();
        let frozen = layer.clone();
        let loss = |m: &mut MoeLayer<Mlp>, x: &Tensor| {
            let y = m.forward(x, false).unwrap();
            probe.loss(&y) + m.aux_loss()
        };
        let num = numeric_grad(&x, DEFAULT_STEP, |xp| loss(&mut frozen.clone(), xp));
        let err = rel_error(&dx, &num);
        assert!(err <= 1e-4, "dx rel err {err}");
        // Gate sensitivities are small next to f32 output rounding, which
        // sets a ~1e-4 noise floor at the default step; a 4e-3 step clears it.
        let num = numeric_grad(&frozen.router.weight.value, 4e-3, |w| {
            let mut m = frozen.clone();
            m.router.weight.value = w.clone();
            loss(&mut m, &x)
        });
        let err = rel_error(&layer.router.weight.grad, &num);
        assert!(err <= 1e-4, "router rel err {err}");
    }
}
