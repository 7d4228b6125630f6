//! Trainable layers with explicit forward/backward pairs. Each layer keeps
//! the inputs its backward needs from the last training-mode forward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{join, Param, Params};
use crate::quant::{self, QuantConfig, ShiftLinear};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

pub trait Module: Params {
    /// With `train` set, caches what [`Module::backward`] needs.
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor>;

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, dy: &Tensor) -> Result<Tensor>;
}

fn missing_cache(layer: &str) -> Error {
    Error::State(format!("{layer}: backward called without a cached forward"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearMode {
    Dense,
    Shift,
    Moe,
}

/// `y = x · W + b`, where `W` is either dense or the shift quantization of a
/// dense shadow matrix.
#[derive(Clone, Debug)]
pub struct Linear {
    /// Dense weights, or the STE shadow weights in shift mode.
    pub weight: Param,
    pub bias: Param,
    pub shift: Option<ShiftLinear>,
    pub quant: QuantConfig,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / in_dim as f32).sqrt();
        Self::from_weights(Tensor::randn([in_dim, out_dim], std, rng), Tensor::zeros([out_dim]))
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self::from_weights(Tensor::zeros([in_dim, out_dim]), Tensor::zeros([out_dim]))
    }

    pub fn from_weights(weight: Tensor, bias: Tensor) -> Self {
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            shift: None,
            quant: QuantConfig::default(),
            cache: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn mode(&self) -> LinearMode {
        if self.shift.is_some() {
            LinearMode::Shift
        } else {
            LinearMode::Dense
        }
    }

    /// Switches to shift mode, keeping the current weights as shadow copy.
    pub fn to_shift(&mut self, cfg: QuantConfig) -> Result<()> {
        cfg.validate()?;
        self.quant = cfg;
        self.shift = Some(quant::quantize_shift(&self.weight.value, &cfg)?);
        Ok(())
    }

    /// Weights the forward pass actually multiplies by.
    pub fn effective_weight(&self) -> Tensor {
        match &self.shift {
            Some(s) => s.reconstruct(),
            None => self.weight.value.clone(),
        }
    }
}

impl Params for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }

    fn after_update(&mut self) {
        if self.shift.is_some() {
            let q = quant::quantize_shift(&self.weight.value, &self.quant).expect("shadow weights keep their shape");
            self.shift = Some(q);
        }
    }
}

impl Module for Linear {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = match &self.shift {
            Some(s) => quant::shift_forward(x, s)?,
            None => tensor::matmul(x, &self.weight.value)?,
        };
        y.add_row_vector(self.bias.value.data())?;
        if train {
            self.cache = Some(x.clone());
        }
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let x = self.cache.take().ok_or_else(|| missing_cache("linear"))?;
        let (dx, dw) = match &self.shift {
            Some(s) => quant::shift_backward(dy, &x, s)?,
            None => tensor::matmul_backward(dy, &x, &self.weight.value)?,
        };
        self.weight.accumulate(dw.data());
        self.bias.accumulate(&dy.sum_rows());
        Ok(dx)
    }
}

/// Two linears with GELU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    cache: Option<Tensor>,
}

impl Mlp {
    pub fn new(dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            fc1: Linear::new(dim, hidden, rng),
            fc2: Linear::new(hidden, dim, rng),
            cache: None,
        }
    }

    pub fn from_parts(fc1: Linear, fc2: Linear) -> Self {
        Self { fc1, fc2, cache: None }
    }

    pub fn to_shift(&mut self, cfg: QuantConfig) -> Result<()> {
        self.fc1.to_shift(cfg)?;
        self.fc2.to_shift(cfg)
    }
}

impl Params for Mlp {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }

    fn after_update(&mut self) {
        self.fc1.after_update();
        self.fc2.after_update();
    }
}

impl Module for Mlp {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.fc1.forward(x, train)?;
        let a = tensor::gelu(&h);
        let y = self.fc2.forward(&a, train)?;
        if train {
            self.cache = Some(h);
        }
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let h = self.cache.take().ok_or_else(|| missing_cache("mlp"))?;
        let da = self.fc2.backward(dy)?;
        let dh = tensor::gelu_backward(&h, &da)?;
        self.fc1.backward(&dh)
    }
}

/// Learnable gain/bias layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
    cache: Option<tensor::LayerNormCache>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Param::new(Tensor::filled([dim], 1.0)),
            bias: Param::new(Tensor::zeros([dim])),
            cache: None,
        }
    }
}

impl Params for LayerNorm {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl Module for LayerNorm {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (y, cache) = tensor::layernorm(x, self.gain.value.data(), self.bias.value.data(), tensor::LAYERNORM_EPS)?;
        if train {
            self.cache = Some(cache);
        }
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("layernorm"))?;
        let (dx, dg, db) = tensor::layernorm_backward(&cache, self.gain.value.data(), dy)?;
        self.gain.accumulate(&dg);
        self.bias.accumulate(&db);
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numeric_grad, rel_error, Probe, DEFAULT_STEP};

    fn check_module<M: Module + Clone>(mut m: M, x: Tensor, seed: u64, tol: f64) {
        let mut rng = Rng::new(seed);
        let y = m.forward(&x, true).unwrap();
        let probe = Probe::new(y.shape(), &mut rng);
        m.zero_grad();
        let dx = m.backward(&probe.weights).unwrap();
        let reference = m.clone();
        let num = numeric_grad(&x, DEFAULT_STEP, |xp| {
            let mut fresh = reference.clone();
            probe.loss(&fresh.forward(xp, false).unwrap())
        });
        let err = rel_error(&dx, &num);
        assert!(err <= tol, "input gradient rel err {err}");

        let mut names = Vec::new();
        let mut analytic = Vec::new();
        m.visit_params("", &mut |n, p| {
            names.push(n.to_string());
            analytic.push(p.grad.clone());
        });
        for (name, grad) in names.iter().zip(&analytic) {
            let num = {
                let mut value = None;
                reference.clone().visit_params("", &mut |n, p| {
                    if n == name {
                        value = Some(p.value.clone());
                    }
                });
                numeric_grad(&value.unwrap(), DEFAULT_STEP, |wp| {
                    let mut fresh = reference.clone();
                    fresh.visit_params("", &mut |n, p| {
                        if n == name {
                            p.value = wp.clone();
                        }
                    });
                    fresh.after_update();
                    probe.loss(&fresh.forward(&x, false).unwrap())
                })
            };
            let err = rel_error(grad, &num);
            assert!(err <= tol, "{name} gradient rel err {err}");
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = Rng::new(1);
        let l = Linear::new(5, 4, &mut rng);
        let x = Tensor::uniform([3, 5], -1.0, 1.0, &mut rng);
        check_module(l, x, 2, 1e-4);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = Rng::new(3);
        let m = Mlp::new(4, 8, &mut rng);
        let x = Tensor::uniform([3, 4], -1.0, 1.0, &mut rng);
        check_module(m, x, 4, 1e-4);
    }

    #[test]
    fn layernorm_gradients_match_finite_differences() {
        let mut rng = Rng::new(5);
        let mut ln = LayerNorm::new(6);
        ln.gain.value = Tensor::uniform([6], 0.5, 1.5, &mut rng);
        ln.bias.value = Tensor::uniform([6], -0.5, 0.5, &mut rng);
        let x = Tensor::uniform([4, 6], -1.0, 1.0, &mut rng);
        check_module(ln, x, 6, 1e-4);
    }

    #[test]
    fn shift_linear_input_gradient_matches_finite_differences() {
        let mut rng = Rng::new(7);
        let mut l = Linear::new(6, 5, &mut rng);
        l.to_shift(QuantConfig::default()).unwrap();
        let x = Tensor::uniform([3, 6], -1.0, 1.0, &mut rng);
        let y = l.forward(&x, true).unwrap();
        let probe = Probe::new(y.shape(), &mut rng);
        let dx = l.backward(&probe.weights).unwrap();
        let frozen = l.clone();
        let num = numeric_grad(&x, DEFAULT_STEP, |xp| {
            probe.loss(&frozen.clone().forward(xp, false).unwrap())
        });
        assert!(rel_error(&dx, &num) <= 1e-4);
    }

    #[test]
    fn shift_gradients_equal_dense_gradients_at_reconstruction() {
        let mut rng = Rng::new(8);
        let mut shift = Linear::new(6, 5, &mut rng);
        shift.to_shift(QuantConfig::default()).unwrap();
        let mut dense = Linear::from_weights(shift.effective_weight(), shift.bias.value.clone());
        let x = Tensor::uniform([4, 6], -1.0, 1.0, &mut rng);
        let ys = shift.forward(&x, true).unwrap();
        let yd = dense.forward(&x, true).unwrap();
        assert!(ys.bit_eq(&yd));
        let dy = Tensor::uniform([4, 5], -1.0, 1.0, &mut rng);
        let dxs = shift.backward(&dy).unwrap();
        let dxd = dense.backward(&dy).unwrap();
        assert!(dxs.bit_eq(&dxd));
        assert!(shift.weight.grad.bit_eq(&dense.weight.grad));
    }

    #[test]
    fn small_shadow_update_keeps_quantized_forward() {
        let mut rng = Rng::new(9);
        let mut l = Linear::new(4, 4, &mut rng);
        l.to_shift(QuantConfig::default()).unwrap();
        let x = Tensor::uniform([2, 4], -1.0, 1.0, &mut rng);
        let before = l.forward(&x, false).unwrap();
        let q = l.shift.clone().unwrap();
        // Nudge every shadow weight by a relative 1e-4; none sits on a
        // rounding boundary for this seed.
        for v in l.weight.value.data_mut() {
            *v *= 1.0 + 1e-4;
        }
        l.after_update();
        assert_eq!(l.shift.as_ref().unwrap(), &q);
        assert!(l.forward(&x, false).unwrap().bit_eq(&before));
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut rng = Rng::new(10);
        let mut l = Linear::new(2, 2, &mut rng);
        let err = l.backward(&Tensor::zeros([1, 2])).unwrap_err();
        assert!(matches!(err, Error::State(_)));
        let mut m = Mlp::new(2, 3, &mut rng);
        assert!(matches!(m.backward(&Tensor::zeros([1, 2])), Err(Error::State(_))));
    }
}
