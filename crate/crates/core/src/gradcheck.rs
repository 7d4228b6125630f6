//! Central finite-difference oracle. It only ever calls a forward closure, so
//! it stays independent of every hand-written backward pass it is used to
//! check.

use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f32 = 1e-3;

/// Numerical gradient of the scalar `f` at `x`. The denominator uses the
/// perturbation actually realized in `f32`, not the nominal step.
pub fn numeric_grad(x: &Tensor, step: f32, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let orig = x.data()[i];
        let plus = orig + step;
        let minus = orig - step;
        probe.data_mut()[i] = plus;
        let fp = f(&probe);
        probe.data_mut()[i] = minus;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = ((fp - fm) / (plus as f64 - minus as f64)) as f32;
    }
    grad
}

/// Fourth-order central difference
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`. Its truncation error is
/// O(h⁴), so it tolerates the larger steps that keep `f32` round-off down.
pub fn numeric_grad4(x: &Tensor, step: f32, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let orig = x.data()[i];
        let mut at = |d: f32| {
            probe.data_mut()[i] = orig + d;
            let v = f(&probe);
            probe.data_mut()[i] = orig;
            v
        };
        let near = at(step) - at(-step);
        let far = at(2.0 * step) - at(-2.0 * step);
        grad.data_mut()[i] = ((8.0 * near - far) / (12.0 * step as f64)) as f32;
    }
    grad
}

/// Norm-wise relative error `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`.
pub fn rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nn = 0.0f64;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        diff += (a as f64 - n as f64).powi(2);
        na += (a as f64).powi(2);
        nn += (n as f64).powi(2);
    }
    let denom = na.sqrt().max(nn.sqrt());
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

/// Fixed random linear functional used to reduce a tensor output to a scalar
/// loss; its gradient with respect to the output is the probe itself.
#[derive(Clone, Debug)]
pub struct Probe {
    pub weights: Tensor,
}

impl Probe {
    pub fn new(shape: &[usize], rng: &mut Rng) -> Self {
        Self {
            weights: Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng),
        }
    }

    pub fn loss(&self, out: &Tensor) -> f64 {
        assert_eq!(out.shape(), self.weights.shape(), "probe shape mismatch");
        out.data()
            .iter()
            .zip(self.weights.data())
            .map(|(&o, &w)| o as f64 * w as f64)
            .sum()
    }
}

/// Analytic and numerical gradients of a module's input and of every
/// parameter under a random probe loss, as `(name, analytic, numeric)`. The
/// module's caches and gradients are left as after one forward/backward.
#[allow(clippy::type_complexity)]
pub fn module_grads<M>(
    module: &mut M,
    x: &Tensor,
    step: f32,
    rng: &mut Rng,
) -> crate::error::Result<Vec<(String, Tensor, Tensor)>>
where
    M: crate::layers::Module + Clone,
{
    module_grads_with(module, x, rng, |t, f| numeric_grad(t, step, f))
}

/// [`module_grads`] with a caller-chosen numerical differentiator.
#[allow(clippy::type_complexity)]
pub fn module_grads_with<M>(
    module: &mut M,
    x: &Tensor,
    rng: &mut Rng,
    numeric: impl Fn(&Tensor, &mut dyn FnMut(&Tensor) -> f64) -> Tensor,
) -> crate::error::Result<Vec<(String, Tensor, Tensor)>>
where
    M: crate::layers::Module + Clone,
{
    let frozen = module.clone();
    let out = module.forward(x, true)?;
    let probe = Probe::new(out.shape(), rng);
    module.zero_grad();
    let dx = module.backward(&probe.weights)?;
    let eval = |m: &M, input: &Tensor| -> f64 {
        let mut m = m.clone();
        probe.loss(&m.forward(input, false).expect("forward succeeded once"))
    };
    let num = numeric(x, &mut |xp| eval(&frozen, xp));
    let mut out = vec![("input".to_string(), dx, num)];
    let mut analytic = Vec::new();
    module.visit_params("", &mut |name, p| {
        analytic.push((name.to_string(), p.value.clone(), p.grad.clone()))
    });
    for (name, value, grad) in analytic {
        let num = numeric(&value, &mut |v| {
            let mut m = frozen.clone();
            m.visit_params("", &mut |n, p| {
                if n == name {
                    p.value = v.clone();
                }
            });
            eval(&m, x)
        });
        out.push((name, grad, num));
    }
    Ok(out)
}

/// Relative error of each gradient returned by [`module_grads`].
pub fn module_errors<M>(
    module: &mut M,
    x: &Tensor,
    step: f32,
    rng: &mut Rng,
) -> crate::error::Result<Vec<(String, f64)>>
where
    M: crate::layers::Module + Clone,
{
    Ok(module_grads(module, x, step, rng)?
        .into_iter()
        .map(|(name, a, n)| {
            let e = rel_error(&a, &n);
            (name, e)
        })
        .collect())
}
