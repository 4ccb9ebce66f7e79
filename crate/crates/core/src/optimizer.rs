//! Momentum SGD under three weight-decay regimes.
//!
//! All regimes share one update: the decay term is added to the
//! cross-entropy gradient, the sum enters the momentum buffer, and the
//! parameters move by `-lr * buffer`:
//!
//! ```text
//! d      = ∇w + c ⊙ w
//! buffer = μ · buffer + d
//! w      = w − lr · buffer
//! ```
//!
//! The coefficient `c` is a constant `λ` for fixed decay, the running
//! average `λ̄` of `DoG · ‖∇w‖ / ‖w‖` for adaptive decay, and the
//! per-parameter `λ · θ_i` for AdaDecay. With `μ = 0` the first form is
//! plain gradient descent on the regularized loss.
//!
//! Gradients are read from the parameters' `grad` slots and must come from
//! the cross-entropy alone; the adaptive coefficient is a detached scalar.

use std::f64::consts::PI;

use log::warn;

use crate::error::{Error, Result};
use crate::model::{grad_l2_norm, param_l2_norm, Model};

/// Norms below this are treated as a degenerate all-zero network.
pub const WEIGHT_NORM_EPS: f64 = 1e-12;
/// Layers whose gradient spread falls below this get θ = 1.
pub const ADADECAY_SIGMA_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegularizerMode {
    Fixed { lambda: f64 },
    Adaptive { dog: f64, ema_old: f64, ema_new: f64 },
    AdaDecay { lambda: f64, alpha: f64 },
}

impl RegularizerMode {
    /// Adaptive decay with the standard 0.1 / 0.9 averaging.
    pub fn adaptive(dog: f64) -> Self {
        RegularizerMode::Adaptive {
            dog,
            ema_old: 0.1,
            ema_new: 0.9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            RegularizerMode::Fixed { lambda } => {
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(Error::config("optim.lambda", format!("must be >= 0, got {lambda}")));
                }
            }
            RegularizerMode::Adaptive { dog, ema_old, ema_new } => {
                if !(dog > 0.0 && dog.is_finite()) {
                    return Err(Error::config("optim.dog", format!("must be > 0, got {dog}")));
                }
                if !(0.0..=1.0).contains(&ema_old) || !(0.0..=1.0).contains(&ema_new) || (ema_old + ema_new - 1.0).abs() > 1e-12 {
                    return Err(Error::config(
                        "optim.ema_old",
                        format!("ema_old + ema_new must equal 1, got {ema_old} + {ema_new}"),
                    ));
                }
            }
            RegularizerMode::AdaDecay { lambda, alpha } => {
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(Error::config("optim.lambda", format!("must be >= 0, got {lambda}")));
                }
                if !alpha.is_finite() {
                    return Err(Error::config("optim.alpha", "must be finite"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum: f64,
    pub base_lr: f64,
    pub total_steps: u64,
    pub schedule: Schedule,
    /// Number of completed steps.
    pub step: u64,
    /// Running average of the adaptive coefficient; starts at 0.
    pub lambda_bar: f64,
    /// Pre-average coefficient of the latest step.
    pub last_lambda: f64,
    pub buffers: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(model: &Model, momentum: f64, base_lr: f64, total_steps: u64, schedule: Schedule) -> Self {
        Self {
            momentum,
            base_lr,
            total_steps,
            schedule,
            step: 0,
            lambda_bar: 0.0,
            last_lambda: 0.0,
            buffers: model.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
        }
    }

    /// Learning rate for the next step.
    pub fn current_lr(&self) -> Result<f64> {
        match self.schedule {
            Schedule::Constant => Ok(self.base_lr),
            Schedule::Cosine => cosine_lr(self.step.min(self.total_steps), self.total_steps.max(1), self.base_lr),
        }
    }
}

/// What one optimizer step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub weight_norm: f64,
    pub grad_norm: f64,
    /// Coefficient computed for this step before any averaging
    /// (`λ` for fixed, `λ_t` for adaptive, `λ · mean θ` for AdaDecay).
    pub lambda_t: f64,
    /// Coefficient applied to the decay term (`λ̄` for adaptive).
    pub lambda_applied: f64,
    pub theta_min: f64,
    pub theta_max: f64,
}

/// `base_lr · ½ · (1 + cos(π · step / total_steps))`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Range("cosine schedule needs total_steps > 0".into()));
    }
    if step > total_steps {
        return Err(Error::Range(format!("step {step} beyond schedule length {total_steps}")));
    }
    if step == total_steps {
        return Ok(0.0);
    }
    Ok(base_lr * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

/// `λ_t = DoG · ‖∇w‖ / ‖w‖` as a plain scalar.
pub fn awd_lambda(grad_norm: f64, weight_norm: f64, dog: f64) -> f64 {
    if weight_norm < WEIGHT_NORM_EPS {
        warn!("weight norm {weight_norm:e} below {WEIGHT_NORM_EPS:e}; adaptive decay coefficient set to 0");
        return 0.0;
    }
    dog * grad_norm / weight_norm
}

fn check_finite(model: &Model, step: u64) -> Result<()> {
    for p in model.params() {
        let g = p
            .tensor
            .grad()
            .ok_or_else(|| Error::State(format!("gradient of `{}` is missing", p.name)))?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                step,
                tensor: p.name.clone(),
            });
        }
    }
    Ok(())
}

/// Shared momentum update; `coef(param, element)` is the decay coefficient.
fn apply_update(model: &mut Model, state: &mut OptimizerState, lr: f64, coef: impl Fn(usize, usize) -> f64) {
    if state.buffers.len() != model.params().len() {
        state.buffers = model.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect();
    }
    let mu = state.momentum;
    for (pi, (param, buffer)) in model.params_mut().iter_mut().zip(&mut state.buffers).enumerate() {
        let grad = param.tensor.grad().expect("checked by caller").to_vec();
        let data = param.tensor.data_mut();
        for (j, ((w, b), g)) in data.iter_mut().zip(buffer.iter_mut()).zip(grad).enumerate() {
            let d = g + coef(pi, j) * *w;
            *b = mu * *b + d;
            *w -= lr * *b;
        }
    }
    state.step += 1;
}

/// Momentum SGD on cross-entropy plus `λ/2 · ‖w‖²`.
pub fn sgd_fixed_step(model: &mut Model, state: &mut OptimizerState, lr: f64, lambda: f64) -> Result<StepReport> {
    check_finite(model, state.step)?;
    let weight_norm = param_l2_norm(model);
    let grad_norm = grad_l2_norm(model)?;
    let step = state.step;
    apply_update(model, state, lr, |_, _| lambda);
    state.last_lambda = lambda;
    Ok(StepReport {
        step,
        lr,
        weight_norm,
        grad_norm,
        lambda_t: lambda,
        lambda_applied: lambda,
        theta_min: 1.0,
        theta_max: 1.0,
    })
}

/// Adaptive weight decay: the coefficient tracks `DoG · ‖∇w‖ / ‖w‖`
/// through an exponential average and is never differentiated.
pub fn awd_step(
    model: &mut Model,
    state: &mut OptimizerState,
    lr: f64,
    dog: f64,
    ema_old: f64,
    ema_new: f64,
) -> Result<StepReport> {
    check_finite(model, state.step)?;
    let weight_norm = param_l2_norm(model);
    let grad_norm = grad_l2_norm(model)?;
    let lambda_t = awd_lambda(grad_norm, weight_norm, dog);
    let lambda_bar = ema_old * state.lambda_bar + ema_new * lambda_t;
    let step = state.step;
    apply_update(model, state, lr, |_, _| lambda_bar);
    state.lambda_bar = lambda_bar;
    state.last_lambda = lambda_t;
    Ok(StepReport {
        step,
        lr,
        weight_norm,
        grad_norm,
        lambda_t,
        lambda_applied: lambda_bar,
        theta_min: 1.0,
        theta_max: 1.0,
    })
}

/// `2 / (1 + exp(−α · ḡ))`, in [0, 2].
pub fn adadecay_theta(alpha: f64, normalized_grad: f64) -> f64 {
    2.0 / (1.0 + (-alpha * normalized_grad).exp())
}

/// Per-parameter θ for every tensor, using gradients normalized within each layer.
pub fn adadecay_thetas(model: &Model, alpha: f64) -> Result<Vec<Vec<f64>>> {
    let params = model.params();
    let mut layer_stats: Vec<(usize, f64, f64)> = Vec::new();
    for layer in params.iter().map(|p| p.layer) {
        if layer_stats.iter().any(|(l, _, _)| *l == layer) {
            continue;
        }
        let grads: Vec<f64> = params
            .iter()
            .filter(|p| p.layer == layer)
            .flat_map(|p| p.tensor.grad().unwrap_or_default().iter().copied())
            .collect();
        if grads.len() < 2 {
            return Err(Error::State(format!("layer {layer} has fewer than 2 parameters")));
        }
        let n = grads.len() as f64;
        let mean = grads.iter().sum::<f64>() / n;
        let var = grads.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n;
        layer_stats.push((layer, mean, var.sqrt()));
    }
    params
        .iter()
        .map(|p| {
            let &(_, mean, sigma) = layer_stats.iter().find(|(l, _, _)| *l == p.layer).expect("layer seen");
            let grad = p
                .tensor
                .grad()
                .ok_or_else(|| Error::State(format!("gradient of `{}` is missing", p.name)))?;
            Ok(grad
                .iter()
                .map(|&g| {
                    let normalized = if sigma < ADADECAY_SIGMA_EPS { 0.0 } else { (g - mean) / sigma };
                    adadecay_theta(alpha, normalized)
                })
                .collect())
        })
        .collect()
}

/// AdaDecay baseline: each parameter decays with `λ · θ_i`.
pub fn adadecay_step(
    model: &mut Model,
    state: &mut OptimizerState,
    lr: f64,
    lambda: f64,
    alpha: f64,
) -> Result<StepReport> {
    check_finite(model, state.step)?;
    let weight_norm = param_l2_norm(model);
    let grad_norm = grad_l2_norm(model)?;
    let thetas = adadecay_thetas(model, alpha)?;
    let (mut lo, mut hi, mut sum, mut count) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for t in thetas.iter().flatten() {
        lo = lo.min(*t);
        hi = hi.max(*t);
        sum += t;
        count += 1;
    }
    let step = state.step;
    apply_update(model, state, lr, |pi, j| lambda * thetas[pi][j]);
    let mean_coef = lambda * sum / count.max(1) as f64;
    state.last_lambda = mean_coef;
    Ok(StepReport {
        step,
        lr,
        weight_norm,
        grad_norm,
        lambda_t: mean_coef,
        lambda_applied: mean_coef,
        theta_min: lo,
        theta_max: hi,
    })
}

/// A regularizer mode bound to its state.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub mode: RegularizerMode,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(model: &Model, mode: RegularizerMode, momentum: f64, base_lr: f64, total_steps: u64) -> Result<Self> {
        mode.validate()?;
        Ok(Self {
            mode,
            state: OptimizerState::new(model, momentum, base_lr, total_steps, Schedule::Cosine),
        })
    }

    /// One step at the scheduled learning rate.
    pub fn step(&mut self, model: &mut Model) -> Result<StepReport> {
        let lr = self.state.current_lr()?;
        self.step_with_lr(model, lr)
    }

    pub fn step_with_lr(&mut self, model: &mut Model, lr: f64) -> Result<StepReport> {
        match self.mode {
            RegularizerMode::Fixed { lambda } => sgd_fixed_step(model, &mut self.state, lr, lambda),
            RegularizerMode::Adaptive { dog, ema_old, ema_new } => {
                awd_step(model, &mut self.state, lr, dog, ema_old, ema_new)
            }
            RegularizerMode::AdaDecay { lambda, alpha } => adadecay_step(model, &mut self.state, lr, lambda, alpha),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_mlp;
    use crate::tensor::Tensor;

    fn model_with_grads(seed: u64) -> Model {
        let mut m = build_mlp(&[3, 4, 2], seed).unwrap();
        let x = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        m.compute_gradients(&x, &[0, 1, 1, 0]).unwrap();
        m
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 0.1).unwrap(), 0.1);
        assert_eq!(cosine_lr(100, 100, 0.1).unwrap(), 0.0);
        assert!((cosine_lr(50, 100, 0.1).unwrap() - 0.05).abs() < 1e-15);
        assert!(matches!(cosine_lr(101, 100, 0.1), Err(Error::Range(_))));
        assert!(cosine_lr(0, 0, 0.1).is_err());
    }

    #[test]
    fn awd_lambda_examples() {
        assert_eq!(awd_lambda(1.0, 1.0, 0.016), 0.016);
        assert_eq!(awd_lambda(0.0, 3.7, 0.016), 0.0);
        assert!((awd_lambda(2.0, 10.0, 0.016) - 0.0032).abs() < 1e-15);
        assert_eq!(awd_lambda(5.0, 0.0, 0.016), 0.0);
    }

    #[test]
    fn fixed_step_without_decay_or_gradient_is_identity() {
        let mut m = model_with_grads(1);
        m.params_mut().iter_mut().for_each(|p| {
            let n = p.tensor.len();
            p.tensor.set_grad(Some(vec![0.0; n]));
        });
        let before = m.clone();
        let mut st = OptimizerState::new(&m, 0.9, 0.1, 10, Schedule::Constant);
        sgd_fixed_step(&mut m, &mut st, 0.1, 0.0).unwrap();
        for (a, b) in m.params().iter().zip(before.params()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
    }

    #[test]
    fn fixed_step_without_momentum_is_plain_descent() {
        let mut m = model_with_grads(2);
        let before = m.clone();
        let mut st = OptimizerState::new(&m, 0.0, 0.01, 10, Schedule::Constant);
        sgd_fixed_step(&mut m, &mut st, 0.01, 0.005).unwrap();
        for (a, b) in m.params().iter().zip(before.params()) {
            for ((w1, w0), g) in a.tensor.data().iter().zip(b.tensor.data()).zip(b.tensor.grad().unwrap()) {
                let expected = w0 - 0.01 * g - 0.01 * 0.005 * w0;
                assert!((w1 - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn non_finite_gradient_aborts_with_tensor_name() {
        let mut m = model_with_grads(3);
        let mut g = m.params()[2].tensor.grad().unwrap().to_vec();
        g[0] = f64::NAN;
        m.params_mut()[2].tensor.set_grad(Some(g));
        let before = m.clone();
        let mut st = OptimizerState::new(&m, 0.9, 0.1, 10, Schedule::Constant);
        st.step = 17;
        let err = sgd_fixed_step(&mut m, &mut st, 0.1, 0.0).unwrap_err();
        assert!(matches!(&err, Error::NonFiniteGradient { step: 17, tensor } if tensor == "fc2.weight"), "{err}");
        for (a, b) in m.params().iter().zip(before.params()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
        assert_eq!(st.buffers.iter().flatten().filter(|&&v| v != 0.0).count(), 0);
        let err = awd_step(&mut m, &mut st, 0.1, 0.02, 0.1, 0.9).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { .. }));
    }

    #[test]
    fn awd_first_step_ema() {
        let mut m = model_with_grads(4);
        let mut st = OptimizerState::new(&m, 0.9, 0.1, 10, Schedule::Constant);
        let r = awd_step(&mut m, &mut st, 0.1, 0.02, 0.1, 0.9).unwrap();
        assert_eq!(st.lambda_bar, 0.9 * r.lambda_t);
        assert!((r.lambda_t * r.weight_norm / r.grad_norm - 0.02).abs() < 1e-15);
    }

    #[test]
    fn ema_converges_geometrically_to_constant() {
        let c = 0.25;
        let mut bar = 0.0f64;
        for t in 1..=12 {
            bar = 0.1 * bar + 0.9 * c;
            assert!(((c - bar) - 0.1f64.powi(t) * c).abs() < 1e-15);
        }
    }

    #[test]
    fn adadecay_theta_limits() {
        assert_eq!(adadecay_theta(3.0, 0.0), 1.0);
        assert!((adadecay_theta(1.0, 1e3) - 2.0).abs() < 1e-12);
        assert!(adadecay_theta(1.0, -1e3).abs() < 1e-12);
        assert_eq!(adadecay_theta(0.0, 123.0), 1.0);
    }

    #[test]
    fn adadecay_alpha_zero_is_fixed_decay() {
        let mut a = model_with_grads(5);
        let mut b = a.clone();
        let mut sa = OptimizerState::new(&a, 0.9, 0.1, 10, Schedule::Constant);
        let mut sb = sa.clone();
        sgd_fixed_step(&mut a, &mut sa, 0.1, 0.003).unwrap();
        adadecay_step(&mut b, &mut sb, 0.1, 0.003, 0.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa.buffers, sb.buffers);
    }

    #[test]
    fn adadecay_flat_layer_gets_unit_theta() {
        let mut m = build_mlp(&[2, 2], 0).unwrap();
        m.params_mut().iter_mut().for_each(|p| {
            let n = p.tensor.len();
            p.tensor.set_grad(Some(vec![0.5; n]));
        });
        let thetas = adadecay_thetas(&m, 10.0).unwrap();
        assert!(thetas.iter().flatten().all(|&t| t == 1.0));
    }

    #[test]
    fn adadecay_layer_mean_gradient_gets_unit_theta() {
        let mut m = build_mlp(&[1, 2], 0).unwrap();
        // layer gradients {-1, 1, 0, 0}: mean 0, the zeros sit at the mean
        m.params_mut()[0].tensor.set_grad(Some(vec![-1.0, 1.0]));
        m.params_mut()[1].tensor.set_grad(Some(vec![0.0, 0.0]));
        let thetas = adadecay_thetas(&m, 2.0).unwrap();
        assert_eq!(thetas[1], vec![1.0, 1.0]);
        assert!(thetas[0][0] < 1.0 && thetas[0][1] > 1.0);
    }

    #[test]
    fn mode_validation() {
        assert!(RegularizerMode::Fixed { lambda: -1.0 }.validate().is_err());
        assert!(RegularizerMode::adaptive(0.0).validate().is_err());
        assert!(RegularizerMode::Adaptive {
            dog: 0.1,
            ema_old: 0.3,
            ema_new: 0.9
        }
        .validate()
        .is_err());
        assert!(RegularizerMode::adaptive(0.016).validate().is_ok());
    }
}
