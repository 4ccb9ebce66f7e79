//! Central-difference verification of tape gradients.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{component_rng, tag};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Elements whose ±h perturbation flipped a ReLU; their numeric gradient is meaningless.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

/// Denominator floor for the relative error, so that exactly-zero gradients compare absolutely.
const REL_FLOOR: f64 = 1e-8;

fn loss_and_pattern(model: &Model, inputs: &Tensor, labels: &[usize]) -> Result<(f64, Vec<bool>)> {
    let mut tape = Tape::new();
    let x = tape.leaf(inputs.clone());
    let (z, _) = model.forward(&mut tape, x)?;
    let l = tape.softmax_cross_entropy(z, labels)?;
    Ok((tape.scalar(l), tape.relu_pattern()))
}

/// Compares tape gradients with `(L(w+h) − L(w−h)) / 2h` on up to
/// `samples_per_tensor` randomly chosen elements of every parameter tensor.
pub fn finite_difference_check(
    model: &Model,
    inputs: &Tensor,
    labels: &[usize],
    h: f64,
    tol: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Input(format!("finite-difference step must be positive, got {h}")));
    }
    let mut analytic = model.clone();
    analytic.compute_gradients(inputs, labels)?;
    let mut rng = component_rng(seed, tag::GRAD_CHECK);
    let mut probe = model.clone();
    let mut tensors = Vec::new();

    for (pi, param) in analytic.params().iter().enumerate() {
        let grad = param.tensor.grad().expect("gradients computed above").to_vec();
        let n = param.tensor.len();
        let picks = sample(&mut rng, n, samples_per_tensor.min(n));
        let (mut max_rel, mut checked, mut skipped) = (0.0f64, 0, 0);
        for idx in picks {
            let original = probe.params()[pi].tensor.data()[idx];
            probe.params_mut()[pi].tensor.data_mut()[idx] = original + h;
            let (plus, pattern_plus) = loss_and_pattern(&probe, inputs, labels)?;
            probe.params_mut()[pi].tensor.data_mut()[idx] = original - h;
            let (minus, pattern_minus) = loss_and_pattern(&probe, inputs, labels)?;
            probe.params_mut()[pi].tensor.data_mut()[idx] = original;
            if pattern_plus != pattern_minus {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (numeric - grad[idx]).abs() / numeric.abs().max(grad[idx].abs()).max(REL_FLOOR);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
        tensors.push(TensorCheck {
            name: param.name.clone(),
            checked,
            skipped_kinks: skipped,
            max_rel_error: max_rel,
            passed: max_rel < tol && max_rel.is_finite(),
        });
    }
    Ok(GradCheckReport { tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_mlp, build_small_cnn};

    fn ramp(shape: Vec<usize>, scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * scale).collect()).unwrap()
    }

    #[test]
    fn linear_model_passes_tightly() {
        let m = build_mlp(&[5, 3], 2).unwrap();
        let r = finite_difference_check(&m, &ramp(vec![4, 5], 2.0), &[0, 1, 2, 1], 1e-5, 1e-6, 100, 0).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn zero_model_zero_input_is_finite() {
        let mut m = build_mlp(&[3, 4, 2], 0).unwrap();
        m.params_mut().iter_mut().for_each(|p| p.tensor.data_mut().fill(0.0));
        let r = finite_difference_check(&m, &Tensor::zeros(vec![2, 3]), &[0, 1], 1e-5, 1e-4, 100, 0).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn small_cnn_passes() {
        let m = build_small_cnn([1, 6, 6], &[3, 2], 3, 5).unwrap();
        let r = finite_difference_check(&m, &ramp(vec![4, 1, 6, 6], 1.0), &[0, 1, 2, 0], 1e-5, 1e-4, 100, 1).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.tensors.iter().all(|t| t.checked > 0));
    }

    #[test]
    fn rejects_nonpositive_step() {
        let m = build_mlp(&[2, 2], 0).unwrap();
        assert!(finite_difference_check(&m, &Tensor::zeros(vec![1, 2]), &[0], 0.0, 1e-4, 1, 0).is_err());
    }
}
