//! ℓ∞ PGD attacks and robust evaluation.

use rand::Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{count_correct, Model};
use crate::optimizer::Optimizer;
use crate::rng::{sub_rng, tag, LabRng};
use crate::tensor::Tensor;
use crate::train::{train_epoch, EpochConfig, EpochSummary};
use crate::dog::DogTrace;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
    pub bounds: (f64, f64),
}

impl AttackConfig {
    /// 7-step PGD at ε = 8/255 with step 2/255.
    pub fn train_default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps: 7,
            random_start: true,
            bounds: (0.0, 1.0),
        }
    }

    /// Same as training but with 20 steps.
    pub fn eval_default() -> Self {
        Self {
            steps: 20,
            ..Self::train_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("attack.epsilon", format!("must be >= 0, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("attack.step_size", "must be > 0"));
        }
        if self.steps == 0 {
            return Err(Error::config("attack.steps", "must be >= 1"));
        }
        if !(self.bounds.0 < self.bounds.1) {
            return Err(Error::config("attack.bounds", "lower bound must be below upper bound"));
        }
        Ok(())
    }
}

/// Clamps `x + delta` into the input bounds and the ε-ball around `x`,
/// such that `|result − x| ≤ ε` holds in floating point, not just in exact arithmetic.
fn project(x: f64, delta: f64, eps: f64, (lo, hi): (f64, f64)) -> f64 {
    let mut v = (x + delta.clamp(-eps, eps)).clamp(lo, hi);
    while v - x > eps {
        v = v.next_down();
    }
    while x - v > eps {
        v = v.next_up();
    }
    v
}

/// Maximizes cross-entropy within the ℓ∞ ball of radius `cfg.epsilon`
/// with signed-gradient ascent. Model parameters are not modified.
pub fn pgd_attack(model: &Model, x: &Tensor, labels: &[usize], cfg: &AttackConfig, rng: &mut LabRng) -> Result<Tensor> {
    cfg.validate()?;
    let (lo, hi) = cfg.bounds;
    if x.data().iter().any(|v| !(lo..=hi).contains(v)) {
        return Err(Error::Input("attack input outside the configured bounds".into()));
    }
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let eps = cfg.epsilon;
    let mut adv: Vec<f64> = if cfg.random_start {
        x.data()
            .iter()
            .map(|&v| project(v, rng.random_range(-eps..=eps), eps, cfg.bounds))
            .collect()
    } else {
        x.data().to_vec()
    };
    for _ in 0..cfg.steps {
        let current = Tensor::new(x.shape().to_vec(), adv)?;
        let (_, grad) = model.input_gradient(&current, labels)?;
        adv = current
            .into_data()
            .into_iter()
            .zip(x.data())
            .zip(grad)
            .map(|((a, &orig), g)| {
                let step = if g > 0.0 {
                    cfg.step_size
                } else if g < 0.0 {
                    -cfg.step_size
                } else {
                    0.0
                };
                project(orig, (a - orig) + step, eps, cfg.bounds)
            })
            .collect();
    }
    Tensor::new(x.shape().to_vec(), adv)
}

const EVAL_CHUNK: usize = 256;

/// Fraction of `data` still classified correctly after `pgd_attack`.
pub fn robust_accuracy(model: &Model, data: &Dataset, cfg: &AttackConfig, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("robust accuracy of an empty dataset".into()));
    }
    cfg.validate()?;
    let indices: Vec<usize> = (0..data.len()).collect();
    let correct: Result<Vec<usize>> = indices
        .par_chunks(EVAL_CHUNK)
        .enumerate()
        .map(|(chunk, idx)| {
            let (x, y) = data.batch(idx);
            let mut rng = sub_rng(seed, tag::EVAL_ATTACK, chunk as u64);
            let adv = pgd_attack(model, &x, &y, cfg, &mut rng)?;
            Ok(count_correct(&model.logits(&adv)?, model.classes(), &y))
        })
        .collect();
    Ok(correct?.into_iter().sum::<usize>() as f64 / data.len() as f64)
}

/// One epoch of adversarial training: every batch is replaced by its PGD
/// counterpart before the single backward pass and optimizer step.
pub fn adv_train_epoch(
    model: &mut Model,
    optimizer: &mut Optimizer,
    data: &Dataset,
    attack: AttackConfig,
    mut config: EpochConfig,
    seed: u64,
    epoch: usize,
    trace: Option<&mut DogTrace>,
) -> Result<EpochSummary> {
    config.attack = Some(attack);
    train_epoch(model, optimizer, data, &config, seed, epoch, trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_mlp;
    use crate::rng::component_rng;

    fn toy() -> (Model, Tensor, Vec<usize>) {
        let m = build_mlp(&[6, 8, 3], 4).unwrap();
        let x = Tensor::new(vec![5, 6], (0..30).map(|i| ((i * 7 % 31) as f64) / 31.0).collect()).unwrap();
        (m, x, vec![0, 1, 2, 1, 0])
    }

    #[test]
    fn zero_radius_returns_input() {
        let (m, x, y) = toy();
        let cfg = AttackConfig {
            epsilon: 0.0,
            ..AttackConfig::train_default()
        };
        let adv = pgd_attack(&m, &x, &y, &cfg, &mut component_rng(0, 0)).unwrap();
        assert_eq!(adv, x);
    }

    #[test]
    fn perturbation_stays_in_ball_and_bounds() {
        let (m, x, y) = toy();
        let cfg = AttackConfig::train_default();
        let adv = pgd_attack(&m, &x, &y, &cfg, &mut component_rng(1, 0)).unwrap();
        for (a, b) in adv.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= cfg.epsilon);
            assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn attack_is_deterministic_and_leaves_model_alone() {
        let (m, x, y) = toy();
        let before = m.clone();
        let cfg = AttackConfig::eval_default();
        let a = pgd_attack(&m, &x, &y, &cfg, &mut component_rng(2, 0)).unwrap();
        let b = pgd_attack(&m, &x, &y, &cfg, &mut component_rng(2, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(m, before);
    }

    #[test]
    fn negative_radius_is_rejected() {
        let (m, x, y) = toy();
        let cfg = AttackConfig {
            epsilon: -0.1,
            ..AttackConfig::train_default()
        };
        assert!(matches!(pgd_attack(&m, &x, &y, &cfg, &mut component_rng(0, 0)), Err(Error::Config { .. })));
    }

    #[test]
    fn projection_is_exact() {
        let eps = 8.0 / 255.0;
        for &x in &[0.1, 0.3333333333333333, 0.7, 0.999, 1e-3] {
            for &d in &[eps, -eps, 2.0 * eps, -3.0 * eps, eps * (1.0 + 1e-15)] {
                let v = project(x, d, eps, (0.0, 1.0));
                assert!((v - x).abs() <= eps && (0.0..=1.0).contains(&v));
            }
        }
    }
}
