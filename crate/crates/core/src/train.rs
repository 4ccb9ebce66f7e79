//! Mini-batch training epochs and evaluation passes.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::adversarial::{pgd_attack, AttackConfig};
use crate::data::{pad_and_crop, Dataset};
use crate::dog::{DogTrace, TraceRow};
use crate::error::{Error, Result};
use crate::model::{argmax, Model};
use crate::optimizer::{Optimizer, StepReport};
use crate::rng::{mix, sub_rng, tag};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augment {
    pub pad: usize,
    pub flip: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochConfig {
    pub batch_size: usize,
    pub attack: Option<AttackConfig>,
    pub augment: Option<Augment>,
    /// Log every `log_stride`-th step to the trace.
    pub log_stride: u64,
}

impl Default for EpochConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            attack: None,
            augment: None,
            log_stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    /// Mean batch cross-entropy on the inputs actually trained on.
    pub mean_xent: f64,
    pub steps: u64,
    /// Mean applied decay coefficient over the epoch's steps.
    pub lambda_mean: f64,
    pub last_lr: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    /// Largest `|x_adv − x|` over the epoch's attacked inputs; 0 without an attack.
    pub max_perturbation: f64,
    pub reports: Vec<StepReport>,
}

pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}

pub fn train_epoch(
    model: &mut Model,
    optimizer: &mut Optimizer,
    data: &Dataset,
    config: &EpochConfig,
    seed: u64,
    epoch: usize,
    mut trace: Option<&mut DogTrace>,
) -> Result<EpochSummary> {
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut sub_rng(seed, tag::SHUFFLE, epoch as u64));

    let mut summary = EpochSummary {
        mean_xent: 0.0,
        steps: 0,
        lambda_mean: 0.0,
        last_lr: optimizer.state.current_lr()?,
        theta_min: f64::INFINITY,
        theta_max: f64::NEG_INFINITY,
        max_perturbation: 0.0,
        reports: Vec::new(),
    };
    for (b, idx) in order.chunks(config.batch_size.max(1)).enumerate() {
        let (mut x, y) = data.batch(idx);
        let batch_seed = mix(seed, epoch as u64, b as u64);
        if let Some(aug) = config.augment {
            if x.shape().len() == 4 {
                x = pad_and_crop(&x, aug.pad, aug.flip, batch_seed)?;
            }
        }
        if let Some(attack) = &config.attack {
            let mut rng = sub_rng(batch_seed, tag::ATTACK, 0);
            let adv = pgd_attack(model, &x, &y, attack, &mut rng)?;
            for (a, o) in adv.data().iter().zip(x.data()) {
                summary.max_perturbation = summary.max_perturbation.max((a - o).abs());
            }
            x = adv;
        }
        let stats = model.compute_gradients(&x, &y)?;
        if !stats.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: optimizer.state.step,
            });
        }
        let report = optimizer.step(model)?;
        if let Some(trace) = trace.as_deref_mut() {
            if report.step % config.log_stride.max(1) == 0 {
                trace.push(TraceRow {
                    step: report.step,
                    epoch,
                    weight_norm: report.weight_norm,
                    grad_norm: report.grad_norm,
                    lambda_eff: report.lambda_t,
                    xent: stats.loss,
                })?;
            }
        }
        summary.mean_xent += stats.loss;
        summary.lambda_mean += report.lambda_applied;
        summary.last_lr = report.lr;
        summary.theta_min = summary.theta_min.min(report.theta_min);
        summary.theta_max = summary.theta_max.max(report.theta_max);
        summary.steps += 1;
        summary.reports.push(report);
    }
    summary.mean_xent /= summary.steps as f64;
    summary.lambda_mean /= summary.steps as f64;
    Ok(summary)
}

const EVAL_CHUNK: usize = 512;

/// Mean cross-entropy and accuracy on clean inputs. Non-finite logits count as wrong.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let parts: Result<Vec<(f64, usize)>> = indices
        .par_chunks(EVAL_CHUNK)
        .map(|idx| {
            let (x, y) = data.batch(idx);
            let loss = model.loss(&x, &y)?;
            let logits = model.logits(&x)?;
            let correct = logits
                .data()
                .chunks(model.classes())
                .zip(&y)
                .filter(|(row, &label)| argmax(row) == Some(label))
                .count();
            Ok((loss * idx.len() as f64, correct))
        })
        .collect();
    let (loss_sum, correct) = parts?.into_iter().fold((0.0, 0), |(l, c), (a, b)| (l + a, c + b));
    Ok((loss_sum / data.len() as f64, correct as f64 / data.len() as f64))
}

pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    Ok(evaluate(model, data)?.1)
}

/// Per-example correctness on clean inputs.
pub fn correct_mask(model: &Model, data: &Dataset) -> Result<Vec<bool>> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let parts: Result<Vec<Vec<bool>>> = indices
        .par_chunks(EVAL_CHUNK)
        .map(|idx| {
            let (x, y) = data.batch(idx);
            let logits = model.logits(&x)?;
            Ok(logits
                .data()
                .chunks(model.classes())
                .zip(&y)
                .map(|(row, &label)| argmax(row) == Some(label))
                .collect())
        })
        .collect();
    Ok(parts?.into_iter().flatten().collect())
}
