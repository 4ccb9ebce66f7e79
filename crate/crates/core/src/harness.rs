//! Experiment orchestration: seeded runs, metric logging, checkpointing and
//! hyperparameter grids.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::adversarial::robust_accuracy;
use crate::checkpoint::Checkpoint;
use crate::config::{DatasetKind, EarlyStopRule, ExperimentConfig, ModeKind, ModelKind, ScheduleKind};
use crate::data::{
    flip_labels_symmetric, read_csv_dataset, read_dataset, split_indices, synth_clusters, synth_images, Dataset,
    ImageOptions, NoiseSpec,
};
use crate::dog::{estimate_dog, DogTrace};
use crate::error::{Error, Result};
use crate::model::{build_small_cnn, param_l2_norm, Layer, Model};
use crate::optimizer::{Optimizer, Schedule};
use crate::rng::tag;
use crate::train::{batches_per_epoch, correct_mask, evaluate, train_epoch, Augment, EpochConfig};

pub const METRICS_HEADER: &str = "epoch,train_xent,train_acc,val_acc,test_acc,robust_val_acc,weight_norm,lambda_mean,lr";
pub const GRID_HEADER: &str = "lr,lambda_or_dog,val_acc";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_xent: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub robust_val_acc: Option<f64>,
    pub weight_norm: f64,
    pub lambda_mean: f64,
    pub lr: f64,
}

impl MetricsRecord {
    fn csv_row(&self) -> String {
        let robust = self.robust_val_acc.map(|r| r.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.train_xent,
            self.train_acc,
            self.val_acc,
            self.test_acc,
            robust,
            self.weight_norm,
            self.lambda_mean,
            self.lr
        )
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Train/val/test splits of one run, plus the label-noise record for `train`.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub train_noise: Option<NoiseSpec>,
}

impl PreparedData {
    /// Training labels before noise injection.
    pub fn clean_train_labels(&self) -> Vec<usize> {
        match &self.train_noise {
            Some(spec) => spec.restore(&self.train.labels),
            None => self.train.labels.clone(),
        }
    }
}

fn load_file_dataset(path: &str) -> Result<Dataset> {
    let p = Path::new(path);
    if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        read_csv_dataset(p)
    } else {
        read_dataset(p)
    }
}

/// Builds the pool and test set, splits off validation, then injects label noise.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let d = &cfg.dataset;
    let seed = cfg.seed;
    let image_opts = ImageOptions {
        channels: d.channels,
        contrast: d.contrast,
        noise: d.noise,
        max_shift: d.max_shift,
        blob: d.blob,
    };
    let (pool, test) = match d.kind {
        DatasetKind::Clusters => (
            synth_clusters(d.classes, d.dim, d.per_class, d.separation, seed)?,
            synth_clusters(d.classes, d.dim, d.test_per_class, d.separation, seed ^ tag::TEST_DATA)?,
        ),
        DatasetKind::Images => (
            synth_images(d.classes, d.height, d.width, d.per_class, image_opts, seed)?,
            synth_images(d.classes, d.height, d.width, d.test_per_class, image_opts, seed ^ tag::TEST_DATA)?,
        ),
        DatasetKind::File => {
            let pool = load_file_dataset(d.path.as_deref().expect("validated"))?;
            let test = match &d.test_path {
                Some(p) => load_file_dataset(p)?,
                None => pool.clone(),
            };
            (pool, test)
        }
    };
    let (train_idx, val_idx) = split_indices(&pool.labels, pool.num_classes, d.val_fraction, seed)?;
    let mut train = pool.subset(&train_idx);
    let mut val = pool.subset(&val_idx);
    let mut train_noise = None;
    if cfg.noise.rate > 0.0 {
        let (noisy, spec) = flip_labels_symmetric(&train.labels, train.num_classes, cfg.noise.rate, seed)?;
        train.labels = noisy;
        train_noise = Some(spec);
        let (noisy_val, _) = flip_labels_symmetric(&val.labels, val.num_classes, cfg.noise.rate, seed ^ tag::VAL_NOISE)?;
        val.labels = noisy_val;
    }
    Ok(PreparedData {
        train,
        val,
        test,
        train_noise,
    })
}

/// MLP over an arbitrary example shape: flatten, then Linear+ReLU blocks.
pub fn build_mlp_for(input_shape: &[usize], hidden: &[usize], classes: usize, seed: u64) -> Result<Model> {
    let mut layers = vec![Layer::Flatten];
    let mut width: usize = input_shape.iter().product();
    for &h in hidden {
        layers.push(Layer::Linear {
            input: width,
            output: h,
            bias: true,
        });
        layers.push(Layer::Relu);
        width = h;
    }
    layers.push(Layer::Linear {
        input: width,
        output: classes,
        bias: true,
    });
    Model::from_layers(layers, input_shape.to_vec(), seed)
}

pub fn build_model(cfg: &ExperimentConfig, example_shape: &[usize], classes: usize) -> Result<Model> {
    match cfg.model.kind {
        ModelKind::Mlp => build_mlp_for(example_shape, &cfg.model.hidden, classes, cfg.seed),
        ModelKind::Cnn => {
            let shape: [usize; 3] = example_shape
                .try_into()
                .map_err(|_| Error::config("model.kind", "cnn needs C×H×W image data"))?;
            build_small_cnn(shape, &cfg.model.channels, classes, cfg.seed)
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<MetricsRecord>,
    pub trace: DogTrace,
    pub model: Model,
    /// `(epoch, metric, model)` selected by the early-stopping rule.
    pub best: Option<(usize, f64, Model)>,
    pub data: PreparedData,
    /// Extremes of AdaDecay's θ over the run (1 for other modes).
    pub theta_range: (f64, f64),
    /// Largest `‖δ‖∞` among the training-time attacks, when the attack is enabled.
    pub max_perturbation: Option<f64>,
    /// Set when training stopped on a non-finite loss or gradient.
    pub aborted: Option<String>,
    pub artifacts: Vec<PathBuf>,
}

impl RunOutcome {
    pub fn final_record(&self) -> &MetricsRecord {
        self.records.last().expect("at least the epoch-0 row")
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.records)
    }
}

fn eval_record(
    cfg: &ExperimentConfig,
    model: &Model,
    data: &PreparedData,
    epoch: usize,
    with_robust: bool,
) -> Result<MetricsRecord> {
    let (train_xent, train_acc) = evaluate(model, &data.train)?;
    let (_, val_acc) = evaluate(model, &data.val)?;
    let (_, test_acc) = evaluate(model, &data.test)?;
    let robust_val_acc = if with_robust {
        Some(robust_accuracy(model, &data.val, &cfg.attack.eval_attack(), cfg.seed)?)
    } else {
        None
    };
    Ok(MetricsRecord {
        epoch,
        train_xent,
        train_acc,
        val_acc,
        test_acc,
        robust_val_acc,
        weight_norm: param_l2_norm(model),
        lambda_mean: 0.0,
        lr: cfg.optim.lr,
    })
}

/// Trains one model end to end as described by `cfg`. Deterministic in
/// `cfg` (including the seed). When `cfg.output.dir` is set, writes
/// `metrics.csv`, `dog_trace.csv`, `config.toml`, `final.ckpt` and, unless
/// early stopping is off, `best.ckpt`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let mut model = build_model(cfg, data.train.example_shape(), data.train.num_classes)?;
    let steps_per_epoch = batches_per_epoch(data.train.len(), cfg.train.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.train.epochs as u64;
    let mut optimizer = Optimizer::new(
        &model,
        cfg.optim.regularizer(),
        cfg.optim.momentum,
        cfg.optim.lr,
        total_steps.max(1),
    )?;
    if cfg.optim.schedule == ScheduleKind::Constant {
        optimizer.state.schedule = Schedule::Constant;
    }
    let epoch_cfg = EpochConfig {
        batch_size: cfg.train.batch_size,
        attack: cfg.attack.enabled.then(|| cfg.attack.train_attack()),
        augment: cfg.augment.pad_crop.then_some(Augment {
            pad: cfg.augment.pad,
            flip: cfg.augment.flip,
        }),
        log_stride: cfg.train.log_stride,
    };
    let robust_each_epoch = cfg.early_stop.rule == EarlyStopRule::RobustVal;

    let mut trace = DogTrace::new();
    let mut records = vec![eval_record(cfg, &model, &data, 0, robust_each_epoch)?];
    let mut best: Option<(usize, f64, Model)> = None;
    let mut theta_range = (f64::INFINITY, f64::NEG_INFINITY);
    let mut aborted = None;
    let mut max_perturbation = cfg.attack.enabled.then_some(0.0_f64);

    let consider = |best: &mut Option<(usize, f64, Model)>, rec: &MetricsRecord, model: &Model| {
        let metric = match cfg.early_stop.rule {
            EarlyStopRule::None => return,
            EarlyStopRule::CleanVal => rec.val_acc,
            EarlyStopRule::RobustVal => rec.robust_val_acc.unwrap_or(f64::NAN),
        };
        if metric.is_finite() && best.as_ref().is_none_or(|(_, m, _)| metric > *m) {
            *best = Some((rec.epoch, metric, model.clone()));
        }
    };
    consider(&mut best, &records[0], &model);

    for epoch in 1..=cfg.train.epochs {
        match train_epoch(&mut model, &mut optimizer, &data.train, &epoch_cfg, cfg.seed, epoch - 1, Some(&mut trace)) {
            Ok(summary) => {
                theta_range.0 = theta_range.0.min(summary.theta_min);
                theta_range.1 = theta_range.1.max(summary.theta_max);
                if let Some(m) = max_perturbation.as_mut() {
                    *m = m.max(summary.max_perturbation);
                }
                let check_now = epoch % cfg.early_stop.stride == 0 || epoch == cfg.train.epochs;
                let mut rec = eval_record(cfg, &model, &data, epoch, robust_each_epoch && check_now)?;
                rec.lambda_mean = summary.lambda_mean;
                rec.lr = summary.last_lr;
                if check_now {
                    consider(&mut best, &rec, &model);
                }
                records.push(rec);
            }
            Err(e @ (Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. })) => {
                let mut rec = eval_record(cfg, &model, &data, epoch, false)?;
                rec.train_xent = f64::NAN;
                rec.lambda_mean = f64::NAN;
                rec.lr = optimizer.state.current_lr()?;
                records.push(rec);
                aborted = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if cfg.optim.mode != ModeKind::Adadecay || !theta_range.0.is_finite() {
        theta_range = (1.0, 1.0);
    }

    let mut artifacts = Vec::new();
    if let Some(dir) = &cfg.output.dir {
        let dir = PathBuf::from(dir);
        fs::create_dir_all(&dir)?;
        let mut write = |name: &str, bytes: &[u8]| -> Result<()> {
            let path = dir.join(name);
            fs::write(&path, bytes)?;
            artifacts.push(path);
            Ok(())
        };
        write("config.toml", cfg.to_toml().as_bytes())?;
        write("metrics.csv", metrics_csv(&records).as_bytes())?;
        write("dog_trace.csv", trace.to_csv().as_bytes())?;
        let last = records.last().expect("epoch-0 row");
        let final_ck = Checkpoint {
            model: model.clone(),
            optimizer: Some(optimizer.state.clone()),
            epoch: last.epoch,
            metric: last.val_acc,
        };
        write("final.ckpt", &final_ck.to_bytes())?;
        if let Some((epoch, metric, m)) = &best {
            let ck = Checkpoint {
                model: m.clone(),
                optimizer: None,
                epoch: *epoch,
                metric: *metric,
            };
            write("best.ckpt", &ck.to_bytes())?;
        }
    }

    Ok(RunOutcome {
        records,
        trace,
        model,
        best,
        data,
        theta_range,
        max_perturbation,
        aborted,
        artifacts,
    })
}

/// Fraction of label-flipped training examples the model predicts with
/// their flipped label. NaN when no label was flipped.
pub fn memorized_fraction(model: &Model, data: &PreparedData) -> Result<f64> {
    Ok(subset_train_accuracy(model, data)?.0)
}

/// Training accuracy against the (noisy) training labels, split into the
/// `(flipped, untouched)` subsets; NaN for an empty subset.
pub fn subset_train_accuracy(model: &Model, data: &PreparedData) -> Result<(f64, f64)> {
    let flipped = match &data.train_noise {
        Some(spec) => spec.is_flipped(data.train.len()),
        None => vec![false; data.train.len()],
    };
    let fits = correct_mask(model, &data.train)?;
    let rate = |want: bool| {
        let total = flipped.iter().filter(|&&f| f == want).count();
        let hit = flipped.iter().zip(&fits).filter(|(&f, &c)| f == want && c).count();
        if total == 0 {
            f64::NAN
        } else {
            hit as f64 / total as f64
        }
    };
    Ok((rate(true), rate(false)))
}

/// Runs `cfg` once per seed, in parallel; results are in seed order.
pub fn run_seeds(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<RunOutcome>> {
    seeds
        .par_iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.seed = s;
            if let Some(dir) = &cfg.output.dir {
                c.output.dir = Some(format!("{dir}/seed{s}"));
            }
            run_experiment(&c)
        })
        .collect()
}

/// Runs a fixed-decay training job and estimates DoG from its trace.
pub fn estimate_dog_from_run(cfg: &ExperimentConfig) -> Result<(f64, RunOutcome)> {
    if cfg.optim.mode != ModeKind::Fixed {
        return Err(Error::config("optim.mode", "DoG estimation needs a fixed weight-decay run"));
    }
    let outcome = run_experiment(cfg)?;
    if let Some(reason) = &outcome.aborted {
        return Err(Error::Estimation(format!("training diverged: {reason}")));
    }
    let dog = estimate_dog(&outcome.trace, cfg.dog.tol, cfg.dog.patience)?;
    Ok((dog, outcome))
}

/// `start · (end/start)^(i/(length−1))` with exact endpoints.
pub fn geometric_sequence(start: f64, end: f64, length: usize) -> Result<Vec<f64>> {
    if !(start > 0.0 && end > 0.0 && start.is_finite() && end.is_finite()) {
        return Err(Error::config("grid", format!("geometric endpoints must be positive, got {start} and {end}")));
    }
    if length < 2 {
        return Err(Error::config("grid", "geometric sequence needs length >= 2"));
    }
    let ratio = end / start;
    Ok((0..length)
        .map(|i| match i {
            0 => start,
            i if i == length - 1 => end,
            i => start * ratio.powf(i as f64 / (length - 1) as f64),
        })
        .collect())
}

/// Validation accuracy over an `lr × decay` grid; `cells[i][j]` is `lrs[i]`, `decays[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub lrs: Vec<f64>,
    pub decays: Vec<f64>,
    pub cells: Vec<Vec<f64>>,
}

fn rank(v: f64) -> f64 {
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

impl GridResult {
    /// Best cell; ties go to the first in row-major order.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        for (i, row) in self.cells.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if rank(v) > rank(self.cells[best.0][best.1]) {
                    best = (i, j);
                }
            }
        }
        best
    }

    /// For each learning rate, the best decay index.
    pub fn best_per_row(&self) -> Vec<usize> {
        self.cells.iter().map(|row| best_index(row.iter().copied())).collect()
    }

    /// For each decay value, the best learning-rate index.
    pub fn best_per_column(&self) -> Vec<usize> {
        (0..self.decays.len())
            .map(|j| best_index(self.cells.iter().map(|row| row[j])))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(GRID_HEADER);
        out.push('\n');
        for (i, lr) in self.lrs.iter().enumerate() {
            for (j, d) in self.decays.iter().enumerate() {
                let _ = writeln!(out, "{lr},{d},{}", self.cells[i][j]);
            }
        }
        out
    }
}

fn best_index(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if rank(v) > best.1 {
            best = (i, rank(v));
        }
    }
    best.0
}

/// Evaluates every `(lr, decay)` cell, in parallel. Cells are independent,
/// so order does not matter; failed cells are NaN.
pub fn grid_search_2d<F>(lrs: &[f64], decays: &[f64], eval: F) -> Result<GridResult>
where
    F: Fn(f64, f64) -> Result<f64> + Sync,
{
    if lrs.is_empty() || decays.is_empty() {
        return Err(Error::Input("grid axes must be nonempty".into()));
    }
    let flat: Vec<f64> = (0..lrs.len() * decays.len())
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / decays.len(), k % decays.len());
            eval(lrs[i], decays[j]).unwrap_or(f64::NAN)
        })
        .collect();
    Ok(GridResult {
        lrs: lrs.to_vec(),
        decays: decays.to_vec(),
        cells: flat.chunks(decays.len()).map(<[f64]>::to_vec).collect(),
    })
}

/// Grid of full training runs; each cell reports its final validation accuracy.
pub fn grid_search_experiments(base: &ExperimentConfig, lrs: &[f64], decays: &[f64]) -> Result<GridResult> {
    grid_search_2d(lrs, decays, |lr, decay| {
        let mut cfg = base.clone();
        cfg.optim.lr = lr;
        cfg.optim.set_decay_value(decay);
        cfg.output.dir = None;
        let out = run_experiment(&cfg)?;
        Ok(out.final_record().val_acc)
    })
}

/// Alternating one-dimensional searches over a finished grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AlternatingSearch {
    /// Cells visited, starting with the initial guess.
    pub path: Vec<(usize, usize)>,
    pub end: (usize, usize),
}

/// From `start = (lr index, decay index)`: best lr with decay fixed, then
/// best decay with lr fixed, repeated until neither move changes the cell.
pub fn alternating_1d_search(grid: &GridResult, start: (usize, usize)) -> AlternatingSearch {
    let mut cur = start;
    let mut path = vec![cur];
    let bound = 2 * (grid.lrs.len() + grid.decays.len()) + 2;
    for _ in 0..bound {
        let i = best_index(grid.cells.iter().map(|row| row[cur.1]));
        let after_lr = (i, cur.1);
        let j = best_index(grid.cells[after_lr.0].iter().copied());
        let next = (after_lr.0, j);
        if next == cur {
            break;
        }
        if after_lr != cur {
            path.push(after_lr);
        }
        if next != after_lr {
            path.push(next);
        }
        cur = next;
    }
    AlternatingSearch { path, end: cur }
}

/// One-dimensional sweep: the `values` axis varies, the other stays at the base config.
pub fn grid_search_1d(base: &ExperimentConfig, axis: GridAxis, values: &[f64]) -> Result<GridResult> {
    match axis {
        GridAxis::Lr => grid_search_experiments(base, values, &[base.optim.decay_value()]),
        GridAxis::Decay => grid_search_experiments(base, &[base.optim.lr], values),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridAxis {
    Lr,
    Decay,
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}
