//! Decay-over-gradient statistics.
//!
//! During fixed-decay training every step logs `‖w‖`, `‖∇w‖`, the decay
//! coefficient and the batch cross-entropy. The DoG of a step is
//! `λ · ‖w‖ / ‖∇w‖`; [`estimate_dog`] averages it from the first step up to
//! the epoch where the epoch-mean training loss stops improving.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Gradient norms at or below this make a step's DoG undefined.
pub const GRAD_NORM_EPS: f64 = 1e-12;

pub const TRACE_HEADER: &str = "step,epoch,weight_norm,grad_norm,lambda_eff,xent";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    /// Zero-based index of the training epoch the step belongs to.
    pub epoch: usize,
    pub weight_norm: f64,
    pub grad_norm: f64,
    pub lambda_eff: f64,
    pub xent: f64,
}

/// Append-only per-iteration log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DogTrace {
    rows: Vec<TraceRow>,
}

impl DogTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: TraceRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(Error::Input(format!(
                    "trace steps must increase: {} after {}",
                    row.step, last.step
                )));
            }
        }
        if !(row.weight_norm >= 0.0) || !(row.grad_norm >= 0.0) {
            return Err(Error::Input(format!("negative or NaN norm at step {}", row.step)));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Mean logged cross-entropy per epoch, indexed by epoch.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let epochs = self.rows.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        let mut sums = vec![(0.0, 0usize); epochs];
        for r in &self.rows {
            sums[r.epoch].0 += r.xent;
            sums[r.epoch].1 += 1;
        }
        sums.into_iter()
            .map(|(s, n)| if n == 0 { f64::NAN } else { s / n as f64 })
            .collect()
    }

    /// Per-row DoG, `None` where the gradient norm is too small.
    pub fn dog_values(&self) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .map(|r| dog_value(r.lambda_eff, r.weight_norm, r.grad_norm))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step, r.epoch, r.weight_norm, r.grad_norm, r.lambda_eff, r.xent
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(TRACE_HEADER) {
            return Err(Error::Format(format!("trace CSV must start with `{TRACE_HEADER}`")));
        }
        let mut trace = DogTrace::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = |what: &str| Error::Format(format!("trace line {}: bad {what}", i + 2));
            if f.len() != 6 {
                return Err(bad("column count"));
            }
            let num = |s: &str, what: &str| s.trim().parse::<f64>().map_err(|_| bad(what));
            trace.push(TraceRow {
                step: f[0].trim().parse().map_err(|_| bad("step"))?,
                epoch: f[1].trim().parse().map_err(|_| bad("epoch"))?,
                weight_norm: num(f[2], "weight_norm")?,
                grad_norm: num(f[3], "grad_norm")?,
                lambda_eff: num(f[4], "lambda_eff")?,
                xent: num(f[5], "xent")?,
            })?;
        }
        Ok(trace)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }
}

/// `λ · ‖w‖ / ‖∇w‖`, or `None` when `‖∇w‖ ≤ ε`.
pub fn dog_value(lambda: f64, weight_norm: f64, grad_norm: f64) -> Option<f64> {
    if grad_norm <= GRAD_NORM_EPS {
        return None;
    }
    Some(lambda * weight_norm / grad_norm)
}

/// First epoch `e` at which the relative improvement
/// `(L[e−1] − L[e]) / max(L[e−1], 1e-12)` has stayed below `tol` for
/// `patience` consecutive epochs ending at `e`; the last epoch otherwise.
pub fn plateau_epoch(epoch_losses: &[f64], tol: f64, patience: usize) -> Result<usize> {
    if epoch_losses.len() < patience + 1 {
        return Err(Error::Input(format!(
            "plateau detection with patience {patience} needs at least {} epochs, got {}",
            patience + 1,
            epoch_losses.len()
        )));
    }
    let mut run = 0;
    for e in 1..epoch_losses.len() {
        let prev = epoch_losses[e - 1];
        let improvement = (prev - epoch_losses[e]) / prev.max(1e-12);
        if improvement < tol {
            run += 1;
            if run >= patience {
                return Ok(e);
            }
        } else {
            run = 0;
        }
    }
    Ok(epoch_losses.len() - 1)
}

/// Arithmetic mean of defined per-step DoG values from the first step
/// through the end of the plateau epoch.
pub fn estimate_dog(trace: &DogTrace, tol: f64, patience: usize) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::Estimation("empty trace".into()));
    }
    let losses = trace.epoch_losses();
    // short traces have no room for a plateau; use all of them
    let last_epoch = if losses.len() > patience {
        plateau_epoch(&losses, tol, patience)?
    } else {
        losses.len() - 1
    };
    let (sum, count) = trace
        .rows()
        .iter()
        .zip(trace.dog_values())
        .filter(|(r, _)| r.epoch <= last_epoch)
        .filter_map(|(_, d)| d)
        .fold((0.0, 0usize), |(s, n), d| (s + d, n + 1));
    if count == 0 {
        return Err(Error::Estimation(
            "every trace row up to the plateau has an undefined DoG".into(),
        ));
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64, epoch: usize, wn: f64, gn: f64, lambda: f64, xent: f64) -> TraceRow {
        TraceRow {
            step,
            epoch,
            weight_norm: wn,
            grad_norm: gn,
            lambda_eff: lambda,
            xent,
        }
    }

    #[test]
    fn dog_value_examples() {
        assert!((dog_value(0.0005, 24.0, 0.75).unwrap() - 0.016).abs() < 1e-15);
        assert_eq!(dog_value(0.0, 24.0, 0.75), Some(0.0));
        assert_eq!(dog_value(0.1, 1.0, 0.0), None);
    }

    #[test]
    fn plateau_examples() {
        assert_eq!(plateau_epoch(&[1.0; 10], 1e-3, 5).unwrap(), 5);
        let geometric: Vec<f64> = (0..30).map(|e| 0.5f64.powi(e)).collect();
        assert_eq!(plateau_epoch(&geometric, 1e-3, 5).unwrap(), 29);
        // strong decay through epoch 20, flat afterwards
        let mut curve: Vec<f64> = (0..=20).map(|e| 2.0 * 0.8f64.powi(e)).collect();
        curve.extend(std::iter::repeat(curve[20]).take(19));
        assert_eq!(plateau_epoch(&curve, 1e-3, 5).unwrap(), 25);
        assert!(plateau_epoch(&[1.0; 5], 1e-3, 5).is_err());
    }

    #[test]
    fn improvement_counter_resets() {
        // four flat epochs, a big drop, then flat again
        let curve = [1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5];
        assert_eq!(plateau_epoch(&curve, 1e-3, 5).unwrap(), 10);
    }

    #[test]
    fn constant_dog_estimate() {
        let mut t = DogTrace::new();
        for s in 0..40u64 {
            let g = 0.5 + (s % 7) as f64 * 0.1;
            // λ·‖w‖/‖∇w‖ = 0.02 exactly by construction
            t.push(row(s, (s / 4) as usize, 0.02 * g / 0.001, g, 0.001, 1.0 / (s + 1) as f64)).unwrap();
        }
        assert!((estimate_dog(&t, 1e-3, 2).unwrap() - 0.02).abs() < 1e-12);
    }

    #[test]
    fn estimate_uses_prefix_up_to_plateau() {
        let mut t = DogTrace::new();
        let mut step = 0;
        for epoch in 0..20 {
            let dog = if epoch < 10 { 0.01 } else { 0.03 };
            // loss falls fast until epoch 4, then stays flat: plateau at 4 + 5 = 9
            let xent = if epoch <= 4 { 2.0 * 0.5f64.powi(epoch as i32) } else { 0.125 };
            for _ in 0..3 {
                t.push(row(step, epoch, dog * 2.0 / 0.1, 2.0, 0.1, xent)).unwrap();
                step += 1;
            }
        }
        assert_eq!(plateau_epoch(&t.epoch_losses(), 1e-3, 5).unwrap(), 9);
        assert!((estimate_dog(&t, 1e-3, 5).unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn undefined_rows_are_excluded() {
        let mut t = DogTrace::new();
        t.push(row(0, 0, 10.0, 0.0, 0.1, 1.0)).unwrap();
        t.push(row(1, 0, 10.0, 2.0, 0.1, 1.0)).unwrap();
        assert!((estimate_dog(&t, 1e-3, 5).unwrap() - 0.5).abs() < 1e-15);

        let mut t = DogTrace::new();
        t.push(row(0, 0, 10.0, 0.0, 0.1, 1.0)).unwrap();
        assert!(matches!(estimate_dog(&t, 1e-3, 5), Err(Error::Estimation(_))));
        assert!(matches!(estimate_dog(&DogTrace::new(), 1e-3, 5), Err(Error::Estimation(_))));
    }

    #[test]
    fn trace_rejects_out_of_order_steps() {
        let mut t = DogTrace::new();
        t.push(row(3, 0, 1.0, 1.0, 0.0, 1.0)).unwrap();
        assert!(t.push(row(3, 0, 1.0, 1.0, 0.0, 1.0)).is_err());
        assert!(t.push(row(4, 0, -1.0, 1.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut t = DogTrace::new();
        t.push(row(0, 0, 1.25, 0.1 + 0.2, 5e-4, 2.302585092994046)).unwrap();
        t.push(row(5, 1, 3.0, 1e-13, 5e-4, 0.7)).unwrap();
        let csv = t.to_csv();
        assert!(csv.starts_with("step,epoch,weight_norm,grad_norm,lambda_eff,xent\n"));
        assert_eq!(DogTrace::from_csv(&csv).unwrap(), t);
    }
}
