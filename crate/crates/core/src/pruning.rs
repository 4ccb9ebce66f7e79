//! One-shot global magnitude pruning.

use std::cmp::Ordering;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::accuracy;

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub sparsity: f64,
    /// Number of entries eligible for pruning.
    pub prunable: usize,
    /// `floor(sparsity · prunable)`.
    pub pruned: usize,
    /// `(tensor name, entries zeroed)` for each eligible tensor.
    pub per_tensor: Vec<(String, usize)>,
}

/// Zeroes the `floor(s · M)` smallest-magnitude entries ranked jointly over
/// all prunable tensors, ties broken by `(tensor name, flat index)`.
/// Returns a pruned copy; `model` is untouched.
pub fn global_l1_prune(model: &Model, sparsity: f64, include_biases: bool) -> Result<(Model, PruneReport)> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::Range(format!("sparsity must be in [0, 1], got {sparsity}")));
    }
    let eligible: Vec<usize> = model
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.prunable || include_biases)
        .map(|(i, _)| i)
        .collect();
    let mut entries: Vec<(f64, &str, usize, usize)> = eligible
        .iter()
        .flat_map(|&pi| {
            let p = &model.params()[pi];
            p.tensor
                .data()
                .iter()
                .enumerate()
                .map(move |(j, w)| (w.abs(), p.name.as_str(), j, pi))
        })
        .collect();
    let total = entries.len();
    let k = (sparsity * total as f64).floor() as usize;
    let order = |a: &(f64, &str, usize, usize), b: &(f64, &str, usize, usize)| -> Ordering {
        a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)).then_with(|| a.2.cmp(&b.2))
    };
    if k > 0 && k < total {
        entries.select_nth_unstable_by(k - 1, order);
    }
    let mut pruned = model.clone();
    let mut counts = vec![0usize; model.params().len()];
    for &(_, _, j, pi) in entries.iter().take(k) {
        pruned.params_mut()[pi].tensor.data_mut()[j] = 0.0;
        counts[pi] += 1;
    }
    let per_tensor = eligible
        .iter()
        .map(|&pi| (model.params()[pi].name.clone(), counts[pi]))
        .collect();
    Ok((
        pruned,
        PruneReport {
            sparsity,
            prunable: total,
            pruned: k,
            per_tensor,
        },
    ))
}

/// Accuracy of a freshly pruned copy at each sparsity (ascending).
pub fn prune_sweep(model: &Model, data: &Dataset, sparsities: &[f64]) -> Result<Vec<(f64, f64)>> {
    if sparsities.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Input("sparsities must be sorted ascending".into()));
    }
    sparsities
        .iter()
        .map(|&s| {
            let (pruned, _) = global_l1_prune(model, s, false)?;
            Ok((s, accuracy(&pruned, data)?))
        })
        .collect()
}

pub const SWEEP_HEADER: &str = "sparsity,accuracy";

pub fn sweep_csv(rows: &[(f64, f64)]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for (s, a) in rows {
        out.push_str(&format!("{s},{a}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_mlp;

    #[test]
    fn zero_sparsity_is_identity() {
        let m = build_mlp(&[4, 5, 3], 1).unwrap();
        let (p, r) = global_l1_prune(&m, 0.0, false).unwrap();
        assert_eq!(p, m);
        assert_eq!(r.pruned, 0);
    }

    #[test]
    fn ranking_example() {
        let mut m = build_mlp(&[2, 2], 0).unwrap();
        m.params_mut()[0].tensor.data_mut().copy_from_slice(&[3.0, -1.0, 0.5, 2.0]);
        m.params_mut()[1].tensor.data_mut().copy_from_slice(&[0.01, 0.02]);
        let (p, r) = global_l1_prune(&m, 0.5, false).unwrap();
        assert_eq!(p.params()[0].tensor.data(), &[3.0, 0.0, 0.0, 2.0]);
        assert_eq!(p.params()[1].tensor.data(), &[0.01, 0.02]);
        assert_eq!(r.per_tensor, vec![("fc1.weight".to_string(), 2)]);
    }

    #[test]
    fn ties_break_by_name_then_index() {
        let mut m = build_mlp(&[2, 2, 2], 0).unwrap();
        m.params_mut()[0].tensor.data_mut().fill(1.0);
        m.params_mut()[2].tensor.data_mut().fill(1.0);
        let (p, _) = global_l1_prune(&m, 0.25, false).unwrap();
        assert_eq!(p.params()[0].tensor.data(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(p.params()[2].tensor.data(), &[1.0; 4]);
    }

    #[test]
    fn biases_optional() {
        let mut m = build_mlp(&[1, 2], 0).unwrap();
        m.params_mut()[0].tensor.data_mut().copy_from_slice(&[5.0, 6.0]);
        m.params_mut()[1].tensor.data_mut().copy_from_slice(&[0.1, 7.0]);
        let (p, r) = global_l1_prune(&m, 0.25, true).unwrap();
        assert_eq!(r.prunable, 4);
        assert_eq!(p.params()[1].tensor.data(), &[0.0, 7.0]);
    }

    #[test]
    fn sweep_requires_ascending() {
        let m = build_mlp(&[2, 2], 0).unwrap();
        let ds = crate::data::synth_clusters(2, 2, 3, 1.0, 0).unwrap();
        assert!(prune_sweep(&m, &ds, &[0.5, 0.1]).is_err());
        let rows = prune_sweep(&m, &ds, &[0.0]).unwrap();
        assert_eq!(rows[0].1, accuracy(&m, &ds).unwrap());
    }
}
