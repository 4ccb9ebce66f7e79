use awdlab::adversarial::{pgd_attack, AttackConfig};
use awdlab::checkpoint::Checkpoint;
use awdlab::data::{flip_labels_symmetric, split_indices, synth_clusters};
use awdlab::dog::{dog_value, estimate_dog, DogTrace, TraceRow};
use awdlab::harness::geometric_sequence;
use awdlab::model::{build_mlp, param_l2_norm};
use awdlab::optimizer::{adadecay_theta, awd_lambda, awd_step, cosine_lr, OptimizerState, Optimizer, RegularizerMode, Schedule};
use awdlab::pruning::global_l1_prune;
use awdlab::rng::{component_rng, tag};
use awdlab::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ratio_law_holds_for_any_norms(g in 1e-8f64..1e4, n in 1e-6f64..1e4, dog in 1e-4f64..1.0) {
        let lambda = awd_lambda(g, n, dog);
        prop_assert!(rel(lambda * n / g, dog) < 1e-12);
        prop_assert!(rel(dog_value(lambda, n, g).unwrap(), dog) < 1e-12);
    }

    #[test]
    fn cosine_schedule_is_bounded_and_decreasing(total in 1u64..5000, base in 1e-4f64..2.0) {
        let mut prev = f64::INFINITY;
        for step in (0..=total).step_by((total as usize / 50).max(1)) {
            let lr = cosine_lr(step, total, base).unwrap();
            prop_assert!((0.0..=base).contains(&lr));
            prop_assert!(lr <= prev);
            prev = lr;
        }
        prop_assert_eq!(cosine_lr(total, total, base).unwrap(), 0.0);
        prop_assert!(cosine_lr(total + 1, total, base).is_err());
    }

    #[test]
    fn theta_stays_in_range(alpha in -50.0f64..50.0, g in -1e3f64..1e3) {
        let theta = adadecay_theta(alpha, g);
        prop_assert!((0.0..=2.0).contains(&theta));
    }

    #[test]
    fn ema_is_convex_and_nonnegative(seed in 0u64..500, steps in 1usize..8) {
        let mut model = build_mlp(&[4, 5, 3], seed).unwrap();
        let x = Tensor::new(vec![3, 4], (0..12).map(|i| ((i as u64 + seed) as f64 * 0.73).sin()).collect()).unwrap();
        let mut state = OptimizerState::new(&model, 0.9, 0.05, 100, Schedule::Constant);
        for _ in 0..steps {
            model.compute_gradients(&x, &[0, 1, 2]).unwrap();
            let before = state.lambda_bar;
            let report = awd_step(&mut model, &mut state, 0.05, 0.02, 0.1, 0.9).unwrap();
            let (lo, hi) = (before.min(report.lambda_t), before.max(report.lambda_t));
            prop_assert!(state.lambda_bar >= 0.0);
            prop_assert!(state.lambda_bar >= lo - 1e-18 && state.lambda_bar <= hi + 1e-18);
        }
    }

    #[test]
    fn adadecay_with_zero_alpha_matches_fixed(seed in 0u64..500, lambda in 0.0f64..0.05) {
        let mut a = build_mlp(&[4, 6, 2], seed).unwrap();
        let mut b = a.clone();
        let mut fixed = Optimizer::new(&a, RegularizerMode::Fixed { lambda }, 0.9, 0.1, 10).unwrap();
        let mut ada = Optimizer::new(&b, RegularizerMode::AdaDecay { lambda, alpha: 0.0 }, 0.9, 0.1, 10).unwrap();
        let x = Tensor::new(vec![2, 4], (0..8).map(|i| (i as f64 + seed as f64).cos()).collect()).unwrap();
        for _ in 0..5 {
            a.compute_gradients(&x, &[0, 1]).unwrap();
            b.compute_gradients(&x, &[0, 1]).unwrap();
            fixed.step(&mut a).unwrap();
            ada.step(&mut b).unwrap();
        }
        for (p, q) in a.params().iter().zip(b.params()) {
            prop_assert_eq!(p.tensor.data(), q.tensor.data());
        }
    }

    #[test]
    fn pruning_counts_and_nesting(seed in 0u64..1000, s1 in 0.0f64..1.0, s2 in 0.0f64..1.0) {
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        let model = build_mlp(&[6, 9, 4], seed).unwrap();
        let prunable: usize = model.params().iter().filter(|p| p.prunable).map(|p| p.tensor.len()).sum();
        let zeros = |s: f64| -> Vec<bool> {
            let (m, report) = global_l1_prune(&model, s, false).unwrap();
            assert_eq!(report.pruned, (s * prunable as f64).floor() as usize);
            m.params().iter().filter(|p| p.prunable).flat_map(|p| p.tensor.data().iter().map(|v| *v == 0.0).collect::<Vec<_>>()).collect()
        };
        let (a, b) = (zeros(lo), zeros(hi));
        prop_assert_eq!(a.iter().filter(|z| **z).count(), (lo * prunable as f64).floor() as usize);
        prop_assert!(a.iter().zip(&b).all(|(x, y)| !x || *y));
        let biases_before: Vec<f64> = model.params().iter().filter(|p| !p.prunable).flat_map(|p| p.tensor.data().to_vec()).collect();
        let (pruned, _) = global_l1_prune(&model, hi, false).unwrap();
        let biases_after: Vec<f64> = pruned.params().iter().filter(|p| !p.prunable).flat_map(|p| p.tensor.data().to_vec()).collect();
        prop_assert_eq!(biases_before, biases_after);
    }

    #[test]
    fn pgd_stays_inside_ball_and_box(seed in 0u64..1000, eps in 0.0f64..0.2, steps in 1usize..6) {
        let model = build_mlp(&[10, 8, 3], seed).unwrap();
        let mut rng = component_rng(seed, tag::DATA);
        let x = Tensor::new(vec![4, 10], (0..40).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap();
        let cfg = AttackConfig { epsilon: eps, step_size: eps / 3.0 + 1e-3, steps, random_start: true, bounds: (0.0, 1.0) };
        let adv = pgd_attack(&model, &x, &[0, 1, 2, 0], &cfg, &mut component_rng(seed, tag::ATTACK)).unwrap();
        for (a, o) in adv.data().iter().zip(x.data()) {
            prop_assert!((a - o).abs() <= eps);
            prop_assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn dog_estimate_lies_within_trace_values(values in prop::collection::vec(1e-4f64..1.0, 12..80), per_epoch in 1usize..5) {
        let mut trace = DogTrace::new();
        for (i, d) in values.iter().enumerate() {
            // λ = 1, so the DoG of the row is weight_norm / grad_norm = d
            trace.push(TraceRow { step: i as u64, epoch: i / per_epoch, weight_norm: *d, grad_norm: 1.0, lambda_eff: 1.0, xent: 1.0 / (1 + i) as f64 }).unwrap();
        }
        let est = estimate_dog(&trace, 1e-3, 5).unwrap();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(0.0, f64::max);
        prop_assert!(est >= lo * (1.0 - 1e-12) && est <= hi * (1.0 + 1e-12));
    }

    #[test]
    fn split_is_a_stratified_partition(seed in 0u64..1000, classes in 2usize..6, per in 2usize..40, frac in 0.05f64..0.95) {
        let labels: Vec<usize> = (0..classes * per).map(|i| i % classes).collect();
        let (train, val) = split_indices(&labels, classes, frac, seed).unwrap();
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for c in 0..classes {
            prop_assert!(train.iter().any(|&i| labels[i] == c));
            prop_assert!(val.iter().any(|&i| labels[i] == c));
        }
    }

    #[test]
    fn flipped_labels_always_change(seed in 0u64..1000, classes in 2usize..10, rate in 0.0f64..=1.0) {
        let labels: Vec<usize> = (0..300).map(|i| i % classes).collect();
        let (noisy, spec) = flip_labels_symmetric(&labels, classes, rate, seed).unwrap();
        let mask = spec.is_flipped(labels.len());
        for i in 0..labels.len() {
            prop_assert_eq!(mask[i], noisy[i] != labels[i]);
            prop_assert!(noisy[i] < classes);
        }
        prop_assert_eq!(spec.restore(&noisy), labels);
    }

    #[test]
    fn checkpoint_round_trips(seed in 0u64..1000, epoch in 0usize..500) {
        let model = build_mlp(&[5, 7, 3], seed).unwrap();
        let ck = Checkpoint { model, optimizer: None, epoch, metric: 0.5 };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert_eq!(back, ck);
    }

    #[test]
    fn geometric_sequence_has_exact_ends(start in 1e-5f64..1.0, ratio in 1.01f64..100.0, len in 2usize..12) {
        let end = start * ratio;
        let seq = geometric_sequence(start, end, len).unwrap();
        prop_assert_eq!(seq.len(), len);
        prop_assert_eq!(seq[0], start);
        prop_assert_eq!(seq[len - 1], end);
        let step = seq[1] / seq[0];
        for w in seq.windows(2) {
            prop_assert!(rel(w[1] / w[0], step) < 1e-9);
        }
    }
}

#[test]
fn frozen_norms_make_adaptive_match_fixed() {
    // with grad and weight norms held fixed, λ̄ converges to DoG·g/n
    let (g, n, dog) = (0.8, 12.0, 0.02);
    let target = dog * g / n;
    let mut lambda_bar = 0.0;
    for t in 1..=40 {
        lambda_bar = 0.1 * lambda_bar + 0.9 * awd_lambda(g, n, dog);
        // geometric contraction plus a few ulps of rounding
        let bound = (0.1f64.powi(t) + 4.0 * f64::EPSILON) * target;
        assert!((lambda_bar - target).abs() <= bound);
    }
}

#[test]
fn separable_clusters_are_linearly_separable() {
    let ds = synth_clusters(4, 8, 100, 40.0, 1).unwrap();
    // nearest class mean classifier as the linear probe
    let d = 8;
    let mut means = vec![vec![0.0; d]; 4];
    for (i, &y) in ds.labels.iter().enumerate() {
        for k in 0..d {
            means[y][k] += ds.inputs.data()[i * d + k] / 100.0;
        }
    }
    let correct = ds
        .labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| {
            let x = &ds.inputs.data()[i * d..(i + 1) * d];
            let dist = |m: &Vec<f64>| m.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            (0..4).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))) == Some(y)
        })
        .count();
    assert_eq!(correct, ds.len());
}

#[test]
fn zero_separation_clusters_are_indistinguishable() {
    let train = synth_clusters(4, 8, 500, 0.0, 2).unwrap();
    let test = synth_clusters(4, 8, 500, 0.0, 3).unwrap();
    let d = 8;
    let mut means = vec![vec![0.0; d]; 4];
    for (i, &y) in train.labels.iter().enumerate() {
        for k in 0..d {
            means[y][k] += train.inputs.data()[i * d + k] / 500.0;
        }
    }
    let hits = test
        .labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| {
            let x = &test.inputs.data()[i * d..(i + 1) * d];
            let dist = |m: &Vec<f64>| m.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            (0..4).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))) == Some(y)
        })
        .count();
    // binomial(2000, 1/4): mean 500, sd ≈ 19.4; allow 4 sd
    assert!((hits as f64 - 500.0).abs() < 4.0 * 19.4, "{hits} hits");
}

#[test]
fn weight_norm_is_global() {
    let model = build_mlp(&[3, 4, 2], 5).unwrap();
    let total: f64 = model.params().iter().flat_map(|p| p.tensor.data().iter().map(|v| v * v)).sum();
    assert!((param_l2_norm(&model) - total.sqrt()).abs() < 1e-14);
}
