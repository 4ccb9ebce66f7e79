//! Finite-difference check of the MLP and CNN gradients.

use awdlab::gradcheck::finite_difference_check;
use awdlab::model::{build_mlp, build_small_cnn};
use awdlab::rng::{component_rng, tag};
use awdlab::tensor::Tensor;
use rand::Rng;

fn main() -> awdlab::Result<()> {
    let mut rng = component_rng(0, tag::DATA);
    let mut uniform = |n: usize| (0..n).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<f64>>();

    let mlp = build_mlp(&[10, 32, 16, 4], 0)?;
    let x = Tensor::new(vec![8, 10], uniform(80))?;
    let labels = [0, 1, 2, 3, 0, 1, 2, 3];
    let mlp_report = finite_difference_check(&mlp, &x, &labels, 1e-6, 1e-4, 100, 0)?;

    let cnn = build_small_cnn([1, 8, 8], &[4, 8], 4, 0)?;
    let x = Tensor::new(vec![4, 1, 8, 8], uniform(256))?;
    let cnn_report = finite_difference_check(&cnn, &x, &labels[..4], 1e-6, 1e-4, 100, 0)?;

    for (name, report) in [("mlp", &mlp_report), ("cnn", &cnn_report)] {
        println!("{name}:");
        for t in &report.tensors {
            println!(
                "  {:<14} checked {:>3}  kinks skipped {:>2}  max rel err {:.2e}  {}",
                t.name,
                t.checked,
                t.skipped_kinks,
                t.max_rel_error,
                if t.passed { "ok" } else { "FAILED" }
            );
        }
    }
    Ok(())
}
