//! Tune-then-transfer: train with fixed decay, estimate DoG from its trace,
//! then train with adaptive decay at that DoG and compare weight norms.
//!
//! `cargo run --release --example awd_vs_fixed [epochs]`

use awdlab::config::{ExperimentConfig, ModeKind};
use awdlab::harness::{estimate_dog_from_run, run_experiment};

fn main() -> awdlab::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(60);
    let mut cfg = ExperimentConfig::from_toml_with_overrides(
        r#"
[dataset]
kind = "images"
per_class = 300
[model]
kind = "cnn"
[optim]
mode = "fixed"
lambda = 0.001
lr = 0.05
"#,
        &[],
    )?;
    cfg.train.epochs = epochs;

    let (dog, fixed) = estimate_dog_from_run(&cfg)?;
    println!("estimated DoG {dog:.4} from the fixed run");

    cfg.optim.mode = ModeKind::Adaptive;
    cfg.optim.dog = dog;
    let adaptive = run_experiment(&cfg)?;

    println!("{:<10} {:>10} {:>10} {:>12}", "mode", "test_acc", "w_norm", "lambda_mean");
    for (name, run) in [("fixed", &fixed), ("adaptive", &adaptive)] {
        let r = run.final_record();
        println!("{name:<10} {:>10.4} {:>10.3} {:>12.2e}", r.test_acc, r.weight_norm, r.lambda_mean);
    }
    Ok(())
}
