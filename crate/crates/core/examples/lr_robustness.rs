//! Test accuracy across base learning rates for fixed and adaptive decay.

use awdlab::config::{ExperimentConfig, ModeKind};
use awdlab::harness::run_experiment;

fn main() -> awdlab::Result<()> {
    let base = ExperimentConfig::from_toml_with_overrides(
        r#"
[dataset]
kind = "clusters"
per_class = 500
separation = 3.0
[optim]
lambda = 0.002
dog = 0.05
[train]
epochs = 50
"#,
        &[],
    )?;
    println!("{:>6} {:>8} {:>9}", "lr", "fixed", "adaptive");
    for lr in [0.001, 0.01, 0.1, 1.0] {
        let mut accs = Vec::new();
        for mode in [ModeKind::Fixed, ModeKind::Adaptive] {
            let mut cfg = base.clone();
            cfg.optim.lr = lr;
            cfg.optim.mode = mode;
            let run = run_experiment(&cfg)?;
            accs.push(run.final_record().test_acc);
        }
        println!("{lr:>6} {:>8.4} {:>9.4}", accs[0], accs[1]);
    }
    Ok(())
}
