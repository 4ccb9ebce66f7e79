//! 20% symmetric label flips: how much of the noise each regularizer fits.

use awdlab::config::{ExperimentConfig, ModeKind};
use awdlab::harness::{run_experiment, subset_train_accuracy};

fn main() -> awdlab::Result<()> {
    let base = ExperimentConfig::from_toml_with_overrides(
        r#"
[dataset]
kind = "images"
per_class = 300
[model]
kind = "cnn"
[optim]
lambda = 0.001
dog = 0.06
lr = 0.05
[noise]
rate = 0.2
[train]
epochs = 80
"#,
        &[],
    )?;
    println!("{:<10} {:>9} {:>14} {:>14}", "mode", "test_acc", "fit(flipped)", "fit(clean)");
    for mode in [ModeKind::Fixed, ModeKind::Adaptive] {
        let mut cfg = base.clone();
        cfg.optim.mode = mode;
        let run = run_experiment(&cfg)?;
        let (flipped, clean) = subset_train_accuracy(&run.model, &run.data)?;
        println!("{:<10} {:>9.4} {flipped:>14.4} {clean:>14.4}", format!("{mode:?}"), run.final_record().test_acc);
    }
    Ok(())
}
