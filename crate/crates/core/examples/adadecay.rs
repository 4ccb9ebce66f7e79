//! AdaDecay's per-parameter multipliers over a short run.

use awdlab::config::ExperimentConfig;
use awdlab::harness::run_experiment;

fn main() -> awdlab::Result<()> {
    for alpha in [0.0, 1.0, 4.0] {
        let mut cfg = ExperimentConfig::from_toml_with_overrides(
            "[optim]\nmode = \"adadecay\"\nlambda = 0.001\n[train]\nepochs = 20\n",
            &[],
        )?;
        cfg.optim.alpha = alpha;
        let run = run_experiment(&cfg)?;
        let (lo, hi) = run.theta_range;
        println!("alpha {alpha}: theta in [{lo:.4}, {hi:.4}], test acc {:.4}", run.final_record().test_acc);
    }
    Ok(())
}
