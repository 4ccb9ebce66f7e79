//! Trains a model, then sweeps one-shot global magnitude pruning.

use awdlab::config::ExperimentConfig;
use awdlab::harness::run_experiment;
use awdlab::pruning::{global_l1_prune, prune_sweep, sweep_csv};

fn main() -> awdlab::Result<()> {
    let cfg = ExperimentConfig::from_toml_with_overrides(
        "[dataset]\nkind = \"clusters\"\nper_class = 300\n[model]\nhidden = [128]\n[train]\nepochs = 40\n",
        &[],
    )?;
    let run = run_experiment(&cfg)?;
    let sparsities = [0.0, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
    print!("{}", sweep_csv(&prune_sweep(&run.model, &run.data.test, &sparsities)?));

    let (_, report) = global_l1_prune(&run.model, 0.5, false)?;
    for (name, zeroed) in &report.per_tensor {
        println!("{name}: {zeroed} zeroed");
    }
    Ok(())
}
