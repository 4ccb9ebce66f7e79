//! Natural vs PGD-7 adversarial training on a two-class image task,
//! evaluated with PGD-20 at ε = 8/255.

use awdlab::adversarial::robust_accuracy;
use awdlab::config::{EarlyStopRule, ExperimentConfig};
use awdlab::harness::run_experiment;
use awdlab::train::accuracy;

fn main() -> awdlab::Result<()> {
    let natural = ExperimentConfig::from_toml_with_overrides(
        r#"
[dataset]
kind = "images"
classes = 2
height = 32
width = 32
contrast = 0.08
noise = 0.25
blob = 0.2
per_class = 500
test_per_class = 200
[model]
kind = "mlp"
hidden = []
[optim]
lambda = 0.0
lr = 0.05
[train]
epochs = 30
"#,
        &[],
    )?;
    let mut adversarial = natural.clone();
    adversarial.attack.enabled = true;
    adversarial.early_stop.rule = EarlyStopRule::RobustVal;

    let attack = natural.attack.eval_attack();
    for (name, cfg) in [("natural", &natural), ("pgd-7", &adversarial)] {
        let run = run_experiment(cfg)?;
        let model = run.best.as_ref().map(|b| &b.2).unwrap_or(&run.model);
        let clean = accuracy(model, &run.data.test)?;
        let robust = robust_accuracy(model, &run.data.test, &attack, cfg.seed)?;
        println!("{name:<8} clean {clean:.4}  robust (PGD-20) {robust:.4}");
        if let Some(m) = run.max_perturbation {
            println!("         largest training perturbation {m:.6} (ε = {:.6})", attack.epsilon);
        }
    }
    Ok(())
}
