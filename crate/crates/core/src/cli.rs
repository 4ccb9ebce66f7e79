//! Command-line front end shared by the `awdlab` binary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info};

use crate::adversarial::robust_accuracy;
use crate::checkpoint::Checkpoint;
use crate::config::{EarlyStopRule, ExperimentConfig, ModeKind};
use crate::error::{Error, Result};
use crate::harness::{
    alternating_1d_search, estimate_dog_from_run, geometric_sequence, grid_search_1d, grid_search_experiments,
    memorized_fraction, prepare_data, run_experiment, write_text, GridAxis, RunOutcome,
};
use crate::pruning::{prune_sweep, sweep_csv};
use crate::train::accuracy;

#[derive(Debug, Parser)]
#[command(name = "awdlab", version, about = "Adaptive weight decay experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for logs and checkpoints.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// `section.key=value`, repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    Lr,
    Decay,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model.
    Train,
    /// Sweep learning rate × decay (λ or DoG).
    Grid2d {
        /// Comma list or `geom:start:end:count`.
        #[arg(long)]
        lrs: String,
        #[arg(long)]
        decays: String,
        /// Also report the alternating 1D search from this `(lr, decay)` start.
        #[arg(long, num_args = 2, value_names = ["LR", "DECAY"])]
        start: Option<Vec<f64>>,
    },
    /// Sweep one axis with the other held at the config value.
    Grid1d {
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long)]
        values: String,
    },
    /// Fixed-decay run, then the plateau DoG estimate.
    EstimateDog,
    /// PGD adversarial training with robust early stopping.
    Advtrain,
    /// Train on symmetrically flipped labels and report memorization.
    Noisy {
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Global magnitude-pruning sweep of a checkpoint.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "0,0.5,0.6,0.7,0.8,0.9")]
        sparsities: String,
    },
    /// Test accuracy (and optionally PGD robust accuracy) of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        robust: bool,
    },
}

/// Parses `a,b,c` or `geom:start:end:count`.
pub fn parse_values(text: &str) -> Result<Vec<f64>> {
    if let Some(rest) = text.strip_prefix("geom:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::Input(format!("expected geom:start:end:count, got `{text}`")));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Input(format!("`{s}`: {e}")));
        let count = parts[2]
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::Input(format!("`{}`: {e}", parts[2])))?;
        return geometric_sequence(num(parts[0])?, num(parts[1])?, count);
    }
    let values = text
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Input(format!("`{s}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(Error::Input("empty value list".into()));
    }
    Ok(values)
}

fn effective_config(global: &GlobalArgs) -> Result<ExperimentConfig> {
    let mut overrides = global.overrides.clone();
    if let Some(seed) = global.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &global.out {
        overrides.push(format!("output.dir={:?}", out.display().to_string()));
    }
    ExperimentConfig::load(global.config.as_deref(), &overrides)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from(cfg.output.dir.clone().unwrap_or_else(|| ".".into()))
}

fn report_run(outcome: &RunOutcome) -> Result<()> {
    let last = outcome.final_record();
    println!(
        "epoch {}: train_acc {:.4} val_acc {:.4} test_acc {:.4} weight_norm {:.4}",
        last.epoch, last.train_acc, last.val_acc, last.test_acc, last.weight_norm
    );
    if let Some((epoch, metric, _)) = &outcome.best {
        println!("best epoch {epoch}: metric {metric:.4}");
    }
    if let Some(reason) = &outcome.aborted {
        return Err(Error::State(format!("run aborted: {reason}")));
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = effective_config(&cli.global)?;
    match cli.command {
        Command::Train => report_run(&run_experiment(&cfg)?),
        Command::Grid2d { lrs, decays, start } => {
            let lrs = parse_values(&lrs)?;
            let decays = parse_values(&decays)?;
            let grid = grid_search_experiments(&cfg, &lrs, &decays)?;
            let path = out_dir(&cfg).join("grid.csv");
            write_text(&path, &grid.to_csv())?;
            let (i, j) = grid.argmax();
            println!("best lr {} decay {} val_acc {:.4}", lrs[i], decays[j], grid.cells[i][j]);
            if let Some(start) = start {
                let find = |axis: &[f64], v: f64| {
                    axis.iter()
                        .position(|&a| (a - v).abs() <= 1e-12 * v.abs().max(1.0))
                        .ok_or_else(|| Error::Input(format!("start value {v} is not on the grid")))
                };
                let s = alternating_1d_search(&grid, (find(&lrs, start[0])?, find(&decays, start[1])?));
                let (a, b) = s.end;
                println!("1d search ends at lr {} decay {} val_acc {:.4}", lrs[a], decays[b], grid.cells[a][b]);
            }
            info!("wrote {}", path.display());
            Ok(())
        }
        Command::Grid1d { axis, values } => {
            let values = parse_values(&values)?;
            let axis = match axis {
                AxisArg::Lr => GridAxis::Lr,
                AxisArg::Decay => GridAxis::Decay,
            };
            let grid = grid_search_1d(&cfg, axis, &values)?;
            let path = out_dir(&cfg).join("grid1d.csv");
            write_text(&path, &grid.to_csv())?;
            let (i, j) = grid.argmax();
            println!("best lr {} decay {} val_acc {:.4}", grid.lrs[i], grid.decays[j], grid.cells[i][j]);
            Ok(())
        }
        Command::EstimateDog => {
            cfg.optim.mode = ModeKind::Fixed;
            let (dog, _) = estimate_dog_from_run(&cfg)?;
            if cfg.output.dir.is_some() {
                write_text(&out_dir(&cfg).join("dog.txt"), &format!("{dog}\n"))?;
            }
            println!("dog {dog}");
            Ok(())
        }
        Command::Advtrain => {
            cfg.attack.enabled = true;
            cfg.early_stop.rule = EarlyStopRule::RobustVal;
            let outcome = run_experiment(&cfg)?;
            if let Some((_, _, best)) = &outcome.best {
                let robust = robust_accuracy(best, &outcome.data.test, &cfg.attack.eval_attack(), cfg.seed)?;
                let clean = accuracy(best, &outcome.data.test)?;
                println!("best checkpoint: test_acc {clean:.4} robust_test_acc {robust:.4}");
            }
            report_run(&outcome)
        }
        Command::Noisy { rate } => {
            if let Some(rate) = rate {
                cfg.noise.rate = rate;
            }
            let outcome = run_experiment(&cfg)?;
            let mem = memorized_fraction(&outcome.model, &outcome.data)?;
            println!("memorized {:.4} of flipped training labels", mem);
            report_run(&outcome)
        }
        Command::Prune { checkpoint, sparsities } => {
            let sparsities = parse_values(&sparsities)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let data = prepare_data(&cfg)?;
            let rows = prune_sweep(&ck.model, &data.test, &sparsities)?;
            let path = out_dir(&cfg).join("prune.csv");
            write_text(&path, &sweep_csv(&rows))?;
            for (s, a) in rows {
                println!("sparsity {s}: accuracy {a:.4}");
            }
            Ok(())
        }
        Command::Eval { checkpoint, robust } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let data = prepare_data(&cfg)?;
            println!("test_acc {:.4}", accuracy(&ck.model, &data.test)?);
            if robust {
                let r = robust_accuracy(&ck.model, &data.test, &cfg.attack.eval_attack(), cfg.seed)?;
                println!("robust_test_acc {r:.4}");
            }
            Ok(())
        }
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            1
        }
    }
}
