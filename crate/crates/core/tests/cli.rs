use std::fs;
use std::path::Path;

use awdlab::checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
use awdlab::cli::{parse_values, run_cli};
use awdlab::dog::DogTrace;
use awdlab::harness::METRICS_HEADER;
use awdlab::train::accuracy;

const SMALL: &[&str] = &[
    "--override",
    "dataset.kind=\"clusters\"",
    "--override",
    "dataset.per_class=60",
    "--override",
    "dataset.test_per_class=40",
    "--override",
    "train.epochs=8",
    "--override",
    "train.batch_size=32",
];

fn run(out: &Path, extra: &[&str]) -> i32 {
    let mut args = vec!["awdlab".to_string(), "--out".into(), out.display().to_string(), "--seed".into(), "4".into()];
    args.extend(SMALL.iter().map(|s| s.to_string()));
    args.extend(extra.iter().map(|s| s.to_string()));
    run_cli(args)
}

#[test]
fn train_writes_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["train"]), 0);
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    assert_eq!(lines.count(), 9);
    let trace = fs::read_to_string(dir.path().join("dog_trace.csv")).unwrap();
    assert!(trace.starts_with("step,epoch,weight_norm,grad_norm,lambda_eff,xent\n"));
    let bytes = fs::read(dir.path().join("final.ckpt")).unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    assert!(dir.path().join("best.ckpt").exists());
    assert!(fs::read_to_string(dir.path().join("config.toml")).unwrap().contains("seed = 4"));
}

#[test]
fn estimate_dog_lies_within_trace_bounds() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["estimate-dog"]), 0);
    let dog: f64 = fs::read_to_string(dir.path().join("dog.txt")).unwrap().trim().parse().unwrap();
    let trace = DogTrace::read_csv(&dir.path().join("dog_trace.csv")).unwrap();
    let values: Vec<f64> = trace.dog_values().into_iter().flatten().collect();
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(0.0, f64::max);
    assert!(dog >= lo && dog <= hi, "{dog} outside [{lo}, {hi}]");
}

#[test]
fn prune_first_row_equals_eval_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["train"]), 0);
    let ck = dir.path().join("final.ckpt");
    assert_eq!(run(dir.path(), &["prune", "--checkpoint", ck.to_str().unwrap(), "--sparsities", "0,0.5"]), 0);
    let csv = fs::read_to_string(dir.path().join("prune.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "sparsity,accuracy");
    assert_eq!(rows.len(), 3);
    let first: f64 = rows[1].split(',').nth(1).unwrap().parse().unwrap();

    let cfg = awdlab::config::ExperimentConfig::load(
        None,
        &SMALL
            .chunks(2)
            .map(|c| c[1].to_string())
            .chain(["seed=4".to_string()])
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let data = awdlab::harness::prepare_data(&cfg).unwrap();
    let model = Checkpoint::load(&ck).unwrap().model;
    assert_eq!(first, accuracy(&model, &data.test).unwrap());
}

#[test]
fn grid_commands_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run(dir.path(), &["grid2d", "--lrs", "0.01,0.1", "--decays", "geom:0.0005:0.005:2", "--start", "0.01", "0.005"]),
        0
    );
    let grid = fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    assert!(grid.starts_with("lr,lambda_or_dog,val_acc\n"));
    assert_eq!(grid.lines().count(), 5);

    assert_eq!(run(dir.path(), &["grid1d", "--axis", "decay", "--values", "0,0.001,0.01"]), 0);
    assert_eq!(fs::read_to_string(dir.path().join("grid1d.csv")).unwrap().lines().count(), 4);
}

#[test]
fn noisy_and_advtrain_run() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["noisy", "--rate", "0.2"]), 0);
    assert_eq!(
        run(
            dir.path(),
            &["--override", "train.epochs=2", "--override", "attack.train_steps=2", "--override", "attack.eval_steps=2", "advtrain"]
        ),
        0
    );
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let last = metrics.lines().last().unwrap();
    assert!(!last.split(',').nth(5).unwrap().is_empty(), "robust_val_acc logged");
}

#[test]
fn eval_accepts_robust_flag() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["train"]), 0);
    let ck = dir.path().join("final.ckpt");
    assert_eq!(run(dir.path(), &["eval", "--checkpoint", ck.to_str().unwrap(), "--robust"]), 0);
}

#[test]
fn bad_input_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_cli(["awdlab", "frobnicate"]), 2);
    assert_eq!(run(dir.path(), &["--override", "optim.lr=-1", "train"]), 1);
    assert_eq!(run(dir.path(), &["--override", "nosuch.key=1", "train"]), 1);
    let missing = dir.path().join("missing.ckpt");
    assert_eq!(run(dir.path(), &["eval", "--checkpoint", missing.to_str().unwrap()]), 1);
    fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    let junk = dir.path().join("junk.ckpt");
    assert_eq!(run(dir.path(), &["eval", "--checkpoint", junk.to_str().unwrap()]), 1);
}

#[test]
fn value_lists() {
    assert_eq!(parse_values("0.1, 0.2,0.3").unwrap(), vec![0.1, 0.2, 0.3]);
    let g = parse_values("geom:0.001:1:4").unwrap();
    assert_eq!(g.len(), 4);
    assert_eq!((g[0], g[3]), (0.001, 1.0));
    assert!(parse_values("").is_err());
    assert!(parse_values("geom:1:2").is_err());
    assert!(parse_values("a,b").is_err());
}
