//! Writes a dataset and a checkpoint, reads both back, and trains from the file.

use awdlab::checkpoint::Checkpoint;
use awdlab::config::ExperimentConfig;
use awdlab::data::{read_dataset, synth_images, write_dataset, ImageOptions};
use awdlab::harness::run_experiment;

fn main() -> awdlab::Result<()> {
    let dir = std::env::temp_dir().join("awdlab-file-formats");
    std::fs::create_dir_all(&dir)?;
    let data_path = dir.join("stripes.bin");
    let ds = synth_images(3, 8, 8, 100, ImageOptions::default(), 7)?;
    write_dataset(&data_path, &ds)?;
    let back = read_dataset(&data_path)?;
    println!("dataset: {} examples of shape {:?}, {} classes", back.len(), back.example_shape(), back.num_classes);

    let overrides = [
        "dataset.kind=\"file\"".to_string(),
        format!("dataset.path={:?}", data_path.display().to_string()),
        format!("output.dir={:?}", dir.join("run").display().to_string()),
    ];
    let cfg = ExperimentConfig::from_toml_with_overrides("[model]\nkind = \"cnn\"\n[train]\nepochs = 5\n", &overrides)?;
    let run = run_experiment(&cfg)?;
    for path in &run.artifacts {
        println!("wrote {}", path.display());
    }

    let ck = Checkpoint::load(&dir.join("run/final.ckpt"))?;
    println!("checkpoint: epoch {}, {} parameters, bit-identical model: {}", ck.epoch, ck.model.num_parameters(), ck.model == run.model);
    Ok(())
}
