//! Real learning-rate × weight-decay grid on clusters, with the
//! alternating one-dimensional search next to the full 2D argmax.
//!
//! `cargo run --release --example grid_search_trap [epochs]`

use awdlab::config::ExperimentConfig;
use awdlab::harness::{alternating_1d_search, grid_search_experiments};

fn main() -> awdlab::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(30);
    let mut cfg = ExperimentConfig::from_toml_with_overrides("[dataset]\nkind = \"clusters\"\nseparation = 3.0\n", &[])?;
    cfg.train.epochs = epochs;
    let lrs = [0.001, 0.01, 0.1, 1.0];
    let decays = [5e-5, 5e-4, 5e-3, 5e-2];
    let grid = grid_search_experiments(&cfg, &lrs, &decays)?;

    print!("{:>8}", "lr \\ λ");
    for d in decays {
        print!("{d:>9.0e}");
    }
    println!();
    for (i, row) in grid.cells.iter().enumerate() {
        print!("{:>8}", lrs[i]);
        for v in row {
            print!("{v:>9.4}");
        }
        println!();
    }
    let search = alternating_1d_search(&grid, (1, 2));
    let (a, b) = search.end;
    let (i, j) = grid.argmax();
    println!("1D path {:?} ends at lr {} λ {}", search.path, lrs[a], decays[b]);
    println!("2D argmax at lr {} λ {}", lrs[i], decays[j]);
    Ok(())
}
