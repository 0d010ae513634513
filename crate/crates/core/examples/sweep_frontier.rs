//! Compresses one baseline across a grid of penalties and group counts and
//! prints the accuracy/bits frontier.
//!
//! `cargo run --release --example sweep_frontier -- [baseline.ckpt]`
//!
//! Without a checkpoint a baseline is trained first. Six short compression
//! runs follow, so expect a quarter of an hour on one core.

use actcomp::config::RunConfig;
use actcomp::data::{synthetic_split, SplitKind};
use actcomp::model::DeskCnn;
use actcomp::pipeline::{frontier, grid, sweep, train_baseline};
use actcomp::tensor::Checkpoint;

fn main() -> actcomp::error::Result<()> {
    let cfg = RunConfig {
        epochs: 6,
        ..RunConfig::default()
    };
    let train = synthetic_split(cfg.train_size, cfg.data_seed, SplitKind::Train);
    let eval = synthetic_split(cfg.eval_size, cfg.data_seed + 1, SplitKind::Eval).with_stats_from(&train);
    let model = match std::env::args().nth(1) {
        Some(path) => {
            let bytes = std::fs::read(&path).expect("readable checkpoint");
            DeskCnn::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)?
        }
        None => {
            let base = train_baseline(&cfg, &train, &eval)?;
            println!("baseline accuracy {:.2}", base.accuracy);
            base.model
        }
    };

    let rows = sweep(&cfg, &model, &train, &eval, &grid(&[0.05, 0.1, 0.2], &[2, 3]))?;
    let front = frontier(&rows);
    println!("{:>6} {:>2} {:>8} {:>8}", "p", "G", "bits", "acc");
    for r in &rows {
        let mark = if front.contains(r) { "*" } else { "" };
        println!("{:>6} {:>2} {:>8.4} {:>8.2} {mark}", r.penalty, r.groups, r.avg_bits, r.accuracy);
    }
    Ok(())
}
