//! Writes the synthetic shapes dataset as `train/` and `eval/` directories
//! of idx files, the layout the CLI reads with `--data`.
//!
//! `cargo run --example make_dataset -- <dir> [train] [eval]`

use std::path::PathBuf;

use actcomp::data::{class_name, save_dataset, synthetic_split, DatasetFormat, SplitKind};

fn main() -> actcomp::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "data".into()));
    let train_n = args.next().map_or(6000, |a| a.parse().expect("train size"));
    let eval_n = args.next().map_or(2000, |a| a.parse().expect("eval size"));

    let train = synthetic_split(train_n, 2024, SplitKind::Train);
    let eval = synthetic_split(eval_n, 2025, SplitKind::Eval);
    save_dataset(&dir.join("train"), DatasetFormat::Idx, &train)?;
    save_dataset(&dir.join("eval"), DatasetFormat::Idx, &eval)?;

    let mut counts = [0usize; 10];
    for &l in &train.labels {
        counts[l as usize] += 1;
    }
    println!("wrote {train_n} train and {eval_n} eval images to {}", dir.display());
    for (c, n) in counts.iter().enumerate() {
        println!("  {:<10} {n}", class_name(c));
    }
    Ok(())
}
