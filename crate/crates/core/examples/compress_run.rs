//! Baseline training followed by compression, written to a run directory
//! in the same layout as `actcomp compress`.
//!
//! `cargo run --release --example compress_run -- [out_dir] [--quick]`
//!
//! The default settings take a few minutes. `--quick` shrinks every stage
//! for a smoke run, at the cost of a much weaker baseline.

use std::path::PathBuf;

use actcomp::config::RunConfig;
use actcomp::data::{synthetic_split, SplitKind};
use actcomp::pipeline::{compress, train_baseline};
use actcomp::report::{generate_report, write_baseline, write_compress, write_config};

fn main() -> actcomp::error::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let quick = args.iter().any(|a| a == "--quick");
    let out = PathBuf::from(args.iter().find(|a| !a.starts_with("--")).map_or("run", |s| s.as_str()));
    let mut cfg = RunConfig::default();
    if quick {
        cfg.train_size = 2500;
        cfg.eval_size = 500;
        cfg.baseline_epochs = 5;
        cfg.finetune_size = 800;
        cfg.epochs = 4;
    }

    let train = synthetic_split(cfg.train_size, cfg.data_seed, SplitKind::Train);
    let eval = synthetic_split(cfg.eval_size, cfg.data_seed + 1, SplitKind::Eval).with_stats_from(&train);
    let base = train_baseline(&cfg, &train, &eval)?;
    println!("baseline accuracy {:.2}", base.accuracy);

    let run = compress(&cfg, &base.model, &train, &eval)?;
    for e in &run.epochs {
        println!(
            "epoch {:>2}: expected bits {:.3}, KD {:.4}, soft {:.2}, hard {:.2} at {:.3} bits",
            e.epoch, e.expected_avg_bits, e.kd, e.soft_accuracy, e.hard_accuracy, e.hard_avg_bits
        );
    }
    println!(
        "final: {:.4} bits per value, accuracy {:.2} ({:+.2}), {} channels pruned, {} shifts",
        run.policy.avg_bits,
        run.hard_accuracy,
        run.hard_accuracy - base.accuracy,
        run.policy.pruned_channels(),
        run.audit.shifts().count()
    );

    write_config(&out, &cfg)?;
    write_baseline(&out, &base)?;
    write_compress(&out, &run)?;
    for p in generate_report(&out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
