//! Command-line front end. `actcomp <command> [flags]`; see `--help`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{load_dataset, synthetic_split, DatasetFormat, DatasetSplit, SplitKind, SYNTH_SIZE};
use crate::error::{Error, Result};
use crate::model::DeskCnn;
use crate::pipeline::{compress, evaluate, frontier, grid, sweep, train_baseline};
use crate::report::{
    generate_report, read_policy, write_baseline, write_compress, write_config, write_eval, write_sweep,
    BASELINE_CHECKPOINT, POLICY_FILE, STUDENT_CHECKPOINT,
};
use crate::tensor::Checkpoint;

#[derive(Parser, Debug)]
#[command(name = "actcomp", version, about = "Mixed-precision and PCA activation compression for a small CNN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the 8-bit-weight baseline CNN.
    TrainBaseline(Common),
    /// Fine-tune a baseline under the memory penalty and freeze a policy.
    Compress {
        #[command(flatten)]
        common: Common,
        /// Baseline checkpoint [default: <out-dir>/baseline.ckpt, trained if absent]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Hard-mode accuracy and average bits of a frozen policy.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Policy file [default: <out-dir>/policy.acpl]
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Fine-tuned checkpoint [default: <out-dir>/student.ckpt]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compress once per (p, G) cell and extract the accuracy/bits frontier.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Baseline checkpoint [default: <out-dir>/baseline.ckpt, trained if absent]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated penalties.
        #[arg(long, default_value = "0.05,0.1,0.2", value_delimiter = ',')]
        ps: Vec<f32>,
        /// Comma-separated group counts.
        #[arg(long = "groups-list", default_value = "2,3", value_delimiter = ',')]
        groups_list: Vec<usize>,
    },
    /// Print a policy summary.
    ExportPolicy {
        /// Policy file.
        #[arg(long)]
        policy: PathBuf,
        /// Emit JSON instead of the text table.
        #[arg(long)]
        json: bool,
    },
    /// Derive plot data (curve.csv, final_bits.csv) from a compression run directory.
    Report {
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Flat key = value file with every config field [default: built-in defaults]
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
    /// Memory penalty p.
    #[arg(long)]
    p: Option<f32>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    patience: Option<u32>,
    /// Compression fine-tuning epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    bmin: Option<u32>,
    /// Dataset directory with `train/` and `eval/` (idx or raw) [default: synthetic]
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    classes: usize,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.p {
            cfg.penalty = v;
        }
        if let Some(v) = self.groups {
            cfg.groups = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.bmin {
            cfg.b_min = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn data(&self, cfg: &RunConfig) -> Result<(DatasetSplit, DatasetSplit)> {
        let (train, eval) = match &self.data {
            Some(dir) => {
                let load = |kind, sub: &str| {
                    let d = dir.join(sub);
                    load_dataset(&d, DatasetFormat::detect(&d)?, kind, self.classes)
                };
                (load(SplitKind::Train, "train")?, load(SplitKind::Eval, "eval")?)
            }
            None => (
                synthetic_split(cfg.train_size, cfg.data_seed, SplitKind::Train),
                synthetic_split(cfg.eval_size, cfg.data_seed + 1, SplitKind::Eval),
            ),
        };
        for s in [&train, &eval] {
            if (s.height, s.width, s.channels) != (SYNTH_SIZE, SYNTH_SIZE, 3) {
                return Err(Error::invalid(format!(
                    "the model takes {SYNTH_SIZE}x{SYNTH_SIZE}x3 images, dataset has {}x{}x{}",
                    s.height, s.width, s.channels
                )));
            }
        }
        let eval = eval.with_stats_from(&train);
        Ok((train, eval))
    }
}

fn load_model(path: &Path) -> Result<DeskCnn> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    DeskCnn::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)
}

/// Loads the baseline, training and saving one under `out_dir` when no
/// checkpoint is given and none exists there yet.
fn baseline_model(
    common: &Common,
    cfg: &RunConfig,
    explicit: &Option<PathBuf>,
    train: &DatasetSplit,
    eval: &DatasetSplit,
) -> Result<DeskCnn> {
    let path = explicit.clone().unwrap_or_else(|| common.out_dir.join(BASELINE_CHECKPOINT));
    if explicit.is_some() || path.exists() {
        return load_model(&path);
    }
    eprintln!("no baseline at {}, training one", path.display());
    let b = train_baseline(cfg, train, eval)?;
    write_baseline(&common.out_dir, &b)?;
    println!("baseline accuracy {:.2}", b.accuracy);
    Ok(b.model)
}

fn run_command(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainBaseline(common) => {
            let cfg = common.config()?;
            let (train, eval) = common.data(&cfg)?;
            let b = train_baseline(&cfg, &train, &eval)?;
            write_config(&common.out_dir, &cfg)?;
            write_baseline(&common.out_dir, &b)?;
            println!("baseline accuracy {:.2} (before weight snapping {:.2})", b.accuracy, b.float_accuracy);
        }
        Command::Compress { common, checkpoint } => {
            let cfg = common.config()?;
            let (train, eval) = common.data(&cfg)?;
            let model = baseline_model(&common, &cfg, &checkpoint, &train, &eval)?;
            let out = compress(&cfg, &model, &train, &eval)?;
            write_config(&common.out_dir, &cfg)?;
            write_compress(&common.out_dir, &out)?;
            println!(
                "avg bits {:.6} hard accuracy {:.2} soft accuracy {:.2} pruned {}",
                out.policy.avg_bits,
                out.hard_accuracy,
                out.soft_accuracy,
                out.policy.pruned_channels()
            );
        }
        Command::Evaluate {
            common,
            policy,
            checkpoint,
        } => {
            let cfg = common.config()?;
            let (_, eval) = common.data(&cfg)?;
            let policy = read_policy(&policy.unwrap_or_else(|| common.out_dir.join(POLICY_FILE)))?;
            let model = load_model(&checkpoint.unwrap_or_else(|| common.out_dir.join(STUDENT_CHECKPOINT)))?;
            let r = evaluate(&policy, &model, &eval)?;
            write_eval(&common.out_dir, &r)?;
            println!("accuracy {:.2}", r.accuracy);
            println!("avg bits {:.6}", r.avg_bits);
        }
        Command::Sweep {
            common,
            checkpoint,
            ps,
            groups_list,
        } => {
            let cfg = common.config()?;
            let (train, eval) = common.data(&cfg)?;
            let model = baseline_model(&common, &cfg, &checkpoint, &train, &eval)?;
            let rows = sweep(&cfg, &model, &train, &eval, &grid(&ps, &groups_list))?;
            let front = frontier(&rows);
            write_sweep(&common.out_dir, &rows, &front)?;
            for r in &rows {
                let mark = if front.contains(r) { " *" } else { "" };
                println!("p {} G {} avg bits {:.4} accuracy {:.2}{mark}", r.penalty, r.groups, r.avg_bits, r.accuracy);
            }
        }
        Command::ExportPolicy { policy, json } => {
            let p = read_policy(&policy)?;
            if json {
                println!("{}", p.to_json()?);
            } else {
                println!("avg bits {:.6}, {} groups, {} pruned channels", p.avg_bits, p.groups, p.pruned_channels());
                for (l, layer) in p.layers.iter().enumerate() {
                    let groups: Vec<String> = layer
                        .bits
                        .iter()
                        .zip(&layer.groups.sizes)
                        .map(|(b, n)| format!("{n}x{b}b"))
                        .collect();
                    println!("layer {l}: {} pruned {}", groups.join(" "), layer.groups.pruned());
                }
            }
        }
        Command::Report { out_dir } => {
            for path in generate_report(&out_dir)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 2 for usage and config errors, 1 for
/// anything else. Errors go to stderr as one line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return 0;
            }
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("usage error").trim();
            eprintln!("{line} (see --help)");
            return 2;
        }
    };
    match run_command(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            if matches!(e, Error::Config(_)) {
                2
            } else {
                1
            }
        }
    }
}
