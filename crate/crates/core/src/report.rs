//! Run directory layout and CSV emission.
//!
//! `train-baseline` writes `baseline.ckpt`, `baseline.csv` and
//! `baseline_summary.csv`; `compress` writes `policy.acpl`, `student.ckpt`,
//! `steps.csv`, `epochs.csv`, `groups.csv`, `probe.csv`, `shifts.log` and
//! `compress_summary.csv`; `report` derives `curve.csv` and
//! `final_bits.csv` from those. Column headers are the `*_HEADER` constants.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::pipeline::{Baseline, CompressOutcome, CompressionPolicy, EvalReport, SweepRow};

pub const CONFIG_FILE: &str = "config.cfg";
pub const BASELINE_CHECKPOINT: &str = "baseline.ckpt";
pub const STUDENT_CHECKPOINT: &str = "student.ckpt";
pub const POLICY_FILE: &str = "policy.acpl";
pub const SHIFTS_FILE: &str = "shifts.log";

pub const BASELINE_HEADER: &str = "epoch,loss,train_accuracy,eval_accuracy";
pub const BASELINE_SUMMARY_HEADER: &str = "float_accuracy,accuracy";
pub const STEPS_HEADER: &str = "step,epoch,L_memory,L_KD,expected_avg_bits";
pub const EPOCHS_HEADER: &str =
    "epoch,expected_avg_bits,kd_loss,soft_accuracy,hard_accuracy,hard_avg_bits,pruned,min_max_pi";
pub const GROUPS_HEADER: &str = "epoch,layer,group,channels,b1,b2,b3,chosen_bits,max_pi";
pub const PROBE_HEADER: &str = "pruned,agreement";
pub const COMPRESS_SUMMARY_HEADER: &str = "avg_bits,soft_accuracy,hard_accuracy,pruned";
pub const EVAL_HEADER: &str = "samples,accuracy,avg_bits,pruned,agreement";
pub const SWEEP_HEADER: &str = "p,groups,avg_bits,accuracy";
pub const CURVE_HEADER: &str = "epoch,expected_avg_bits,kd_loss";

#[derive(Serialize)]
struct BaselineRow {
    epoch: usize,
    loss: f64,
    train_accuracy: f64,
    eval_accuracy: f64,
}

#[derive(Serialize)]
struct BaselineSummary {
    float_accuracy: f64,
    accuracy: f64,
}

#[derive(Serialize)]
struct StepRow {
    step: usize,
    epoch: usize,
    #[serde(rename = "L_memory")]
    memory: f64,
    #[serde(rename = "L_KD")]
    kd: f64,
    expected_avg_bits: f64,
}

#[derive(Serialize, Deserialize)]
struct EpochRow {
    epoch: usize,
    expected_avg_bits: f64,
    kd_loss: f64,
    soft_accuracy: f64,
    hard_accuracy: f64,
    hard_avg_bits: f64,
    pruned: usize,
    min_max_pi: f64,
}

#[derive(Serialize)]
struct GroupRow {
    epoch: usize,
    layer: usize,
    group: usize,
    channels: usize,
    b1: u32,
    b2: u32,
    b3: u32,
    chosen_bits: u32,
    max_pi: f64,
}

#[derive(Serialize)]
struct ProbeRow {
    pruned: usize,
    agreement: f64,
}

#[derive(Serialize)]
struct CompressSummary {
    avg_bits: f64,
    soft_accuracy: f64,
    hard_accuracy: f64,
    pruned: usize,
}

#[derive(Serialize)]
struct EvalRow {
    samples: usize,
    accuracy: f64,
    avg_bits: f64,
    pruned: usize,
    agreement: f64,
}

#[derive(Serialize)]
struct SweepCsvRow {
    p: f32,
    groups: usize,
    avg_bits: f64,
    accuracy: f64,
}

#[derive(Serialize)]
struct CurveRow {
    epoch: usize,
    expected_avg_bits: f64,
    kd_loss: f64,
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>, header: &str) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv buffer: {e}")))
}

fn write_csv<T: Serialize>(dir: &Path, name: &str, header: &str, rows: impl IntoIterator<Item = T>) -> Result<PathBuf> {
    let path = dir.join(name);
    write_atomic(&path, &csv_bytes(rows, header)?)?;
    Ok(path)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    ensure_dir(dir)?;
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_text().as_bytes())
}

pub fn write_baseline(dir: &Path, b: &Baseline) -> Result<()> {
    ensure_dir(dir)?;
    write_atomic(&dir.join(BASELINE_CHECKPOINT), &b.model.to_checkpoint().to_bytes())?;
    write_csv(
        dir,
        "baseline.csv",
        BASELINE_HEADER,
        b.history.iter().map(|e| BaselineRow {
            epoch: e.epoch,
            loss: e.loss,
            train_accuracy: e.train_accuracy,
            eval_accuracy: e.eval_accuracy,
        }),
    )?;
    write_csv(
        dir,
        "baseline_summary.csv",
        BASELINE_SUMMARY_HEADER,
        [BaselineSummary {
            float_accuracy: b.float_accuracy,
            accuracy: b.accuracy,
        }],
    )?;
    Ok(())
}

pub fn write_compress(dir: &Path, out: &CompressOutcome) -> Result<()> {
    ensure_dir(dir)?;
    write_atomic(&dir.join(POLICY_FILE), &out.policy.to_bytes())?;
    write_atomic(&dir.join(STUDENT_CHECKPOINT), &out.model.to_checkpoint().to_bytes())?;
    write_csv(
        dir,
        "steps.csv",
        STEPS_HEADER,
        out.steps.iter().map(|s| StepRow {
            step: s.step,
            epoch: s.epoch,
            memory: s.memory,
            kd: s.kd,
            expected_avg_bits: s.expected_avg_bits,
        }),
    )?;
    write_csv(
        dir,
        "epochs.csv",
        EPOCHS_HEADER,
        out.epochs.iter().map(|e| EpochRow {
            epoch: e.epoch,
            expected_avg_bits: e.expected_avg_bits,
            kd_loss: e.kd,
            soft_accuracy: e.soft_accuracy,
            hard_accuracy: e.hard_accuracy,
            hard_avg_bits: e.hard_avg_bits,
            pruned: e.pruned,
            min_max_pi: e.min_max_pi,
        }),
    )?;
    write_csv(
        dir,
        "groups.csv",
        GROUPS_HEADER,
        out.groups.iter().map(|g| GroupRow {
            epoch: g.epoch,
            layer: g.layer,
            group: g.group,
            channels: g.channels,
            b1: g.bits[0],
            b2: g.bits[1],
            b3: g.bits[2],
            chosen_bits: g.chosen_bits,
            max_pi: g.max_pi,
        }),
    )?;
    write_csv(
        dir,
        "probe.csv",
        PROBE_HEADER,
        out.probe.iter().map(|p| ProbeRow {
            pruned: p.pruned,
            agreement: p.agreement,
        }),
    )?;
    let shifts: String = out.audit.entries.iter().map(|e| format!("{e}\n")).collect();
    write_atomic(&dir.join(SHIFTS_FILE), shifts.as_bytes())?;
    write_csv(
        dir,
        "compress_summary.csv",
        COMPRESS_SUMMARY_HEADER,
        [CompressSummary {
            avg_bits: out.policy.avg_bits,
            soft_accuracy: out.soft_accuracy,
            hard_accuracy: out.hard_accuracy,
            pruned: out.policy.pruned_channels(),
        }],
    )?;
    Ok(())
}

pub fn write_eval(dir: &Path, r: &EvalReport) -> Result<()> {
    ensure_dir(dir)?;
    write_csv(
        dir,
        "eval.csv",
        EVAL_HEADER,
        [EvalRow {
            samples: r.samples,
            accuracy: r.accuracy,
            avg_bits: r.avg_bits,
            pruned: r.pruned_channels,
            agreement: r.agreement,
        }],
    )?;
    Ok(())
}

/// `sweep.csv` with every cell and `frontier.csv` with the given frontier.
pub fn write_sweep(dir: &Path, rows: &[SweepRow], frontier: &[SweepRow]) -> Result<()> {
    ensure_dir(dir)?;
    let conv = |r: &SweepRow| SweepCsvRow {
        p: r.penalty,
        groups: r.groups,
        avg_bits: r.avg_bits,
        accuracy: r.accuracy,
    };
    write_csv(dir, "sweep.csv", SWEEP_HEADER, rows.iter().map(conv))?;
    write_csv(dir, "frontier.csv", SWEEP_HEADER, frontier.iter().map(conv))?;
    Ok(())
}

pub fn read_policy(path: &Path) -> Result<CompressionPolicy> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    CompressionPolicy::from_bytes(&bytes)
}

/// Header of `final_bits.csv` for `groups` groups: `layer,g1,...,gG`.
pub fn final_bits_header(groups: usize) -> String {
    let mut h = String::from("layer");
    for g in 1..=groups {
        h.push_str(&format!(",g{g}"));
    }
    h
}

/// Writes `curve.csv` (per-epoch expected bits and distillation loss) and
/// `final_bits.csv` (one row per layer, one column per group, pruned group
/// at 0) for a finished compression run directory.
pub fn generate_report(dir: &Path) -> Result<Vec<PathBuf>> {
    let epochs_path = dir.join("epochs.csv");
    let mut rd = csv::Reader::from_path(&epochs_path).map_err(|e| csv_io(&epochs_path, e))?;
    let mut curve = Vec::new();
    for row in rd.deserialize::<EpochRow>() {
        let r = row.map_err(|e| csv_io(&epochs_path, e))?;
        curve.push(CurveRow {
            epoch: r.epoch,
            expected_avg_bits: r.expected_avg_bits,
            kd_loss: r.kd_loss,
        });
    }
    let policy = read_policy(&dir.join(POLICY_FILE))?;
    let mut matrix = csv::WriterBuilder::new().from_writer(Vec::new());
    let header = final_bits_header(policy.groups);
    matrix.write_record(header.split(','))?;
    for (l, layer) in policy.layers.iter().enumerate() {
        let mut rec = vec![l.to_string()];
        rec.extend(layer.bits.iter().map(u32::to_string));
        rec.push("0".into());
        matrix.write_record(&rec)?;
    }
    let matrix = matrix.into_inner().map_err(|e| Error::invalid(format!("csv buffer: {e}")))?;
    let a = write_csv(dir, "curve.csv", CURVE_HEADER, curve)?;
    let b = dir.join("final_bits.csv");
    write_atomic(&b, &matrix)?;
    Ok(vec![a, b])
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::invalid(format!("{}: {e}", path.display()))
}
