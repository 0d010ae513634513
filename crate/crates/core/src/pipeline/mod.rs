//! The compression workflow: baseline training, compression fine-tuning,
//! evaluation and sweeps.

mod baseline;
mod compress;
mod evaluate;
mod policy;
mod sweep;

pub use baseline::{train_baseline, Baseline, BaselineEpoch};
pub use compress::{compress, fit_transforms, probe_pruning, CompressOutcome, EpochLog, GroupLog, ProbePoint, StepLog};
pub use evaluate::{check_shapes, evaluate, EvalReport};
pub use policy::{average_bits, CompressionPolicy, LayerPolicy, PolicyHook, POLICY_MAGIC, POLICY_VERSION};
pub use sweep::{frontier, grid, sweep, SweepCell, SweepRow};

use sha2::{Digest, Sha256};

use crate::data::DatasetSplit;
use crate::error::Result;
use crate::model::{agreement, predictions, ActivationHook, DeskCnn};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 250;

/// Independent seed for one named random stream of a run.
pub fn substream(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

pub(crate) fn predictions_of(logits: &Tensor) -> Vec<usize> {
    predictions(logits)
}

/// Predicted classes over a whole split.
pub fn predict(model: &mut DeskCnn, split: &DatasetSplit, hook: &mut dyn ActivationHook) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut out = Vec::with_capacity(split.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        out.extend(predictions(&model.logits(&split.batch(chunk), EVAL_CHUNK, hook)?));
    }
    Ok(out)
}

/// Top-1 accuracy in percent.
pub fn accuracy(model: &mut DeskCnn, split: &DatasetSplit, hook: &mut dyn ActivationHook) -> Result<f64> {
    let labels: Vec<usize> = split.labels.iter().map(|&l| l as usize).collect();
    Ok(agreement(&predict(model, split, hook)?, &labels))
}
