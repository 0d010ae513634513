//! Cross-entropy training of the uncompressed classifier.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{accuracy, substream};
use crate::config::RunConfig;
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::model::{cross_entropy, DeskCnn, Identity};
use crate::tensor::{sgd_step, Graph};

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
}

pub struct Baseline {
    pub model: DeskCnn,
    /// Eval accuracy with snapped 8-bit weights, the reference `A0`.
    pub accuracy: f64,
    /// Eval accuracy of the same weights before snapping.
    pub float_accuracy: f64,
    pub history: Vec<BaselineEpoch>,
}

/// One epoch of linear warmup, then cosine decay to zero.
pub(super) fn warmup_cosine(peak: f32, step: usize, warmup: usize, total: usize) -> f32 {
    if step < warmup {
        return peak * (step + 1) as f32 / warmup as f32;
    }
    let t = (step - warmup) as f32 / (total - warmup).max(1) as f32;
    peak * 0.5 * (1.0 + (std::f32::consts::PI * t).cos())
}

/// Trains from scratch with SGD under [`warmup_cosine`], then
/// snaps the weights to `cfg.weight_bits`.
pub fn train_baseline(cfg: &RunConfig, train: &DatasetSplit, eval: &DatasetSplit) -> Result<Baseline> {
    let mut model = DeskCnn::new(train.classes, substream(cfg.seed, "init"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(substream(cfg.seed, "baseline-order"));
    let mut history = Vec::new();
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.baseline_epochs * steps_per_epoch).max(1);
    let mut step = 0;
    for epoch in 0..cfg.baseline_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0f64, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let x = train.batch(batch);
            let y = train.batch_labels(batch);
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &x, true, &mut Identity)?;
            let loss = cross_entropy(&mut g, fwd.logits, &y)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("cross-entropy {lv} in baseline epoch {}", epoch + 1),
                });
            }
            loss_sum += lv as f64 * batch.len() as f64;
            hits += super::predictions_of(g.value(fwd.logits))
                .iter()
                .zip(&y)
                .filter(|(a, b)| a == b)
                .count();
            g.backward(loss)?;
            model.zero_grad();
            model.collect_grads(&g, &fwd);
            let lr = warmup_cosine(cfg.baseline_lr, step, steps_per_epoch, total_steps);
            sgd_step(model.params_mut(), lr, cfg.momentum);
            step += 1;
        }
        history.push(BaselineEpoch {
            epoch: epoch + 1,
            loss: loss_sum / train.len() as f64,
            train_accuracy: 100.0 * hits as f64 / train.len() as f64,
            eval_accuracy: accuracy(&mut model, eval, &mut Identity)?,
        });
    }
    let float_accuracy = accuracy(&mut model, eval, &mut Identity)?;
    model.snap_weights(cfg.weight_bits);
    let accuracy = accuracy(&mut model, eval, &mut Identity)?;
    Ok(Baseline {
        model,
        accuracy,
        float_accuracy,
        history,
    })
}
