use super::policy::{CompressionPolicy, PolicyHook};
use super::predict;
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::model::{agreement, layer_spatial, DeskCnn, Identity, LAYER_CHANNELS};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    /// Top-1 accuracy in percent under the hard policy.
    pub accuracy: f64,
    pub avg_bits: f64,
    pub pruned_channels: usize,
    /// Top-1 agreement with the same model run uncompressed, in percent.
    pub agreement: f64,
}

/// Hard-mode inference of `policy` on `model` over `split`.
pub fn evaluate(policy: &CompressionPolicy, model: &DeskCnn, split: &DatasetSplit) -> Result<EvalReport> {
    check_shapes(policy)?;
    if model.classes() != split.classes {
        return Err(Error::invalid(format!(
            "model has {} classes, dataset has {}",
            model.classes(),
            split.classes
        )));
    }
    let mut model = model.clone();
    model.weight_bits = None;
    let hard = predict(&mut model, split, &mut PolicyHook::new(policy))?;
    let plain = predict(&mut model, split, &mut Identity)?;
    let labels: Vec<usize> = split.labels.iter().map(|&l| l as usize).collect();
    Ok(EvalReport {
        samples: split.len(),
        accuracy: agreement(&hard, &labels),
        avg_bits: policy.avg_bits,
        pruned_channels: policy.pruned_channels(),
        agreement: agreement(&hard, &plain),
    })
}

/// Fails unless the policy was produced for the desk CNN's feature maps.
pub fn check_shapes(policy: &CompressionPolicy) -> Result<()> {
    let spatial = layer_spatial();
    if policy.layers.len() != LAYER_CHANNELS.len() {
        return Err(Error::invalid(format!(
            "policy has {} layers, model has {}",
            policy.layers.len(),
            LAYER_CHANNELS.len()
        )));
    }
    for (l, layer) in policy.layers.iter().enumerate() {
        if layer.channels() != LAYER_CHANNELS[l] || layer.spatial != spatial[l] {
            return Err(Error::invalid(format!(
                "policy layer {l} is {} channels x {} positions, model has {} x {}",
                layer.channels(),
                layer.spatial,
                LAYER_CHANNELS[l],
                spatial[l]
            )));
        }
    }
    Ok(())
}
