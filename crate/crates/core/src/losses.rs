//! Training objective: expected-memory penalty plus distillation.

use crate::error::{Error, Result};
use crate::partition::GroupPartition;
use crate::quant::MPModuleState;
use crate::tensor::{softmax_slice, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Penalty strength `p`.
    pub penalty: f32,
    /// Divisor `Z` on the raw bit count; the activation value count makes
    /// the penalty read as average bits per value.
    pub normalizer: f32,
}

impl LossConfig {
    pub fn new(penalty: f32, normalizer: f32) -> Result<Self> {
        if !(penalty > 0.0) || !(normalizer > 0.0) {
            return Err(Error::invalid(format!(
                "loss config needs p > 0 and Z > 0, got p={penalty}, Z={normalizer}"
            )));
        }
        Ok(LossConfig { penalty, normalizer })
    }
}

/// A module's stored volume `d_{l,g} * h_l * w_l` under a partition.
fn volume(m: &MPModuleState, partition: &GroupPartition, spatial: &[usize]) -> Result<f64> {
    let layer = partition
        .layers
        .get(m.layer)
        .ok_or_else(|| Error::invalid(format!("no partition entry for layer {}", m.layer)))?;
    if m.group + 1 >= partition.groups {
        return Err(Error::invalid(format!(
            "group {} is the pruned group and carries no module",
            m.group + 1
        )));
    }
    let hw = *spatial
        .get(m.layer)
        .ok_or_else(|| Error::invalid(format!("no spatial size for layer {}", m.layer)))?;
    Ok((layer.sizes[m.group] * hw) as f64)
}

/// `p / Z * sum pi_i b_i d_{l,g} h_l w_l` over the given modules, each paired
/// with the graph leaf holding its architecture parameters.
pub fn memory_loss(
    g: &mut Graph,
    modules: &[(&MPModuleState, Var)],
    partition: &GroupPartition,
    spatial: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(m, beta) in modules {
        let weight = volume(m, partition, spatial)? * cfg.penalty as f64 / cfg.normalizer as f64;
        let pi = crate::quant::mixing_var(g, beta, m)?;
        let bits = Tensor::from_vec(m.bits.iter().map(|&b| b as f32).collect());
        let e = g.mul_const(pi, &bits)?;
        let e = g.sum(e);
        let term = g.scale(e, weight as f32);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
}

/// Plain evaluation of the unscaled expected bit count.
pub fn expected_bit_count(
    modules: &[&MPModuleState],
    partition: &GroupPartition,
    spatial: &[usize],
) -> Result<f64> {
    modules.iter().try_fold(0.0, |acc, m| {
        Ok(acc + crate::quant::expected_bits(m) * volume(m, partition, spatial)?)
    })
}

/// Bit count with every module at its argmax branch.
pub fn hard_bit_count(
    modules: &[&MPModuleState],
    partition: &GroupPartition,
    spatial: &[usize],
) -> Result<f64> {
    modules.iter().try_fold(0.0, |acc, m| {
        Ok(acc + m.chosen_bits() as f64 * volume(m, partition, spatial)?)
    })
}

/// `D_KL(softmax(teacher) || softmax(student))`, averaged over the batch.
/// The teacher is a plain tensor, so no gradient reaches it.
pub fn kd_loss(g: &mut Graph, student_logits: Var, teacher_logits: &Tensor) -> Result<Var> {
    let s = g.value(student_logits);
    if s.shape() != teacher_logits.shape() || s.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "kd_loss",
            left: s.shape().to_vec(),
            right: teacher_logits.shape().to_vec(),
        });
    }
    let (n, k) = (s.shape()[0], s.shape()[1]);
    let mut p = Vec::with_capacity(n * k);
    let mut entropy_term = 0.0f64;
    for row in teacher_logits.data().chunks(k) {
        for q in softmax_slice(row) {
            if q > 0.0 {
                entropy_term += q as f64 * (q as f64).ln();
            }
            p.push(q);
        }
    }
    let p = Tensor::new(vec![n, k], p)?;
    let log_q = g.log_softmax(student_logits)?;
    let cross = g.mul_const(log_q, &p)?;
    let cross = g.sum(cross);
    let neg = g.scale(cross, -1.0 / n as f32);
    Ok(g.add_scalar(neg, (entropy_term / n as f64) as f32))
}

/// `L = L_memory + L_KD`.
pub fn total_loss(g: &mut Graph, mem: Var, kd: Var) -> Result<Var> {
    for v in [mem, kd] {
        if g.value(v).len() != 1 {
            return Err(Error::invalid("total_loss expects scalar components"));
        }
    }
    let kd = if g.value(kd).shape() != g.value(mem).shape() {
        let shape = g.value(mem).shape().to_vec();
        g.reshape(kd, &shape)?
    } else {
        kd
    };
    g.add(mem, kd)
}
