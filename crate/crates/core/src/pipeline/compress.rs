//! Compression fine-tuning: periodic PCA and partition refresh, soft
//! mixed-precision training under memory + distillation loss, and the
//! dynamic bit-width search.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::policy::{kept_columns, kept_rows, CompressionPolicy, LayerPolicy, PolicyHook};
use super::{accuracy, predict, substream};
use super::baseline::warmup_cosine;
use crate::config::{RunConfig, Thresholds};
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::losses::{expected_bit_count, kd_loss, memory_loss, total_loss, LossConfig};
use crate::model::{agreement, layer_spatial, ActivationHook, DeskCnn, Identity, LAYER_CHANNELS};
use crate::partition::{build_partition, partition_from_counts, priority_order, GroupPartition, LayerSelection, SelectionState};
use crate::quant::{mix_forward, MPModuleState, MixMode};
use crate::search::{AuditLog, SearchState};
use crate::tensor::{sgd_step, Graph, Tensor, Var};
use crate::transform::{CovarianceAccumulator, TransformCache};

const FORWARD_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub memory: f64,
    pub kd: f64,
    pub expected_avg_bits: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub expected_avg_bits: f64,
    pub kd: f64,
    pub soft_accuracy: f64,
    pub hard_accuracy: f64,
    pub hard_avg_bits: f64,
    pub pruned: usize,
    /// Smallest `max_i pi_i` over non-empty groups.
    pub min_max_pi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupLog {
    pub epoch: usize,
    pub layer: usize,
    pub group: usize,
    pub channels: usize,
    pub bits: Vec<u32>,
    pub chosen_bits: u32,
    pub beta: Vec<f32>,
    pub max_pi: f64,
}

/// One point of the pruning probe: channels pruned and agreement with the
/// teacher in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbePoint {
    pub pruned: usize,
    pub agreement: f64,
}

pub struct CompressOutcome {
    pub policy: CompressionPolicy,
    pub model: DeskCnn,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub groups: Vec<GroupLog>,
    pub audit: AuditLog,
    pub probe: Vec<ProbePoint>,
    pub soft_accuracy: f64,
    pub hard_accuracy: f64,
}

struct Slot {
    mp: MPModuleState,
    search: SearchState,
}

/// Live compression state of every hooked layer.
struct State {
    transforms: Vec<TransformCache>,
    partition: GroupPartition,
    mats: Vec<(Tensor, Tensor)>,
    slots: Vec<Vec<Slot>>,
}

impl State {
    fn set_partition(&mut self, transforms: Vec<TransformCache>, partition: GroupPartition) {
        self.mats = transforms
            .iter()
            .zip(&partition.layers)
            .map(|(t, g)| (kept_rows(t, g), kept_columns(t, g)))
            .collect();
        self.transforms = transforms;
        self.partition = partition;
    }

    fn modules(&self) -> Vec<&MPModuleState> {
        self.slots.iter().flatten().map(|s| &s.mp).collect()
    }

    fn min_max_pi(&self) -> f64 {
        let mut m = 1.0f64;
        for (l, slots) in self.slots.iter().enumerate() {
            for (g, s) in slots.iter().enumerate() {
                if self.partition.layers[l].sizes[g] > 0 {
                    let pi = s.mp.mixing_weights();
                    m = m.min(pi.iter().cloned().fold(0.0f32, f32::max) as f64);
                }
            }
        }
        m
    }

    fn policy(&self, cfg: &RunConfig) -> Result<CompressionPolicy> {
        let spatial = layer_spatial();
        let layers = self
            .slots
            .iter()
            .enumerate()
            .map(|(l, slots)| LayerPolicy {
                transform: self.transforms[l].clone(),
                groups: self.partition.layers[l].clone(),
                spatial: spatial[l],
                bits: slots.iter().map(|s| s.mp.chosen_bits()).collect(),
                ranges: slots.iter().map(|s| s.mp.range.bounds()).collect(),
            })
            .collect();
        CompressionPolicy::new(cfg.seed, cfg.hash(), cfg.groups, cfg.b_min, layers)
    }
}

/// Soft or hard mixed-precision activation path over the live state.
struct MixHook<'a> {
    transforms: &'a [TransformCache],
    partition: &'a GroupPartition,
    mats: &'a [(Tensor, Tensor)],
    slots: &'a mut [Vec<Slot>],
    mode: MixMode,
    calibrate: bool,
    betas: Vec<(usize, usize, Var)>,
}

impl<'a> MixHook<'a> {
    fn new(state: &'a mut State, mode: MixMode, calibrate: bool) -> Self {
        MixHook {
            transforms: &state.transforms,
            partition: &state.partition,
            mats: &state.mats,
            slots: &mut state.slots,
            mode,
            calibrate,
            betas: Vec::new(),
        }
    }
}

impl ActivationHook for MixHook<'_> {
    fn apply(&mut self, g: &mut Graph, layer: usize, x: Var) -> Result<Var> {
        let (fwd, inv) = &self.mats[layer];
        let mean = &self.transforms[layer].mean;
        let a = g.channel_affine(x, fwd, Some(mean), None)?;
        let groups = &self.partition.layers[layer];
        let mut parts = Vec::new();
        for (grp, slot) in self.slots[layer].iter_mut().enumerate() {
            let r = groups.range(grp);
            if r.is_empty() {
                continue;
            }
            let s = g.narrow_channels(a, r.start, r.len())?;
            if self.calibrate {
                slot.mp.range.observe(g.value(s).data());
            }
            let out = mix_forward(g, s, &slot.mp, self.mode).map_err(|e| e.in_group(layer, grp + 1))?;
            if let Some(b) = out.beta {
                self.betas.push((layer, grp, b));
            }
            parts.push(out.out);
        }
        let q = g.concat_channels(&parts)?;
        g.channel_affine(q, inv, None, Some(mean))
    }
}

/// PCA truncation without quantization, for the pruning probe.
struct TruncateHook<'a> {
    transforms: &'a [TransformCache],
    mats: Vec<(Tensor, Tensor)>,
}

impl ActivationHook for TruncateHook<'_> {
    fn apply(&mut self, g: &mut Graph, layer: usize, x: Var) -> Result<Var> {
        let (fwd, inv) = &self.mats[layer];
        let mean = &self.transforms[layer].mean;
        let a = g.channel_affine(x, fwd, Some(mean), None)?;
        g.channel_affine(a, inv, None, Some(mean))
    }
}

/// Fits one PCA per hooked layer on the uncompressed activations of
/// `split`.
pub fn fit_transforms(model: &mut DeskCnn, split: &DatasetSplit) -> Result<Vec<TransformCache>> {
    struct Accumulate(Vec<CovarianceAccumulator>);
    impl ActivationHook for Accumulate {
        fn apply(&mut self, g: &mut Graph, layer: usize, x: Var) -> Result<Var> {
            self.0[layer].observe(g.value(x))?;
            Ok(x)
        }
    }
    let mut acc = Accumulate(LAYER_CHANNELS.iter().map(|&d| CovarianceAccumulator::new(d)).collect());
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(FORWARD_CHUNK) {
        model.logits(&split.batch(chunk), FORWARD_CHUNK, &mut acc)?;
    }
    acc.0.iter().enumerate().map(|(l, a)| a.finish(l)).collect()
}

fn selection_state(transforms: &[TransformCache]) -> Result<SelectionState> {
    let spatial = layer_spatial();
    let layers = transforms
        .iter()
        .zip(&spatial)
        .map(|(t, &s)| LayerSelection::from_eigenvalues(&t.eigenvalues, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(SelectionState::new(layers))
}

/// Boundaries for `G - 1` partition cuts: group `G` takes `pruned`
/// positions of the priority order and the rest is split evenly.
fn even_counts(groups: usize, pruned: usize, total: usize) -> Vec<usize> {
    (0..groups - 1)
        .map(|j| pruned + ((total - pruned) as f64 * j as f64 / (groups - 1) as f64).round() as usize)
        .collect()
}

/// Largest number of channels that can be dropped along the priority order
/// while the top-1 agreement with `reference` falls by at most `budget`
/// points, found by bisection.
pub fn probe_pruning(
    model: &mut DeskCnn,
    probe: &DatasetSplit,
    reference: &[usize],
    transforms: &[TransformCache],
    budget: f64,
) -> Result<(usize, Vec<ProbePoint>)> {
    let state = selection_state(transforms)?;
    let mut points = Vec::new();
    let mut measure = |k: usize, points: &mut Vec<ProbePoint>| -> Result<f64> {
        let part = partition_from_counts(&state, &[k])?;
        let mut hook = TruncateHook {
            transforms,
            mats: transforms
                .iter()
                .zip(&part.layers)
                .map(|(t, g)| (kept_rows(t, g), kept_columns(t, g)))
                .collect(),
        };
        let a = agreement(&predict(model, probe, &mut hook)?, reference);
        points.push(ProbePoint { pruned: k, agreement: a });
        Ok(a)
    };
    let full = measure(0, &mut points)?;
    let (mut lo, mut hi) = (0usize, state.removable());
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if full - measure(mid, &mut points)? <= budget {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Ok((lo, points))
}

/// Fine-tunes `baseline` into a compressed student and freezes the policy.
/// Holds 1 for the first half of training, then decays geometrically to
/// `tau_end` at the last step.
fn temperature(tau_end: f32, step: usize, total: usize) -> f32 {
    let start = total / 2;
    if tau_end == 1.0 || step <= start || total <= start + 1 {
        return 1.0;
    }
    tau_end.powf((step - start) as f32 / (total - 1 - start) as f32)
}

pub fn compress(
    cfg: &RunConfig,
    baseline: &DeskCnn,
    train: &DatasetSplit,
    eval: &DatasetSplit,
) -> Result<CompressOutcome> {
    cfg.validate()?;
    let spatial = layer_spatial();
    let z: usize = LAYER_CHANNELS.iter().zip(&spatial).map(|(d, s)| d * s).sum();
    let loss_cfg = LossConfig::new(cfg.penalty, z as f32)?;

    // Fixed fine-tuning subset; the PCA sample and the probe set are its
    // leading images under independent shuffles.
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(substream(cfg.seed, "finetune-subset")));
    order.truncate(cfg.finetune_size.min(train.len()));
    let subset = select(train, &order);
    let mut shuffled: Vec<usize> = (0..subset.len()).collect();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(substream(cfg.seed, "pca-sample")));
    let pca_set = select(&subset, &shuffled[..cfg.pca_samples.min(subset.len())]);
    let probe_set = select(&subset, &shuffled[..cfg.probe_size.min(subset.len())]);

    let mut teacher = baseline.clone();
    teacher.weight_bits = None;
    let all: Vec<usize> = (0..subset.len()).collect();
    let teacher_logits = teacher.logits(&subset.batch(&all), FORWARD_CHUNK, &mut Identity)?;
    let probe_reference = predict(&mut teacher, &probe_set, &mut Identity)?;

    let mut student = baseline.clone();
    student.weight_bits = Some(cfg.weight_bits);
    for p in student.params_mut() {
        p.reset_velocity();
    }

    let mut slots = Vec::new();
    for l in 0..LAYER_CHANNELS.len() {
        let mut row = Vec::new();
        for grp in 0..cfg.groups - 1 {
            let mp = MPModuleState::new(l, grp, &cfg.init_bits)?;
            let search = SearchState::new(&mp, cfg.patience, cfg.b_min, cfg.patience_mode)?;
            row.push(Slot { mp, search });
        }
        slots.push(row);
    }
    let mut state = State {
        transforms: Vec::new(),
        partition: GroupPartition::unpruned(&LAYER_CHANNELS, cfg.groups),
        mats: Vec::new(),
        slots,
    };

    let mut pruned_count: Option<usize> = None;
    let mut probe = Vec::new();
    let mut audit = AuditLog::default();
    let (mut steps, mut epochs, mut groups) = (Vec::new(), Vec::new(), Vec::new());
    let mut batch_rng = ChaCha8Rng::seed_from_u64(substream(cfg.seed, "finetune-order"));
    let mut step = 0usize;
    let total_steps = cfg.epochs * subset.len().div_ceil(cfg.batch_size);

    for epoch in 0..cfg.epochs.max(1) {
        if epoch % cfg.refit_every == 0 {
            let transforms = fit_transforms(&mut student, &pca_set)?;
            let selection = selection_state(&transforms)?;
            let partition = match &cfg.thresholds {
                Thresholds::Fixed(t) => build_partition(&selection, t)?,
                Thresholds::Auto => {
                    let k = match pruned_count {
                        Some(k) => k,
                        None => {
                            let (k, points) =
                                probe_pruning(&mut student, &probe_set, &probe_reference, &transforms, cfg.dr_budget as f64)?;
                            probe = points;
                            pruned_count = Some(k);
                            k
                        }
                    };
                    let total = priority_order(&selection).1.len();
                    partition_from_counts(&selection, &even_counts(cfg.groups, k, total))?
                }
            };
            state.set_partition(transforms, partition);
            if epoch == 0 {
                calibrate(&mut student, &mut state, &pca_set)?;
            }
        }
        if cfg.epochs == 0 {
            break;
        }

        let mut idx: Vec<usize> = (0..subset.len()).collect();
        idx.shuffle(&mut batch_rng);
        let mut kd_sum = 0.0f64;
        for batch in idx.chunks(cfg.batch_size) {
            let tau = temperature(cfg.tau_end, step, total_steps);
            for s in state.slots.iter_mut().flatten() {
                s.mp.temperature = tau;
            }
            let x = subset.batch(batch);
            let t = teacher_logits.select_rows(batch);
            let mut g = Graph::new();
            let mut hook = MixHook::new(&mut state, MixMode::Soft, true);
            let fwd = student.forward(&mut g, &x, false, &mut hook)?;
            let betas = std::mem::take(&mut hook.betas);
            let pairs: Vec<(&MPModuleState, Var)> =
                betas.iter().map(|&(l, grp, v)| (&state.slots[l][grp].mp, v)).collect();
            let mem = memory_loss(&mut g, &pairs, &state.partition, &spatial, &loss_cfg)?;
            let kd = kd_loss(&mut g, fwd.logits, &t)?;
            let total = total_loss(&mut g, mem, kd)?;
            let (mv, kv) = (g.value(mem).item() as f64, g.value(kd).item() as f64);
            if !(mv.is_finite() && kv.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    detail: format!("memory loss {mv}, distillation loss {kv}"),
                });
            }
            g.backward(total)?;

            student.zero_grad();
            student.collect_grads(&g, &fwd);
            sgd_step(student.params_mut(), warmup_cosine(cfg.lr, step, 0, total_steps), cfg.momentum);
            for &(l, grp, v) in &betas {
                let arch = &mut state.slots[l][grp].mp.arch;
                arch.zero_grad();
                if let Some(gr) = g.grad(v) {
                    arch.add_grad(gr);
                }
            }
            step_arch(&mut state, &betas, cfg);
            for slots in &mut state.slots {
                for s in slots.iter_mut() {
                    s.search.observe(&mut s.mp, step, &mut audit);
                }
            }

            let expected = expected_bit_count(&state.modules(), &state.partition, &spatial)? / z as f64;
            steps.push(StepLog {
                step,
                epoch: epoch + 1,
                memory: mv,
                kd: kv,
                expected_avg_bits: expected,
            });
            kd_sum += kv * batch.len() as f64;
            step += 1;
        }

        let policy = state.policy(cfg)?;
        let soft = accuracy(&mut student, eval, &mut MixHook::new(&mut state, MixMode::Soft, false))?;
        let hard = accuracy(&mut student, eval, &mut PolicyHook::new(&policy))?;
        epochs.push(EpochLog {
            epoch: epoch + 1,
            expected_avg_bits: expected_bit_count(&state.modules(), &state.partition, &spatial)? / z as f64,
            kd: kd_sum / subset.len() as f64,
            soft_accuracy: soft,
            hard_accuracy: hard,
            hard_avg_bits: policy.avg_bits,
            pruned: policy.pruned_channels(),
            min_max_pi: state.min_max_pi(),
        });
        for (l, slots) in state.slots.iter().enumerate() {
            for (grp, s) in slots.iter().enumerate() {
                groups.push(GroupLog {
                    epoch: epoch + 1,
                    layer: l,
                    group: grp + 1,
                    channels: state.partition.layers[l].sizes[grp],
                    bits: s.mp.bits.clone(),
                    chosen_bits: s.mp.chosen_bits(),
                    beta: s.mp.beta().to_vec(),
                    max_pi: s.mp.mixing_weights().iter().cloned().fold(0.0f32, f32::max) as f64,
                });
            }
        }
    }

    let policy = state.policy(cfg)?;
    let soft_accuracy = match epochs.last() {
        Some(e) => e.soft_accuracy,
        None => accuracy(&mut student, eval, &mut MixHook::new(&mut state, MixMode::Soft, false))?,
    };
    student.snap_weights(cfg.weight_bits);
    student.weight_bits = None;
    let hard_accuracy = accuracy(&mut student, eval, &mut PolicyHook::new(&policy))?;
    Ok(CompressOutcome {
        policy,
        model: student,
        steps,
        epochs,
        groups,
        audit,
        probe,
        soft_accuracy,
        hard_accuracy,
    })
}

fn step_arch(state: &mut State, betas: &[(usize, usize, Var)], cfg: &RunConfig) {
    let params = state
        .slots
        .iter_mut()
        .enumerate()
        .flat_map(|(l, row)| row.iter_mut().enumerate().map(move |(grp, s)| (l, grp, s)))
        .filter(|(l, grp, _)| betas.iter().any(|&(bl, bg, _)| bl == *l && bg == *grp))
        .map(|(_, _, s)| &mut s.mp.arch);
    sgd_step(params, cfg.arch_lr, cfg.momentum);
}

/// Initializes calibration ranges from the sample set before training.
fn calibrate(model: &mut DeskCnn, state: &mut State, split: &DatasetSplit) -> Result<()> {
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(FORWARD_CHUNK) {
        let mut hook = MixHook::new(state, MixMode::Hard, true);
        model.logits(&split.batch(chunk), FORWARD_CHUNK, &mut hook)?;
    }
    Ok(())
}

fn select(split: &DatasetSplit, idx: &[usize]) -> DatasetSplit {
    let mut images = Vec::with_capacity(idx.len() * split.pixels());
    for &i in idx {
        images.extend_from_slice(split.image(i));
    }
    DatasetSplit {
        images,
        labels: idx.iter().map(|&i| split.labels[i]).collect(),
        ..split.take(0)
    }
}
