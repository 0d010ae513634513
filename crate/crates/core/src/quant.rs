//! Uniform activation quantizers and the learnable mixed-precision module.
//!
//! A module owns `N` quantizer branches at ascending bit-widths and one
//! architecture parameter per branch. In soft mode the branch outputs are
//! mixed by `softmax(beta)`; in hard mode only the argmax branch is used.

use crate::error::{Error, Result};
use crate::tensor::{argmax, softmax_slice, Graph, Param, Tensor, Var};

/// Fake-quantizes one value onto the `2^bits` uniform levels of `[lo, hi]`.
///
/// The level index is `round((clamp(x) - lo) / step)` with halves rounded
/// away from zero, evaluated in `f64` so results do not depend on the
/// platform's `f32` fused-multiply behaviour.
pub fn quantize_scalar(x: f32, lo: f32, hi: f32, bits: u32) -> f32 {
    let levels = ((1u64 << bits) - 1) as f64;
    let (lo64, hi64) = (lo as f64, hi as f64);
    let step = (hi64 - lo64) / levels;
    let c = (x as f64).clamp(lo64, hi64);
    let idx = ((c - lo64) / step).round().min(levels);
    ((lo64 + idx * step) as f32).clamp(lo, hi)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UniformQuantizer {
    pub bits: u32,
    pub lo: f32,
    pub hi: f32,
}

impl UniformQuantizer {
    pub fn new(bits: u32, lo: f32, hi: f32) -> Result<Self> {
        if !(1..=24).contains(&bits) {
            return Err(Error::invalid(format!("bit width must be in 1..=24, got {bits}")));
        }
        if !(lo < hi) {
            return Err(Error::invalid(format!(
                "quantizer range needs lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(UniformQuantizer { bits, lo, hi })
    }

    pub fn level_count(&self) -> u64 {
        1u64 << self.bits
    }

    pub fn apply(&self, x: f32) -> f32 {
        quantize_scalar(x, self.lo, self.hi, self.bits)
    }
}

/// Elementwise quantization of a tensor (no gradient tracking).
pub fn quantize(x: &Tensor, q: &UniformQuantizer) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| q.apply(v)).collect())
        .expect("same shape")
}

/// Asymmetric clamp range tracked as an exponential moving average of batch
/// minima and maxima.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmaRange {
    pub lo: f32,
    pub hi: f32,
    pub decay: f32,
    pub initialized: bool,
}

impl Default for EmaRange {
    fn default() -> Self {
        EmaRange {
            lo: 0.0,
            hi: 1.0,
            decay: 0.99,
            initialized: false,
        }
    }
}

impl EmaRange {
    pub fn fixed(lo: f32, hi: f32) -> Self {
        EmaRange {
            lo,
            hi,
            decay: 0.99,
            initialized: true,
        }
    }

    pub fn observe(&mut self, values: &[f32]) {
        if values.is_empty() {
            return;
        }
        let (mn, mx) = values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !self.initialized {
            self.lo = mn;
            self.hi = mx;
            self.initialized = true;
        } else {
            self.lo = self.decay * self.lo + (1.0 - self.decay) * mn;
            self.hi = self.decay * self.hi + (1.0 - self.decay) * mx;
        }
    }

    /// Clamp bounds with a minimum width so the quantizer stays defined on
    /// constant inputs.
    pub fn bounds(&self) -> (f32, f32) {
        let width = (self.hi - self.lo).max(1e-6 * self.lo.abs().max(self.hi.abs()).max(1.0));
        if self.hi - self.lo >= width {
            (self.lo, self.hi)
        } else {
            let mid = 0.5 * (self.lo + self.hi);
            (mid - 0.5 * width, mid + 0.5 * width)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixMode {
    /// Weighted sum of every branch.
    Soft,
    /// Only the branch with the largest mixing weight.
    Hard,
}

/// State of one learnable mixed-precision module, i.e. one (layer, group).
#[derive(Clone, Debug, PartialEq)]
pub struct MPModuleState {
    pub layer: usize,
    pub group: usize,
    /// Branch bit-widths, strictly ascending.
    pub bits: Vec<u32>,
    /// Architecture parameters, one per branch.
    pub arch: Param,
    pub range: EmaRange,
    /// Softmax temperature: `pi = softmax(beta / temperature)`.
    pub temperature: f32,
}

impl MPModuleState {
    pub fn new(layer: usize, group: usize, bits: &[u32]) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::invalid("a mixed-precision module needs at least one branch"));
        }
        if bits.windows(2).any(|w| w[0] >= w[1]) || bits[0] < 1 {
            return Err(Error::invalid(format!(
                "branch bit-widths must be strictly ascending and >= 1, got {bits:?}"
            )));
        }
        Ok(MPModuleState {
            layer,
            group,
            bits: bits.to_vec(),
            arch: Param::new(Tensor::zeros(&[bits.len()])),
            range: EmaRange::default(),
            temperature: 1.0,
        })
    }

    pub fn with_arch(mut self, beta: &[f32]) -> Result<Self> {
        if beta.len() != self.bits.len() {
            return Err(Error::invalid(format!(
                "{} architecture parameters for {} branches",
                beta.len(),
                self.bits.len()
            )));
        }
        self.arch = Param::new(Tensor::from_vec(beta.to_vec()));
        Ok(self)
    }

    pub fn branches(&self) -> usize {
        self.bits.len()
    }

    pub fn beta(&self) -> &[f32] {
        self.arch.value.data()
    }

    pub fn mixing_weights(&self) -> Vec<f32> {
        if self.temperature == 1.0 {
            softmax_slice(self.beta())
        } else {
            let t = self.temperature;
            softmax_slice(&self.beta().iter().map(|b| b / t).collect::<Vec<_>>())
        }
    }

    /// Index of the dominant branch; ties resolve to the lowest bit-width.
    pub fn chosen_branch(&self) -> usize {
        argmax(self.beta())
    }

    pub fn chosen_bits(&self) -> u32 {
        self.bits[self.chosen_branch()]
    }

    pub fn quantizer(&self, branch: usize) -> Result<UniformQuantizer> {
        let (lo, hi) = self.range.bounds();
        UniformQuantizer::new(self.bits[branch], lo, hi)
    }
}

/// `sum_i pi_i * b_i`, the expected bit-width of a module.
pub fn expected_bits(state: &MPModuleState) -> f64 {
    state
        .mixing_weights()
        .iter()
        .zip(&state.bits)
        .map(|(&p, &b)| p as f64 * b as f64)
        .sum()
}

/// Graph node for the mixing weights of `state`, given the leaf holding
/// its architecture parameters.
pub fn mixing_var(g: &mut Graph, beta: Var, state: &MPModuleState) -> Result<Var> {
    if state.temperature == 1.0 {
        g.softmax(beta)
    } else {
        let scaled = g.scale(beta, 1.0 / state.temperature);
        g.softmax(scaled)
    }
}

/// Result of [`mix_forward`]; `beta` is the graph leaf holding the
/// architecture parameters in soft mode.
#[derive(Clone, Copy, Debug)]
pub struct MixOutput {
    pub out: Var,
    pub beta: Option<Var>,
}

/// Quantizes a group slice `(n, d_g, h, w)` through the module's branches.
pub fn mix_forward(
    g: &mut Graph,
    a_prime: Var,
    state: &MPModuleState,
    mode: MixMode,
) -> Result<MixOutput> {
    if g.value(a_prime).is_empty() {
        return Err(Error::invalid("mix_forward on an empty group slice"));
    }
    match mode {
        MixMode::Hard => {
            let q = state.quantizer(state.chosen_branch())?;
            let out = g.quantize(a_prime, q.lo, q.hi, q.bits)?;
            Ok(MixOutput { out, beta: None })
        }
        MixMode::Soft => {
            let mut branches = Vec::with_capacity(state.branches());
            for i in 0..state.branches() {
                let q = state.quantizer(i)?;
                branches.push(g.quantize(a_prime, q.lo, q.hi, q.bits)?);
            }
            let beta = g.param(&state.arch);
            let pi = mixing_var(g, beta, state)?;
            let out = g.weighted_sum(&branches, pi)?;
            Ok(MixOutput {
                out,
                beta: Some(beta),
            })
        }
    }
}
