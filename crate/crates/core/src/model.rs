//! The desk-scale classifier: four conv blocks and two linear layers.
//!
//! Each block is `conv3x3 (no bias) -> batch norm -> relu -> hook`, with a
//! 2x2 max pool after blocks 1, 2 and 4. The hook sees the output feature
//! map of every block before pooling; it is where activations get
//! compressed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BnStats, Checkpoint, Graph, Param, Tensor, Var};

/// Output channels of the four hooked layers.
pub const LAYER_CHANNELS: [usize; 4] = [16, 32, 32, 64];
/// Feature-map side length at each hooked layer.
pub const LAYER_SIDE: [usize; 4] = [32, 16, 8, 8];
const POOL_AFTER: [bool; 4] = [true, true, false, true];
const INPUT_CHANNELS: usize = 3;
const HIDDEN: usize = 64;

/// `h * w` of each hooked layer.
pub fn layer_spatial() -> Vec<usize> {
    LAYER_SIDE.iter().map(|s| s * s).collect()
}

/// Intercepts the feature map of each hooked layer.
pub trait ActivationHook {
    fn apply(&mut self, g: &mut Graph, layer: usize, x: Var) -> Result<Var>;
}

/// Leaves activations untouched.
pub struct Identity;

impl ActivationHook for Identity {
    fn apply(&mut self, _: &mut Graph, _: usize, x: Var) -> Result<Var> {
        Ok(x)
    }
}

/// Copies each hooked feature map out of the graph.
#[derive(Default)]
pub struct Recorder {
    pub maps: Vec<Option<Tensor>>,
}

impl ActivationHook for Recorder {
    fn apply(&mut self, g: &mut Graph, layer: usize, x: Var) -> Result<Var> {
        if self.maps.len() <= layer {
            self.maps.resize(layer + 1, None);
        }
        self.maps[layer] = Some(g.value(x).clone());
        Ok(x)
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    weight: Param,
    gamma: Param,
    beta: Param,
    stats: BnStats,
}

#[derive(Clone, Debug)]
pub struct DeskCnn {
    blocks: Vec<ConvBlock>,
    fc1_w: Param,
    fc1_b: Param,
    fc2_w: Param,
    fc2_b: Param,
    classes: usize,
    /// Weight fake-quantization width applied in every forward pass.
    pub weight_bits: Option<u32>,
}

/// A forward pass: the logits plus the graph leaf of every parameter, in
/// [`DeskCnn::params_mut`] order.
pub struct Forward {
    pub logits: Var,
    pub params: Vec<Var>,
}

fn uniform_param(r: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Param {
    let bound = (6.0 / fan_in as f32).sqrt();
    Param::new(Tensor::from_fn(shape, |_| r.gen_range(-bound..bound)))
}

/// Per-tensor min/max range of a weight tensor, or `None` when constant.
fn weight_range(t: &Tensor) -> Option<(f32, f32)> {
    let (lo, hi) = t
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    (lo < hi).then_some((lo, hi))
}

impl DeskCnn {
    pub fn new(classes: usize, seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = INPUT_CHANNELS;
        let mut blocks = Vec::new();
        for &c in &LAYER_CHANNELS {
            blocks.push(ConvBlock {
                weight: uniform_param(&mut r, &[c, inputs, 3, 3], inputs * 9),
                gamma: Param::new(Tensor::ones(&[c])),
                beta: Param::new(Tensor::zeros(&[c])),
                stats: BnStats::new(c),
            });
            inputs = c;
        }
        let flat = LAYER_CHANNELS[3] * 4 * 4;
        DeskCnn {
            blocks,
            fc1_w: uniform_param(&mut r, &[HIDDEN, flat], flat),
            fc1_b: Param::new(Tensor::zeros(&[HIDDEN])),
            fc2_w: uniform_param(&mut r, &[classes, HIDDEN], HIDDEN),
            fc2_b: Param::new(Tensor::zeros(&[classes])),
            classes,
            weight_bits: None,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.gamma);
            out.push(&mut b.beta);
        }
        out.extend([&mut self.fc1_w, &mut self.fc1_b, &mut self.fc2_w, &mut self.fc2_b]);
        out
    }

    fn weight_leaf(&self, g: &mut Graph, p: &Param) -> Result<Var> {
        let v = g.param(p);
        match (self.weight_bits, weight_range(&p.value)) {
            (Some(bits), Some((lo, hi))) => g.quantize(v, lo, hi, bits),
            _ => Ok(v),
        }
    }

    /// Runs the network on a `(n, 3, 32, 32)` batch. With `bn_train` the
    /// batch statistics normalize and update the running estimates.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        input: &Tensor,
        bn_train: bool,
        hook: &mut dyn ActivationHook,
    ) -> Result<Forward> {
        let mut params = Vec::new();
        let mut x = g.constant(input.clone());
        for l in 0..self.blocks.len() {
            let w = self.weight_leaf(g, &self.blocks[l].weight)?;
            let gamma = g.param(&self.blocks[l].gamma);
            let beta = g.param(&self.blocks[l].beta);
            params.extend([w, gamma, beta]);
            let y = g.conv2d(x, w, 1, 1)?;
            let y = g.batch_norm2d(y, gamma, beta, &mut self.blocks[l].stats, bn_train)?;
            let y = g.relu(y);
            let y = hook.apply(g, l, y)?;
            x = if POOL_AFTER[l] { g.max_pool2d(y, 2)? } else { y };
        }
        let x = g.flatten(x)?;
        let w1 = self.weight_leaf(g, &self.fc1_w)?;
        let b1 = g.param(&self.fc1_b);
        let h = g.linear(x, w1, b1)?;
        let h = g.relu(h);
        let w2 = self.weight_leaf(g, &self.fc2_w)?;
        let b2 = g.param(&self.fc2_b);
        let logits = g.linear(h, w2, b2)?;
        params.extend([w1, b1, w2, b2]);
        Ok(Forward { logits, params })
    }

    /// Moves gradients from a finished backward pass into the parameters.
    pub fn collect_grads(&mut self, g: &Graph, fwd: &Forward) {
        for (p, &v) in self.params_mut().into_iter().zip(&fwd.params) {
            if let Some(grad) = g.grad(v) {
                p.add_grad(grad);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Rounds conv and linear weights onto their `bits`-bit grids in place.
    pub fn snap_weights(&mut self, bits: u32) {
        let mut weights: Vec<&mut Param> = self.blocks.iter_mut().map(|b| &mut b.weight).collect();
        weights.extend([&mut self.fc1_w, &mut self.fc2_w]);
        for p in weights {
            if let Some((lo, hi)) = weight_range(&p.value) {
                for v in p.value.data_mut() {
                    *v = crate::quant::quantize_scalar(*v, lo, hi, bits);
                }
            }
        }
    }

    /// Logits for `input` in inference mode, in chunks of `chunk` images.
    pub fn logits(&mut self, input: &Tensor, chunk: usize, hook: &mut dyn ActivationHook) -> Result<Tensor> {
        let n = input.shape()[0];
        let per = input.len() / n.max(1);
        let mut out = Vec::with_capacity(n * self.classes);
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let mut shape = input.shape().to_vec();
            shape[0] = end - start;
            let part = Tensor::new(shape, input.data()[start * per..end * per].to_vec())?;
            let mut g = Graph::new();
            let fwd = self.forward(&mut g, &part, false, hook)?;
            out.extend_from_slice(g.value(fwd.logits).data());
            start = end;
        }
        Tensor::new(vec![n, self.classes], out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (l, b) in self.blocks.iter().enumerate() {
            ck.insert(format!("conv{l}.weight"), b.weight.value.clone());
            ck.insert(format!("bn{l}.gamma"), b.gamma.value.clone());
            ck.insert(format!("bn{l}.beta"), b.beta.value.clone());
            ck.insert(format!("bn{l}.running_mean"), Tensor::from_vec(b.stats.mean.clone()));
            ck.insert(format!("bn{l}.running_var"), Tensor::from_vec(b.stats.var.clone()));
        }
        ck.insert("fc1.weight", self.fc1_w.value.clone());
        ck.insert("fc1.bias", self.fc1_b.value.clone());
        ck.insert("fc2.weight", self.fc2_w.value.clone());
        ck.insert("fc2.bias", self.fc2_b.value.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let classes = ck.require("fc2.bias")?.len();
        let mut m = DeskCnn::new(classes, 0);
        let load = |p: &mut Param, name: &str| -> Result<()> {
            let t = ck.require(name)?;
            if t.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint load",
                    left: p.value.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            *p = Param::new(t.clone());
            Ok(())
        };
        for (l, b) in m.blocks.iter_mut().enumerate() {
            load(&mut b.weight, &format!("conv{l}.weight"))?;
            load(&mut b.gamma, &format!("bn{l}.gamma"))?;
            load(&mut b.beta, &format!("bn{l}.beta"))?;
            let c = b.stats.mean.len();
            for (dst, name) in [(&mut b.stats.mean, "running_mean"), (&mut b.stats.var, "running_var")] {
                let t = ck.require(&format!("bn{l}.{name}"))?;
                if t.len() != c {
                    return Err(Error::ShapeMismatch {
                        op: "checkpoint load",
                        left: vec![c],
                        right: t.shape().to_vec(),
                    });
                }
                *dst = t.data().to_vec();
            }
        }
        load(&mut m.fc1_w, "fc1.weight")?;
        load(&mut m.fc1_b, "fc1.bias")?;
        load(&mut m.fc2_w, "fc2.weight")?;
        load(&mut m.fc2_b, "fc2.bias")?;
        Ok(m)
    }
}

/// Mean cross-entropy of `logits (n, k)` against integer labels.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = match g.value(logits).shape() {
        &[n, k] if n == labels.len() => (n, k),
        s => {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: s.to_vec(),
                right: vec![labels.len()],
            })
        }
    };
    let mut onehot = vec![0.0; n * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
        }
        onehot[i * k + y] = 1.0;
    }
    let lp = g.log_softmax(logits)?;
    let picked = g.mul_const(lp, &Tensor::new(vec![n, k], onehot)?)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / n as f32))
}

/// Row-wise argmax of a `(n, k)` logit tensor.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits.data().chunks(k).map(crate::tensor::argmax).collect()
}

/// Percentage of positions where `a` and `b` agree.
pub fn agreement(a: &[usize], b: &[usize]) -> f64 {
    let hits = a.iter().zip(b).filter(|(x, y)| x == y).count();
    100.0 * hits as f64 / a.len().max(1) as f64
}
