//! The frozen compression policy and its binary and JSON forms.
//!
//! Binary layout, all little-endian: the magic `ACPL`, a `u32` version,
//! the `u64` seed, a `u32`-length-prefixed config hash, `u32` group count
//! `G`, `u32` floor `b_min`, `u32` layer count and the `f64` average bits
//! per value. Each layer then stores `u32` channels `d`, `u32` spatial size
//! `h * w`, `u64` PCA sample count, the `d x d` basis, `d` eigenvalues and
//! `d` means as `f32`, `d` `u32` permutation entries, `G` `u32` group sizes,
//! and for each of the `G - 1` kept groups a `u32` bit-width and the
//! calibration bounds as raw `f32` bit patterns.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ActivationHook;
use crate::partition::LayerGroups;
use crate::tensor::{Graph, Tensor, Var};
use crate::transform::TransformCache;

pub const POLICY_MAGIC: &[u8; 4] = b"ACPL";
pub const POLICY_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPolicy {
    pub transform: TransformCache,
    pub groups: LayerGroups,
    /// Spatial size `h * w` of the feature map.
    pub spatial: usize,
    /// One bit-width per kept group (`G - 1` entries).
    pub bits: Vec<u32>,
    /// Calibration bounds per kept group.
    pub ranges: Vec<(f32, f32)>,
}

impl LayerPolicy {
    pub fn channels(&self) -> usize {
        self.groups.channels()
    }

    /// Rows of `U^T` for the kept channels, in group order.
    pub fn forward_matrix(&self) -> Tensor {
        kept_rows(&self.transform, &self.groups)
    }

    /// Columns of `U` for the kept channels, in group order.
    pub fn inverse_matrix(&self) -> Tensor {
        kept_columns(&self.transform, &self.groups)
    }
}

/// `(kept, d)` matrix whose row `r` is eigenvector `permutation[r]`.
pub(crate) fn kept_rows(t: &TransformCache, groups: &LayerGroups) -> Tensor {
    let d = t.channels();
    let kept = groups.kept();
    let b = t.basis.data();
    Tensor::from_fn(&[kept, d], |k| {
        let (r, i) = (k / d, k % d);
        b[i * d + groups.permutation[r] as usize]
    })
}

/// `(d, kept)` matrix whose column `r` is eigenvector `permutation[r]`.
pub(crate) fn kept_columns(t: &TransformCache, groups: &LayerGroups) -> Tensor {
    let d = t.channels();
    let kept = groups.kept();
    let b = t.basis.data();
    Tensor::from_fn(&[d, kept], |k| {
        let (i, r) = (k / kept, k % kept);
        b[i * d + groups.permutation[r] as usize]
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressionPolicy {
    pub seed: u64,
    pub config_hash: String,
    pub groups: usize,
    pub b_min: u32,
    pub layers: Vec<LayerPolicy>,
    pub avg_bits: f64,
}

/// `sum b * d_g * hw / sum d * hw` with pruned channels at zero bits.
pub fn average_bits(layers: &[LayerPolicy]) -> f64 {
    let (mut bits, mut values) = (0.0f64, 0.0f64);
    for l in layers {
        for (g, &b) in l.bits.iter().enumerate() {
            bits += b as f64 * (l.groups.sizes[g] * l.spatial) as f64;
        }
        values += (l.channels() * l.spatial) as f64;
    }
    if values == 0.0 {
        0.0
    } else {
        bits / values
    }
}

impl CompressionPolicy {
    pub fn new(seed: u64, config_hash: String, groups: usize, b_min: u32, layers: Vec<LayerPolicy>) -> Result<Self> {
        let avg_bits = average_bits(&layers);
        let p = CompressionPolicy {
            seed,
            config_hash,
            groups,
            b_min,
            layers,
            avg_bits,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (l, layer) in self.layers.iter().enumerate() {
            let d = layer.transform.channels();
            let ctx = |e: Error, g: usize| e.in_group(l, g);
            if layer.groups.sizes.len() != self.groups || layer.groups.channels() != d {
                return Err(ctx(
                    Error::invalid(format!(
                        "group sizes {:?} do not split {d} channels into {} groups",
                        layer.groups.sizes, self.groups
                    )),
                    0,
                ));
            }
            let mut seen = vec![false; d];
            for &c in &layer.groups.permutation {
                let c = c as usize;
                if c >= d || std::mem::replace(&mut seen[c], true) {
                    return Err(ctx(Error::invalid("channel permutation is not a permutation"), 0));
                }
            }
            if layer.bits.len() != self.groups - 1 || layer.ranges.len() != self.groups - 1 {
                return Err(ctx(Error::invalid("need one bit-width and range per kept group"), 0));
            }
            for (g, (&b, &(lo, hi))) in layer.bits.iter().zip(&layer.ranges).enumerate() {
                if b < self.b_min || b > 8 {
                    return Err(ctx(
                        Error::invalid(format!("bit-width {b} outside [{}, 8]", self.b_min)),
                        g + 1,
                    ));
                }
                if !(lo < hi) {
                    return Err(ctx(Error::invalid(format!("empty calibration range [{lo}, {hi}]")), g + 1));
                }
            }
        }
        let recomputed = average_bits(&self.layers);
        if (recomputed - self.avg_bits).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "stored average bits {} differ from recomputed {recomputed}",
                self.avg_bits
            )));
        }
        Ok(())
    }

    pub fn pruned_channels(&self) -> usize {
        self.layers.iter().map(|l| l.groups.pruned()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut o = Vec::new();
        let u32s = |o: &mut Vec<u8>, v: u32| o.extend_from_slice(&v.to_le_bytes());
        let f32s = |o: &mut Vec<u8>, v: f32| o.extend_from_slice(&v.to_bits().to_le_bytes());
        o.extend_from_slice(POLICY_MAGIC);
        u32s(&mut o, POLICY_VERSION);
        o.extend_from_slice(&self.seed.to_le_bytes());
        u32s(&mut o, self.config_hash.len() as u32);
        o.extend_from_slice(self.config_hash.as_bytes());
        u32s(&mut o, self.groups as u32);
        u32s(&mut o, self.b_min);
        u32s(&mut o, self.layers.len() as u32);
        o.extend_from_slice(&self.avg_bits.to_le_bytes());
        for l in &self.layers {
            let t = &l.transform;
            u32s(&mut o, t.channels() as u32);
            u32s(&mut o, l.spatial as u32);
            o.extend_from_slice(&(t.sample_count as u64).to_le_bytes());
            for &v in t.basis.data().iter().chain(&t.eigenvalues).chain(&t.mean) {
                f32s(&mut o, v);
            }
            for &p in &l.groups.permutation {
                u32s(&mut o, p);
            }
            for &s in &l.groups.sizes {
                u32s(&mut o, s as u32);
            }
            for (&b, &(lo, hi)) in l.bits.iter().zip(&l.ranges) {
                u32s(&mut o, b);
                f32s(&mut o, lo);
                f32s(&mut o, hi);
            }
        }
        o
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != POLICY_MAGIC {
            return Err(Error::BadMagic {
                what: "policy",
                expected: POLICY_MAGIC.to_vec(),
                found: bytes[..bytes.len().min(4)].to_vec(),
            });
        }
        let mut r = Cursor { b: bytes, pos: 4 };
        let version = r.u32()?;
        if version != POLICY_VERSION {
            return Err(Error::UnsupportedVersion { what: "policy", version });
        }
        let seed = r.u64()?;
        let hash_len = r.u32()? as usize;
        let config_hash = String::from_utf8(r.take(hash_len)?.to_vec())
            .map_err(|_| Error::invalid("policy config hash is not UTF-8"))?;
        let groups = r.u32()? as usize;
        let b_min = r.u32()?;
        let n_layers = r.u32()? as usize;
        let avg_bits = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        if groups < 2 {
            return Err(Error::invalid(format!("policy group count {groups} < 2")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for layer in 0..n_layers {
            let d = r.u32()? as usize;
            let spatial = r.u32()? as usize;
            let sample_count = r.u64()? as usize;
            let basis = r.f32s(d * d)?;
            let eigenvalues = r.f32s(d)?;
            let mean = r.f32s(d)?;
            let permutation = (0..d).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let sizes = (0..groups).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let mut bits = Vec::with_capacity(groups - 1);
            let mut ranges = Vec::with_capacity(groups - 1);
            for _ in 0..groups - 1 {
                bits.push(r.u32()?);
                let lo = f32::from_bits(r.u32()?);
                let hi = f32::from_bits(r.u32()?);
                ranges.push((lo, hi));
            }
            layers.push(LayerPolicy {
                transform: TransformCache {
                    layer,
                    basis: Tensor::new(vec![d, d], basis)?,
                    eigenvalues,
                    mean,
                    sample_count,
                },
                groups: LayerGroups { permutation, sizes },
                spatial,
                bits,
                ranges,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::invalid(format!("{} trailing bytes after policy", bytes.len() - r.pos)));
        }
        let p = CompressionPolicy {
            seed,
            config_hash,
            groups,
            b_min,
            layers,
            avg_bits,
        };
        p.validate()?;
        Ok(p)
    }

    /// Human-readable summary: per layer and group, channel counts and
    /// bit-widths.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Group {
            group: usize,
            channels: usize,
            bits: Option<u32>,
            range: Option<[f32; 2]>,
        }
        #[derive(Serialize)]
        struct Layer {
            layer: usize,
            channels: usize,
            spatial: usize,
            pruned: usize,
            groups: Vec<Group>,
        }
        #[derive(Serialize)]
        struct Summary<'a> {
            seed: u64,
            config_hash: &'a str,
            groups: usize,
            b_min: u32,
            avg_bits_per_value: f64,
            pruned_channels: usize,
            layers: Vec<Layer>,
        }
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| Layer {
                layer: i,
                channels: l.channels(),
                spatial: l.spatial,
                pruned: l.groups.pruned(),
                groups: (0..self.groups)
                    .map(|g| Group {
                        group: g + 1,
                        channels: l.groups.sizes[g],
                        bits: l.bits.get(g).copied(),
                        range: l.ranges.get(g).map(|&(lo, hi)| [lo, hi]),
                    })
                    .collect(),
            })
            .collect();
        Ok(serde_json::to_string_pretty(&Summary {
            seed: self.seed,
            config_hash: &self.config_hash,
            groups: self.groups,
            b_min: self.b_min,
            avg_bits_per_value: self.avg_bits,
            pruned_channels: self.pruned_channels(),
            layers,
        })?)
    }
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.b.len() - self.pos;
        if available < n {
            return Err(Error::Truncated {
                what: "policy",
                needed: n,
                available,
            });
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        (0..n).map(|_| self.u32().map(f32::from_bits)).collect()
    }
}

/// Hard-mode activation path of a frozen policy: transform, keep the
/// non-pruned channels, quantize each group at its bit-width, invert.
pub struct PolicyHook<'a> {
    layers: Vec<(&'a LayerPolicy, Tensor, Tensor)>,
}

impl<'a> PolicyHook<'a> {
    pub fn new(policy: &'a CompressionPolicy) -> Self {
        PolicyHook {
            layers: policy
                .layers
                .iter()
                .map(|l| (l, l.forward_matrix(), l.inverse_matrix()))
                .collect(),
        }
    }
}

impl ActivationHook for PolicyHook<'_> {
    fn apply(&mut self, g: &mut Graph, layer: usize, x: Var) -> Result<Var> {
        let (lp, fwd, inv) = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("policy has no layer {layer}")))?;
        let c = g.value(x).dims4()?.1;
        if c != lp.channels() {
            return Err(Error::ShapeMismatch {
                op: "policy layer",
                left: g.value(x).shape().to_vec(),
                right: vec![lp.channels()],
            });
        }
        let a = g.channel_affine(x, fwd, Some(&lp.transform.mean), None)?;
        let mut parts = Vec::new();
        for (grp, (&bits, &(lo, hi))) in lp.bits.iter().zip(&lp.ranges).enumerate() {
            let r = lp.groups.range(grp);
            if r.is_empty() {
                continue;
            }
            let s = g.narrow_channels(a, r.start, r.len())?;
            parts.push(g.quantize(s, lo, hi, bits).map_err(|e| e.in_group(layer, grp + 1))?);
        }
        let q = g.concat_channels(&parts)?;
        g.channel_affine(q, inv, None, Some(&lp.transform.mean))
    }
}
