//! Run configuration as flat `key = value` text.
//!
//! Every field must be present; `#` starts a comment. [`RunConfig::to_text`]
//! emits the canonical form, which parses back to an identical value.

use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::search::PatienceMode;

/// How the partition boundaries are chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum Thresholds {
    /// Group `G` sized by the pruning probe, the rest split evenly.
    Auto,
    /// `G - 1` ascending fractions of the total channel count.
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_seed: u64,
    pub train_size: usize,
    pub eval_size: usize,
    pub baseline_epochs: usize,
    pub baseline_lr: f32,
    pub weight_bits: u32,
    pub groups: usize,
    pub branches: usize,
    pub init_bits: Vec<u32>,
    pub penalty: f32,
    pub patience: u32,
    pub patience_mode: PatienceMode,
    pub lr: f32,
    pub arch_lr: f32,
    /// Final softmax temperature of the mixing weights. Held at 1 for the
    /// first half of fine-tuning, then annealed geometrically.
    pub tau_end: f32,
    pub momentum: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub finetune_size: usize,
    pub pca_samples: usize,
    pub refit_every: usize,
    pub thresholds: Thresholds,
    pub dr_budget: f32,
    pub probe_size: usize,
    pub b_min: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            data_seed: 2024,
            train_size: 6000,
            eval_size: 2000,
            baseline_epochs: 8,
            baseline_lr: 0.02,
            weight_bits: 8,
            groups: 3,
            branches: 3,
            init_bits: vec![6, 7, 8],
            penalty: 0.1,
            patience: 3,
            patience_mode: PatienceMode::Consecutive,
            lr: 3e-3,
            arch_lr: 20.0,
            tau_end: 0.05,
            momentum: 0.9,
            epochs: 12,
            batch_size: 64,
            finetune_size: 2000,
            pca_samples: 512,
            refit_every: 1,
            thresholds: Thresholds::Auto,
            dr_budget: 3.0,
            probe_size: 512,
            b_min: 2,
        }
    }
}

const KEYS: [&str; 26] = [
    "seed",
    "data_seed",
    "train_size",
    "eval_size",
    "baseline_epochs",
    "baseline_lr",
    "weight_bits",
    "groups",
    "branches",
    "init_bits",
    "penalty",
    "patience",
    "patience_mode",
    "lr",
    "arch_lr",
    "tau_end",
    "momentum",
    "epochs",
    "batch_size",
    "finetune_size",
    "pca_samples",
    "refit_every",
    "thresholds",
    "dr_budget",
    "probe_size",
    "b_min",
];

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse list item {s:?}")))
        })
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    fn field(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "train_size" => self.train_size.to_string(),
            "eval_size" => self.eval_size.to_string(),
            "baseline_epochs" => self.baseline_epochs.to_string(),
            "baseline_lr" => self.baseline_lr.to_string(),
            "weight_bits" => self.weight_bits.to_string(),
            "groups" => self.groups.to_string(),
            "branches" => self.branches.to_string(),
            "init_bits" => join(&self.init_bits),
            "penalty" => self.penalty.to_string(),
            "patience" => self.patience.to_string(),
            "patience_mode" => self.patience_mode.to_string(),
            "lr" => self.lr.to_string(),
            "arch_lr" => self.arch_lr.to_string(),
            "tau_end" => self.tau_end.to_string(),
            "momentum" => self.momentum.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "finetune_size" => self.finetune_size.to_string(),
            "pca_samples" => self.pca_samples.to_string(),
            "refit_every" => self.refit_every.to_string(),
            "thresholds" => match &self.thresholds {
                Thresholds::Auto => "auto".into(),
                Thresholds::Fixed(t) => join(t),
            },
            "dr_budget" => self.dr_budget.to_string(),
            "probe_size" => self.probe_size.to_string(),
            "b_min" => self.b_min.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        let v = value.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "data_seed" => self.data_seed = num(key, v)?,
            "train_size" => self.train_size = num(key, v)?,
            "eval_size" => self.eval_size = num(key, v)?,
            "baseline_epochs" => self.baseline_epochs = num(key, v)?,
            "baseline_lr" => self.baseline_lr = num(key, v)?,
            "weight_bits" => self.weight_bits = num(key, v)?,
            "groups" => self.groups = num(key, v)?,
            "branches" => self.branches = num(key, v)?,
            "init_bits" => self.init_bits = parse_list(key, v)?,
            "penalty" => self.penalty = num(key, v)?,
            "patience" => self.patience = num(key, v)?,
            "patience_mode" => self.patience_mode = v.parse()?,
            "lr" => self.lr = num(key, v)?,
            "arch_lr" => self.arch_lr = num(key, v)?,
            "tau_end" => self.tau_end = num(key, v)?,
            "momentum" => self.momentum = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "finetune_size" => self.finetune_size = num(key, v)?,
            "pca_samples" => self.pca_samples = num(key, v)?,
            "refit_every" => self.refit_every = num(key, v)?,
            "thresholds" => {
                self.thresholds = if v == "auto" {
                    Thresholds::Auto
                } else {
                    Thresholds::Fixed(parse_list(key, v)?)
                }
            }
            "dr_budget" => self.dr_budget = num(key, v)?,
            "probe_size" => self.probe_size = num(key, v)?,
            "b_min" => self.b_min = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown field {key:?}"))),
        }
        Ok(())
    }

    /// Parses a complete config; unknown, repeated and missing fields are
    /// errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = vec![false; KEYS.len()];
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            let slot = KEYS
                .iter()
                .position(|k| *k == key)
                .ok_or_else(|| Error::Config(format!("line {}: unknown field {key:?}", n + 1)))?;
            if std::mem::replace(&mut seen[slot], true) {
                return Err(Error::Config(format!("line {}: field {key:?} given twice", n + 1)));
            }
            cfg.set(key, value)?;
        }
        let missing: Vec<&str> = KEYS.iter().zip(&seen).filter(|(_, s)| !**s).map(|(k, _)| *k).collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!("missing field(s): {}", missing.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            writeln!(out, "{key} = {}", self.field(key)).unwrap();
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.groups < 2 {
            return fail(format!("groups must be >= 2, got {}", self.groups));
        }
        if self.branches != 3 {
            return fail(format!("the bit-set shift is defined for 3 branches, got {}", self.branches));
        }
        if self.init_bits.len() != self.branches {
            return fail(format!("init_bits has {} entries for {} branches", self.init_bits.len(), self.branches));
        }
        if self.init_bits.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("init_bits must be strictly ascending, got {:?}", self.init_bits));
        }
        if self.b_min < 1 || self.b_min > self.init_bits[0] {
            return fail(format!("b_min must lie in 1..={}, got {}", self.init_bits[0], self.b_min));
        }
        if *self.init_bits.last().unwrap() > 8 {
            return fail(format!("init_bits may not exceed 8, got {:?}", self.init_bits));
        }
        if !(1..=16).contains(&self.weight_bits) {
            return fail(format!("weight_bits must lie in 1..=16, got {}", self.weight_bits));
        }
        if !(self.penalty > 0.0) {
            return fail(format!("penalty must be > 0, got {}", self.penalty));
        }
        for (name, v) in [("lr", self.lr), ("arch_lr", self.arch_lr), ("baseline_lr", self.baseline_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a positive number, got {v}"));
            }
        }
        if !(self.tau_end > 0.0 && self.tau_end <= 1.0) {
            return fail(format!("tau_end must lie in (0, 1], got {}", self.tau_end));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.patience == 0 {
            return fail("patience must be >= 1".into());
        }
        if self.batch_size == 0 || self.refit_every == 0 {
            return fail("batch_size and refit_every must be >= 1".into());
        }
        if self.train_size == 0 || self.eval_size == 0 || self.finetune_size == 0 {
            return fail("train_size, eval_size and finetune_size must be >= 1".into());
        }
        if self.pca_samples == 0 || self.probe_size == 0 {
            return fail("pca_samples and probe_size must be >= 1".into());
        }
        if !(self.dr_budget >= 0.0) {
            return fail(format!("dr_budget must be >= 0, got {}", self.dr_budget));
        }
        if let Thresholds::Fixed(t) = &self.thresholds {
            if t.len() != self.groups - 1 {
                return fail(format!("thresholds needs {} fractions, got {}", self.groups - 1, t.len()));
            }
            if t.iter().any(|v| !(0.0..=1.0).contains(v)) || t.windows(2).any(|w| w[0] > w[1]) {
                return fail(format!("thresholds must be ascending fractions in [0, 1], got {t:?}"));
            }
        }
        Ok(())
    }
}
