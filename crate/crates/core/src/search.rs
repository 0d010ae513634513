//! Dynamic bit-width search.
//!
//! Each three-branch module watches its architecture parameters. When
//! `beta_1 > beta_2 > beta_3` holds for `patience` observations the branch
//! set slides down one bit, `(b1, b2, b3) <- (b1 - 1, b1, b2)`, and the
//! parameters are reshaped to a bell, `(beta_1, beta_2, beta_3) <-
//! (beta_2, beta_1, beta_2)`. Once the lowest branch reaches `b_min` the
//! module is frozen.

use std::fmt;

use crate::error::{Error, Result};
use crate::quant::MPModuleState;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PatienceMode {
    /// Count qualifying observations in a row; any break resets the count.
    #[default]
    Consecutive,
    /// Count qualifying observations since the last shift.
    Cumulative,
}

impl std::str::FromStr for PatienceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "consecutive" => Ok(PatienceMode::Consecutive),
            "cumulative" => Ok(PatienceMode::Cumulative),
            other => Err(Error::Config(format!("unknown patience mode {other:?}"))),
        }
    }
}

impl fmt::Display for PatienceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatienceMode::Consecutive => "consecutive",
            PatienceMode::Cumulative => "cumulative",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditEntry {
    pub step: usize,
    pub layer: usize,
    pub group: usize,
    pub old_bits: Vec<u32>,
    pub new_bits: Vec<u32>,
}

impl AuditEntry {
    pub fn is_noop(&self) -> bool {
        self.old_bits == self.new_bits
    }
}

impl fmt::Display for AuditEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |b: &[u32]| b.iter().map(u32::to_string).collect::<Vec<_>>().join("-");
        write!(
            f,
            "{},{},{},{},{}",
            self.step,
            self.layer,
            self.group + 1,
            join(&self.old_bits),
            join(&self.new_bits)
        )
    }
}

/// Append-only record of shift attempts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditLog {
    pub entries: Vec<AuditEntry>,
}

impl AuditLog {
    pub fn shifts(&self) -> impl Iterator<Item = &AuditEntry> {
        self.entries.iter().filter(|e| !e.is_noop())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchState {
    pub counter: u32,
    pub limit: u32,
    pub b_min: u32,
    pub frozen: bool,
    pub mode: PatienceMode,
}

impl SearchState {
    pub fn new(mp: &MPModuleState, patience: u32, b_min: u32, mode: PatienceMode) -> Result<Self> {
        if mp.branches() != 3 {
            return Err(Error::invalid(format!(
                "dynamic search needs exactly 3 branches, got {}",
                mp.branches()
            )));
        }
        if patience == 0 || b_min == 0 {
            return Err(Error::invalid("patience and b_min must be positive"));
        }
        Ok(SearchState {
            counter: 0,
            limit: patience,
            b_min,
            frozen: mp.bits[0] <= b_min,
            mode,
        })
    }

    /// Records one observation of the module's parameters and shifts when
    /// patience runs out. Returns whether a shift happened.
    pub fn observe(&mut self, mp: &mut MPModuleState, step: usize, audit: &mut AuditLog) -> bool {
        if self.frozen {
            self.counter = 0;
            return false;
        }
        let b = mp.beta();
        if b[0] > b[1] && b[1] > b[2] {
            self.counter += 1;
        } else if self.mode == PatienceMode::Consecutive {
            self.counter = 0;
        }
        if self.counter >= self.limit {
            self.counter = 0;
            return shift_down(self, mp, step, audit);
        }
        false
    }
}

/// Slides the branch set down one bit and reshapes the parameters.
/// A frozen module is left unchanged and the attempt is logged.
pub fn shift_down(
    state: &mut SearchState,
    mp: &mut MPModuleState,
    step: usize,
    audit: &mut AuditLog,
) -> bool {
    let old_bits = mp.bits.clone();
    if state.frozen {
        audit.entries.push(AuditEntry {
            step,
            layer: mp.layer,
            group: mp.group,
            new_bits: old_bits.clone(),
            old_bits,
        });
        return false;
    }
    let (b1, b2) = (mp.bits[0], mp.bits[1]);
    mp.bits = vec![b1 - 1, b1, b2];
    let beta = mp.arch.value.data_mut();
    let (be1, be2) = (beta[0], beta[1]);
    beta.copy_from_slice(&[be2, be1, be2]);
    mp.arch.reset_velocity();
    if mp.bits[0] <= state.b_min {
        state.frozen = true;
    }
    audit.entries.push(AuditEntry {
        step,
        layer: mp.layer,
        group: mp.group,
        old_bits,
        new_bits: mp.bits.clone(),
    });
    true
}
