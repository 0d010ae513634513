use super::compress::compress;
use crate::config::RunConfig;
use crate::data::DatasetSplit;
use crate::error::Result;
use crate::model::DeskCnn;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepCell {
    pub penalty: f32,
    pub groups: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub penalty: f32,
    pub groups: usize,
    pub avg_bits: f64,
    /// Hard-mode accuracy in percent.
    pub accuracy: f64,
}

/// Every `(p, G)` pair of the two axes, `p` varying fastest.
pub fn grid(penalties: &[f32], groups: &[usize]) -> Vec<SweepCell> {
    groups
        .iter()
        .flat_map(|&g| penalties.iter().map(move |&p| SweepCell { penalty: p, groups: g }))
        .collect()
}

/// Runs one compression per cell from the same baseline.
pub fn sweep(
    cfg: &RunConfig,
    baseline: &DeskCnn,
    train: &DatasetSplit,
    eval: &DatasetSplit,
    cells: &[SweepCell],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut c = cfg.clone();
        c.penalty = cell.penalty;
        c.groups = cell.groups;
        let out = compress(&c, baseline, train, eval)?;
        rows.push(SweepRow {
            penalty: cell.penalty,
            groups: cell.groups,
            avg_bits: out.policy.avg_bits,
            accuracy: out.hard_accuracy,
        });
    }
    Ok(rows)
}

/// Rows not dominated by a row with fewer or equal bits and higher or
/// equal accuracy, ordered by bits. Accuracy strictly increases along the
/// result.
pub fn frontier(rows: &[SweepRow]) -> Vec<SweepRow> {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| {
        a.avg_bits
            .total_cmp(&b.avg_bits)
            .then(b.accuracy.total_cmp(&a.accuracy))
    });
    let mut out: Vec<SweepRow> = Vec::new();
    for r in sorted {
        if out.last().is_none_or(|l| r.accuracy > l.accuracy) {
            out.push(r);
        }
    }
    out
}
