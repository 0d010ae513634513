//! Greedy channel ranking by selection metric, and group partitioning.
//!
//! Every layer exposes its PCA spectrum. The selection metric of a layer is
//! the eigenvalue share of its least important surviving channel divided by
//! the storage one channel costs (one feature map). Repeatedly dropping the
//! trailing channel of the layer with the smallest metric yields a global
//! removal order: early removals are the least important channels.

use std::ops::Range;

use crate::error::{Error, Result};

/// `(sigma_{d'} / sum_{c <= d'} sigma_c) / spatial`, with `sigmas` sorted
/// descending. An all-zero spectrum makes removal free.
pub fn selection_metric(sigmas: &[f64], remaining: usize, spatial: usize) -> f64 {
    assert!(remaining >= 1 && remaining <= sigmas.len());
    let total: f64 = sigmas[..remaining].iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    (sigmas[remaining - 1] / total) / spatial as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSelection {
    /// Square roots of the layer's eigenvalues, descending.
    pub sigmas: Vec<f64>,
    /// `w * h` of the layer's feature map.
    pub spatial: usize,
    /// Surviving dimension `d'`.
    pub remaining: usize,
    pub metric: f64,
}

impl LayerSelection {
    pub fn from_eigenvalues(eigenvalues: &[f32], spatial: usize) -> Result<Self> {
        if eigenvalues.is_empty() || spatial == 0 {
            return Err(Error::invalid("a layer needs at least one channel and a nonempty feature map"));
        }
        let sigmas: Vec<f64> = eigenvalues.iter().map(|&v| (v.max(0.0) as f64).sqrt()).collect();
        let remaining = sigmas.len();
        let metric = selection_metric(&sigmas, remaining, spatial);
        Ok(LayerSelection {
            sigmas,
            spatial,
            remaining,
            metric,
        })
    }

    pub fn channels(&self) -> usize {
        self.sigmas.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Removal {
    pub layer: usize,
    /// Position in the layer's importance-sorted channel order.
    pub channel: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionState {
    pub layers: Vec<LayerSelection>,
    pub log: Vec<Removal>,
}

impl SelectionState {
    pub fn new(layers: Vec<LayerSelection>) -> Self {
        SelectionState {
            layers,
            log: Vec::new(),
        }
    }

    /// Channels that can still be removed while keeping one per layer.
    pub fn removable(&self) -> usize {
        self.layers.iter().map(|l| l.remaining - 1).sum()
    }

    pub fn total_channels(&self) -> usize {
        self.layers.iter().map(LayerSelection::channels).sum()
    }

    /// Layer with the smallest metric among those above the floor; ties go
    /// to the lowest layer index.
    fn argmin_layer(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, l) in self.layers.iter().enumerate() {
            if l.remaining <= 1 {
                continue;
            }
            if best.is_none_or(|b| l.metric < self.layers[b].metric) {
                best = Some(i);
            }
        }
        best
    }

    fn remove_one(&mut self) -> Option<Removal> {
        let layer = self.argmin_layer()?;
        let l = &mut self.layers[layer];
        l.remaining -= 1;
        let removal = Removal {
            layer,
            channel: l.remaining,
        };
        if l.remaining >= 1 {
            l.metric = selection_metric(&l.sigmas, l.remaining, l.spatial);
        }
        self.log.push(removal);
        Some(removal)
    }
}

/// Removes `budget` channels greedily, appending to the removal log.
pub fn greedy_rank(mut state: SelectionState, budget: usize) -> Result<SelectionState> {
    let removable = state.removable();
    if budget > removable {
        return Err(Error::BudgetExceeded { budget, removable });
    }
    for _ in 0..budget {
        state.remove_one();
    }
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerGroups {
    /// Maps sorted position to transformed channel index (identity for PCA
    /// output, which is already importance-sorted).
    pub permutation: Vec<u32>,
    /// Channel count of groups `1..=G`; group `G` is pruned.
    pub sizes: Vec<usize>,
}

impl LayerGroups {
    pub fn channels(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Contiguous sorted-position range of group `g` (0-based).
    pub fn range(&self, g: usize) -> Range<usize> {
        let start: usize = self.sizes[..g].iter().sum();
        start..start + self.sizes[g]
    }

    pub fn pruned(&self) -> usize {
        *self.sizes.last().expect("at least two groups")
    }

    pub fn kept(&self) -> usize {
        self.channels() - self.pruned()
    }

    /// Group index (0-based) of a sorted channel position.
    pub fn group_of(&self, channel: usize) -> usize {
        let mut end = 0;
        for (g, s) in self.sizes.iter().enumerate() {
            end += s;
            if channel < end {
                return g;
            }
        }
        panic!("channel {channel} outside a layer of {end}")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupPartition {
    pub groups: usize,
    pub layers: Vec<LayerGroups>,
}

impl GroupPartition {
    /// Everything in group 1, nothing pruned.
    pub fn unpruned(channels: &[usize], groups: usize) -> Self {
        GroupPartition {
            groups,
            layers: channels
                .iter()
                .map(|&d| {
                    let mut sizes = vec![0; groups];
                    sizes[0] = d;
                    LayerGroups {
                        permutation: (0..d as u32).collect(),
                        sizes,
                    }
                })
                .collect(),
        }
    }

    pub fn pruned_total(&self) -> usize {
        self.layers.iter().map(LayerGroups::pruned).sum()
    }
}

/// Logs every removable channel, returning the full priority order: the
/// removal log followed by each layer's floor channel.
pub fn priority_order(state: &SelectionState) -> (SelectionState, Vec<Removal>) {
    let full = greedy_rank(state.clone(), state.removable()).expect("budget equals removable");
    let mut order = full.log.clone();
    for (layer, l) in full.layers.iter().enumerate() {
        for channel in (0..l.remaining).rev() {
            order.push(Removal { layer, channel });
        }
    }
    (full, order)
}

/// Partition from explicit boundaries into the priority order:
/// group `G` takes positions `0..counts[0]`, group `G-1` takes
/// `counts[0]..counts[1]`, and so on, with group 1 holding the rest.
/// Boundaries are clamped to the removable prefix so every layer keeps a
/// channel in group 1.
pub fn partition_from_counts(state: &SelectionState, counts: &[usize]) -> Result<GroupPartition> {
    let groups = counts.len() + 1;
    if groups < 2 {
        return Err(Error::invalid("a partition needs G >= 2 (one pruned group)"));
    }
    if counts.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid(format!("partition boundaries must be ascending, got {counts:?}")));
    }
    let (full, order) = priority_order(state);
    let logged = full.log.len();
    let mut layers: Vec<LayerGroups> = state
        .layers
        .iter()
        .map(|l| LayerGroups {
            permutation: (0..l.channels() as u32).collect(),
            sizes: vec![0; groups],
        })
        .collect();
    for (pos, r) in order.iter().enumerate() {
        let mut group = 0;
        for (j, &k) in counts.iter().enumerate() {
            if pos < k.min(logged) {
                group = groups - 1 - j;
                break;
            }
        }
        layers[r.layer].sizes[group] += 1;
    }
    Ok(GroupPartition { groups, layers })
}

/// Partition from `G - 1` ascending fractions of the total channel count.
pub fn build_partition(state: &SelectionState, thresholds: &[f64]) -> Result<GroupPartition> {
    if thresholds.is_empty() {
        return Err(Error::invalid("a partition needs G >= 2 (one pruned group)"));
    }
    if thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) || thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid(format!(
            "thresholds must be ascending fractions in [0, 1], got {thresholds:?}"
        )));
    }
    let total = state.total_channels() as f64;
    let counts: Vec<usize> = thresholds.iter().map(|t| (t * total).round() as usize).collect();
    partition_from_counts(state, &counts)
}

/// Thresholds that give group `G` a share `pruned_fraction` of all channels
/// and split the rest evenly across groups `1..G-1`.
pub fn split_thresholds(groups: usize, pruned_fraction: f64) -> Vec<f64> {
    assert!(groups >= 2);
    let p = pruned_fraction.clamp(0.0, 1.0);
    (0..groups - 1)
        .map(|j| p + (1.0 - p) * j as f64 / (groups - 1) as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(eigs: &[f32], spatial: usize) -> LayerSelection {
        LayerSelection::from_eigenvalues(eigs, spatial).unwrap()
    }

    #[test]
    fn metric_examples() {
        assert!((selection_metric(&[3.0, 1.0], 2, 4) - 0.0625).abs() < 1e-15);
        assert_eq!(selection_metric(&[3.0, 0.0], 2, 4), 0.0);
        assert_eq!(selection_metric(&[5.0], 1, 1), 1.0);
        assert_eq!(selection_metric(&[0.0, 0.0], 2, 9), 0.0);
    }

    #[test]
    fn zero_budget_is_noop() {
        let s = SelectionState::new(vec![layer(&[4.0, 1.0], 4)]);
        let out = greedy_rank(s.clone(), 0).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn budget_beyond_floor_fails() {
        let s = SelectionState::new(vec![layer(&[4.0, 1.0], 4), layer(&[1.0], 1)]);
        assert!(matches!(
            greedy_rank(s, 2),
            Err(Error::BudgetExceeded { budget: 2, removable: 1 })
        ));
    }

    #[test]
    fn larger_feature_maps_go_first() {
        let eigs = [9.0, 4.0, 1.0, 0.25];
        let s = SelectionState::new(vec![layer(&eigs, 64), layer(&eigs, 16)]);
        // sigmas (3, 2, 1, 0.5): layer 0 metrics go 0.5/6.5/64, 1/6/64, 2/5/64;
        // the last exceeds layer 1's 0.5/6.5/16, so the third pick switches.
        let out = greedy_rank(s, 3).unwrap();
        assert_eq!(
            out.log,
            vec![
                Removal { layer: 0, channel: 3 },
                Removal { layer: 0, channel: 2 },
                Removal { layer: 1, channel: 3 },
            ]
        );
    }

    #[test]
    fn ties_break_to_lowest_layer() {
        let s = SelectionState::new(vec![layer(&[1.0, 1.0], 4), layer(&[1.0, 1.0], 4)]);
        let out = greedy_rank(s, 1).unwrap();
        assert_eq!(out.log[0].layer, 0);
    }

    #[test]
    fn partition_needs_two_groups() {
        let s = SelectionState::new(vec![layer(&[1.0, 0.5], 4)]);
        assert!(build_partition(&s, &[]).is_err());
        assert!(build_partition(&s, &[0.6, 0.2]).is_err());
    }

    #[test]
    fn split_thresholds_are_even() {
        assert_eq!(split_thresholds(2, 0.3), vec![0.3]);
        let t = split_thresholds(4, 0.25);
        assert!((t[1] - 0.5).abs() < 1e-12 && (t[2] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn group_lookup() {
        let lg = LayerGroups {
            permutation: (0..6).collect(),
            sizes: vec![3, 1, 2],
        };
        assert_eq!(lg.range(1), 3..4);
        assert_eq!(lg.group_of(0), 0);
        assert_eq!(lg.group_of(3), 1);
        assert_eq!(lg.group_of(5), 2);
        assert_eq!(lg.pruned(), 2);
    }
}
