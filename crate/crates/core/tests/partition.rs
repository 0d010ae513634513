mod common;

use actcomp::partition::{
    build_partition, greedy_rank, selection_metric, LayerSelection, Removal, SelectionState,
};
use common::oracles::{oracle_sequence, random_instance};
use proptest::prelude::*;

fn state(eigs: &[Vec<f32>], spatial: &[usize]) -> SelectionState {
    SelectionState::new(
        eigs.iter()
            .zip(spatial)
            .map(|(e, &s)| LayerSelection::from_eigenvalues(e, s).unwrap())
            .collect(),
    )
}

fn pairs(log: &[Removal]) -> Vec<(usize, usize)> {
    log.iter().map(|r| (r.layer, r.channel)).collect()
}

#[test]
fn matches_from_scratch_oracle() {
    for seed in 0..50 {
        let (eigs, spatial) = random_instance(seed, 5, 6);
        let s = state(&eigs, &spatial);
        let budget = s.removable();
        let out = greedy_rank(s, budget).unwrap();
        assert_eq!(pairs(&out.log), oracle_sequence(&eigs, &spatial, budget), "seed {seed}");
    }
}

#[test]
fn three_layers_budget_five() {
    let eigs = vec![vec![4.0, 2.0, 1.0, 0.5], vec![9.0, 1.0, 1.0], vec![1.0, 0.9, 0.1, 0.0]];
    let spatial = vec![16, 4, 1];
    let out = greedy_rank(state(&eigs, &spatial), 5).unwrap();
    assert_eq!(pairs(&out.log), oracle_sequence(&eigs, &spatial, 5));
}

#[test]
fn identical_spectra_prefer_larger_maps_until_metric_crosses() {
    let eigs = vec![vec![16.0, 9.0, 4.0, 1.0]; 2];
    let spatial = vec![64, 16];
    let out = greedy_rank(state(&eigs, &spatial), 6).unwrap();
    let seq = pairs(&out.log);
    assert_eq!(seq, oracle_sequence(&eigs, &spatial, 6));
    let first_b = seq.iter().position(|&(l, _)| l == 1).unwrap();
    assert!(first_b >= 1 && seq[..first_b].iter().all(|&(l, _)| l == 0));
    // at the switch, layer A's metric must exceed layer B's
    let sig: Vec<f64> = eigs[0].iter().map(|&v| (v as f64).sqrt()).collect();
    let a_left = 4 - first_b;
    assert!(selection_metric(&sig, a_left, 64) > selection_metric(&sig, 4, 16));
}

#[test]
fn no_pruning_limit() {
    let eigs = vec![vec![4.0, 1.0, 0.5], vec![2.0, 1.0]];
    let p = build_partition(&state(&eigs, &[4, 4]), &[0.0]).unwrap();
    assert_eq!(p.layers[0].sizes, vec![3, 0]);
    assert_eq!(p.layers[1].sizes, vec![2, 0]);
}

#[test]
fn maximal_pruning_keeps_one_channel_per_layer() {
    let eigs = vec![vec![4.0, 1.0, 0.5], vec![2.0, 1.0], vec![3.0]];
    let p = build_partition(&state(&eigs, &[4, 4, 1]), &[1.0]).unwrap();
    for l in &p.layers {
        assert_eq!(l.sizes[0], 1);
    }
    assert_eq!(p.pruned_total(), 3);
}

#[test]
fn two_layers_three_groups_hand_walk() {
    // Layer 0 has the larger map (16 vs 4). Hand walk of the greedy order:
    //   sigmas 0: (2, 1.5, 1, 0.5), sigmas 1: (2, 1.5, 1, 0.5)
    //   step 1: S0 = 0.5/5/16 = .00625, S1 = 0.5/5/4 = .025 -> (0, 3)
    //   step 2: S0 = 1/4.5/16 = .0139                      -> (0, 2)
    //   step 3: S0 = 1.5/3.5/16 = .0268 > S1              -> (1, 3)
    //   step 4: S1 = 1/4.5/4 = .0556 > S0                 -> (0, 1)
    //   step 5: only layer 1 above floor                  -> (1, 2)
    //   step 6:                                           -> (1, 1)
    // then the floor channels (0, 0), (1, 0).
    let eigs = vec![vec![4.0, 2.25, 1.0, 0.25]; 2];
    let st = state(&eigs, &[16, 4]);
    let full = greedy_rank(st.clone(), 6).unwrap();
    assert_eq!(pairs(&full.log), vec![(0, 3), (0, 2), (1, 3), (0, 1), (1, 2), (1, 1)]);
    // 8 entries; thresholds (0.25, 0.5) -> group 3 = first 2, group 2 = next 2
    let p = build_partition(&st, &[0.25, 0.5]).unwrap();
    let totals: Vec<usize> = (0..3).map(|g| p.layers.iter().map(|l| l.sizes[g]).sum()).collect();
    assert_eq!(totals, vec![4, 2, 2]);
    assert_eq!(p.layers[0].sizes, vec![1, 1, 2]);
    assert_eq!(p.layers[1].sizes, vec![3, 1, 0]);
}

#[test]
fn partition_is_reproducible() {
    let (eigs, spatial) = random_instance(99, 5, 6);
    let a = build_partition(&state(&eigs, &spatial), &[0.3, 0.6]).unwrap();
    let b = build_partition(&state(&eigs, &spatial), &[0.3, 0.6]).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn group_sizes_conserve_channels(seed in 0u64..10_000, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let (eigs, spatial) = random_instance(seed, 5, 6);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let p = build_partition(&state(&eigs, &spatial), &[lo, hi]).unwrap();
        for (l, e) in p.layers.iter().zip(&eigs) {
            prop_assert_eq!(l.channels(), e.len());
            prop_assert!(l.sizes[0] >= 1);
        }
    }

    #[test]
    fn raising_prune_threshold_only_demotes(seed in 0u64..10_000, a in 0.0f64..1.0, b in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let (eigs, spatial) = random_instance(seed, 5, 6);
        let st = state(&eigs, &spatial);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let t2 = t2.max(hi);
        let before = build_partition(&st, &[lo, t2]).unwrap();
        let after = build_partition(&st, &[hi, t2]).unwrap();
        for (x, y) in before.layers.iter().zip(&after.layers) {
            for c in 0..x.channels() {
                prop_assert!(y.group_of(c) >= x.group_of(c));
            }
        }
    }
}
