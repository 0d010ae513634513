mod common;

use actcomp::losses::{hard_bit_count, kd_loss, memory_loss, total_loss, LossConfig};
use actcomp::partition::{GroupPartition, LayerGroups};
use actcomp::quant::MPModuleState;
use actcomp::tensor::Graph;
use common::{gradcheck, rng, uniform};
use rand::Rng;

fn partition(sizes: &[Vec<usize>]) -> GroupPartition {
    GroupPartition {
        groups: sizes[0].len(),
        layers: sizes
            .iter()
            .map(|s| LayerGroups {
                permutation: (0..s.iter().sum::<usize>() as u32).collect(),
                sizes: s.clone(),
            })
            .collect(),
    }
}

fn module(layer: usize, group: usize, bits: &[u32], beta: &[f32]) -> MPModuleState {
    MPModuleState::new(layer, group, bits).unwrap().with_arch(beta).unwrap()
}

fn eval(mods: &[MPModuleState], part: &GroupPartition, spatial: &[usize], cfg: &LossConfig) -> (f64, Vec<Vec<f32>>) {
    let mut g = Graph::new();
    let vars: Vec<_> = mods.iter().map(|m| g.param(&m.arch)).collect();
    let pairs: Vec<_> = mods.iter().zip(&vars).map(|(m, &v)| (m, v)).collect();
    let l = memory_loss(&mut g, &pairs, part, spatial, cfg).unwrap();
    let value = g.value(l).item() as f64;
    g.backward(l).unwrap();
    (value, vars.iter().map(|v| g.grad(*v).unwrap().data().to_vec()).collect())
}

/// Direct f64 evaluation of the penalty formula.
fn oracle(mods: &[MPModuleState], part: &GroupPartition, spatial: &[usize], p: f64, z: f64) -> f64 {
    mods.iter()
        .map(|m| {
            let beta: Vec<f64> = m.beta().iter().map(|&b| b as f64).collect();
            let mx = beta.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = beta.iter().map(|b| (b - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            let exp_bits: f64 = e.iter().zip(&m.bits).map(|(w, &b)| w / s * b as f64).sum();
            exp_bits * (part.layers[m.layer].sizes[m.group] * spatial[m.layer]) as f64
        })
        .sum::<f64>()
        * p
        / z
}

#[test]
fn hand_value_214_4() {
    let m = module(0, 0, &[6, 7, 8], &[0.5f32.ln(), 0.3f32.ln(), 0.2f32.ln()]);
    let part = partition(&[vec![2, 0]]);
    let cfg = LossConfig::new(1.0, 1.0).unwrap();
    let (v, _) = eval(&[m], &part, &[16], &cfg);
    assert!((v - 214.4).abs() < 1e-5 * 214.4, "{v}");
}

#[test]
fn fully_pruned_layer_costs_nothing() {
    let m = module(0, 0, &[6, 7, 8], &[0.0; 3]);
    let part = partition(&[vec![0, 5]]);
    let cfg = LossConfig::new(0.1, 1.0).unwrap();
    let (v, _) = eval(&[m], &part, &[16], &cfg);
    assert_eq!(v, 0.0);
}

#[test]
fn gradient_matches_finite_differences_of_formula() {
    let mut r = rng(21);
    let part = partition(&[vec![3, 2, 1], vec![4, 1, 3]]);
    let spatial = [16, 4];
    let (p, z) = (0.05, 100.0);
    let cfg = LossConfig::new(p as f32, z as f32).unwrap();
    for _ in 0..20 {
        let mods: Vec<_> = (0..2)
            .flat_map(|l| (0..2).map(move |g| (l, g)))
            .map(|(l, g)| {
                let b: Vec<f32> = (0..3).map(|_| r.gen_range(-2.0f32..2.0)).collect();
                module(l, g, &[4, 5, 6], &b)
            })
            .collect();
        let (v, grads) = eval(&mods, &part, &spatial, &cfg);
        assert!((v - oracle(&mods, &part, &spatial, p, z)).abs() < 1e-5 * v.abs());
        let h = 1e-5;
        for (k, m) in mods.iter().enumerate() {
            for i in 0..3 {
                let shifted = |d: f64| {
                    let mut ms = mods.clone();
                    let b = ms[k].arch.value.data_mut();
                    b[i] = (m.beta()[i] as f64 + d) as f32;
                    let actual = b[i] as f64 - m.beta()[i] as f64;
                    (oracle(&ms, &part, &spatial, p, z), actual)
                };
                let ((fp, dp), (fm, dm)) = (shifted(h), shifted(-h));
                let fd = (fp - fm) / (dp - dm);
                let an = grads[k][i] as f64;
                assert!((an - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "{an} vs {fd}");
            }
        }
    }
}

#[test]
fn lowest_bit_parameter_lowers_the_penalty() {
    let part = partition(&[vec![3, 1]]);
    let cfg = LossConfig::new(0.1, 10.0).unwrap();
    let mut r = rng(22);
    for _ in 0..20 {
        let b: Vec<f32> = (0..3).map(|_| r.gen_range(-2.0f32..2.0)).collect();
        let base = module(0, 0, &[3, 4, 5], &b);
        let (v0, g) = eval(std::slice::from_ref(&base), &part, &[4], &cfg);
        assert!(g[0][0] < 0.0);
        let mut up = base.clone();
        up.arch.value.data_mut()[0] += 0.01;
        let (v1, _) = eval(&[up], &part, &[4], &cfg);
        assert!(v1 < v0);
    }
}

#[test]
fn one_hot_equals_exact_bit_count() {
    let part = partition(&[vec![3, 2, 1], vec![1, 4, 0]]);
    let spatial = [16, 4];
    let mods = vec![
        module(0, 0, &[6, 7, 8], &[0.0, 60.0, 0.0]),
        module(0, 1, &[2, 3, 4], &[60.0, 0.0, 0.0]),
        module(1, 0, &[5, 6, 7], &[0.0, 0.0, 60.0]),
        module(1, 1, &[3, 4, 5], &[0.0, 60.0, 0.0]),
    ];
    let (p, z) = (0.2f32, 128.0f32);
    let cfg = LossConfig::new(p, z).unwrap();
    let (v, _) = eval(&mods, &part, &spatial, &cfg);
    let refs: Vec<&MPModuleState> = mods.iter().collect();
    let exact = hard_bit_count(&refs, &part, &spatial).unwrap();
    assert_eq!(exact, (7 * 3 * 16 + 2 * 2 * 16 + 7 * 4 + 4 * 4 * 4) as f64);
    assert!((v - p as f64 / z as f64 * exact).abs() < 1e-5);
}

#[test]
fn kd_is_nonnegative_and_zero_on_self() {
    let mut r = rng(23);
    for _ in 0..50 {
        let t = uniform(&mut r, &[4, 10], -5.0, 5.0);
        let s = uniform(&mut r, &[4, 10], -5.0, 5.0);
        let mut g = Graph::new();
        let sv = g.leaf(s, true);
        let l = kd_loss(&mut g, sv, &t).unwrap();
        assert!(g.value(l).item() >= -1e-7);
        let mut g = Graph::new();
        let tv = g.leaf(t.clone(), true);
        let l = kd_loss(&mut g, tv, &t).unwrap();
        assert!(g.value(l).item().abs() < 1e-6);
    }
}

#[test]
fn kd_gradient_reaches_student_only() {
    let mut r = rng(24);
    let s = uniform(&mut r, &[3, 5], -2.0, 2.0);
    let t = uniform(&mut r, &[3, 5], -2.0, 2.0);
    let err = gradcheck(&[s], 24, 1e-3, |g, v| kd_loss(g, v[0], &t).unwrap());
    assert!(err < 1e-3, "{err}");
}

#[test]
fn total_loss_gradient_wrt_beta() {
    // beta drives both the penalty and, through a soft mix of two fixed
    // "branch" logit tensors, the distillation term.
    let mut r = rng(25);
    let teacher = uniform(&mut r, &[2, 4], -2.0, 2.0);
    let b1 = uniform(&mut r, &[2, 4], -2.0, 2.0);
    let b2 = uniform(&mut r, &[2, 4], -2.0, 2.0);
    let beta = uniform(&mut r, &[2], -1.0, 1.0);
    let part = partition(&[vec![2, 1]]);
    let m = module(0, 0, &[3, 4], &[0.0, 0.0]);
    let cfg = LossConfig::new(0.1, 6.0).unwrap();
    let err = gradcheck(&[beta], 25, 1e-3, |g, v| {
        let pi = g.softmax(v[0]).unwrap();
        let c1 = g.constant(b1.clone());
        let c2 = g.constant(b2.clone());
        let student = g.weighted_sum(&[c1, c2], pi).unwrap();
        let kd = kd_loss(g, student, &teacher).unwrap();
        let mem = memory_loss(g, &[(&m, v[0])], &part, &[3], &cfg).unwrap();
        total_loss(g, mem, kd).unwrap()
    });
    assert!(err < 1e-3, "{err}");
}
