//! Central finite-difference checks for every differentiable graph op and
//! both losses.

use actcomp::losses::{kd_loss, memory_loss, LossConfig};
use actcomp::partition::{GroupPartition, LayerGroups};
use actcomp::quant::MPModuleState;
use actcomp::tensor::{BnStats, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{gradcheck_instances, uniform, uniform_off_zero};

pub struct OpResult {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

type Make = Box<dyn FnMut(&mut ChaCha8Rng) -> Vec<Tensor>>;
type Apply = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

fn case(name: &'static str, make: Make, f: Apply) -> (&'static str, Make, Apply) {
    (name, make, f)
}

/// Distinct values on a 0.05 grid, so max-pool windows never tie within
/// the finite-difference step.
fn distinct(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| i as f32 * 0.05 - n as f32 * 0.025).collect();
    v.shuffle(r);
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn single_layer(sizes: &[usize]) -> GroupPartition {
    GroupPartition {
        groups: sizes.len(),
        layers: vec![LayerGroups {
            permutation: (0..sizes.iter().sum::<usize>() as u32).collect(),
            sizes: sizes.to_vec(),
        }],
    }
}

fn cases() -> Vec<(&'static str, Make, Apply)> {
    let u = |shape: &'static [usize], lo: f32, hi: f32| -> Make {
        Box::new(move |r: &mut ChaCha8Rng| vec![uniform(r, shape, lo, hi)])
    };
    let u2 = |a: &'static [usize], b: &'static [usize]| -> Make {
        Box::new(move |r: &mut ChaCha8Rng| vec![uniform(r, a, -2.0, 2.0), uniform(r, b, -2.0, 2.0)])
    };
    let memory = |tau: f32| -> Apply {
        let part = single_layer(&[3, 2, 1]);
        let cfg = LossConfig::new(0.15, 24.0).unwrap();
        Box::new(move |g: &mut Graph, v: &[Var]| {
            let mut a = MPModuleState::new(0, 0, &[4, 5, 6]).unwrap();
            let mut b = MPModuleState::new(0, 1, &[2, 3, 4]).unwrap();
            a.temperature = tau;
            b.temperature = tau;
            memory_loss(g, &[(&a, v[0]), (&b, v[1])], &part, &[4], &cfg).unwrap()
        })
    };
    vec![
        case("add", u2(&[3, 4], &[3, 4]), Box::new(|g, v| g.add(v[0], v[1]).unwrap())),
        case("sub", u2(&[3, 4], &[3, 4]), Box::new(|g, v| g.sub(v[0], v[1]).unwrap())),
        case("mul", u2(&[3, 4], &[3, 4]), Box::new(|g, v| g.mul(v[0], v[1]).unwrap())),
        case("scale", u(&[3, 4], -2.0, 2.0), Box::new(|g, v| g.scale(v[0], -1.7))),
        case("add_scalar", u(&[3, 4], -2.0, 2.0), Box::new(|g, v| g.add_scalar(v[0], 0.3))),
        case(
            "mul_const",
            u(&[3, 4], -2.0, 2.0),
            Box::new(|g, v| {
                let c = Tensor::from_fn(&[3, 4], |i| i as f32 * 0.25 - 1.0);
                g.mul_const(v[0], &c).unwrap()
            }),
        ),
        case("sum", u(&[3, 4], -2.0, 2.0), Box::new(|g, v| g.sum(v[0]))),
        case("mean", u(&[3, 4], -2.0, 2.0), Box::new(|g, v| g.mean(v[0]))),
        case("reshape", u(&[3, 4], -2.0, 2.0), Box::new(|g, v| g.reshape(v[0], &[2, 6]).unwrap())),
        case("flatten", u(&[2, 3, 2, 2], -2.0, 2.0), Box::new(|g, v| g.flatten(v[0]).unwrap())),
        case(
            "conv2d",
            u2(&[2, 3, 5, 5], &[4, 3, 3, 3]),
            Box::new(|g, v| g.conv2d(v[0], v[1], 1, 1).unwrap()),
        ),
        case(
            "conv2d stride 2",
            u2(&[1, 2, 6, 6], &[3, 2, 3, 3]),
            Box::new(|g, v| g.conv2d(v[0], v[1], 2, 0).unwrap()),
        ),
        case(
            "batch_norm2d",
            Box::new(|r: &mut ChaCha8Rng| {
                vec![uniform(r, &[4, 3, 3, 3], -2.0, 2.0), uniform(r, &[3], 0.5, 1.5), uniform(r, &[3], -1.0, 1.0)]
            }),
            Box::new(|g, v| {
                let mut stats = BnStats::new(3);
                g.batch_norm2d(v[0], v[1], v[2], &mut stats, true).unwrap()
            }),
        ),
        case(
            "relu",
            Box::new(|r: &mut ChaCha8Rng| vec![uniform_off_zero(r, &[3, 5], -2.0, 2.0, 0.05)]),
            Box::new(|g, v| g.relu(v[0])),
        ),
        case(
            "max_pool2d",
            Box::new(|r: &mut ChaCha8Rng| vec![distinct(r, &[2, 2, 4, 4])]),
            Box::new(|g, v| g.max_pool2d(v[0], 2).unwrap()),
        ),
        case(
            "linear",
            Box::new(|r: &mut ChaCha8Rng| {
                vec![uniform(r, &[3, 5], -2.0, 2.0), uniform(r, &[4, 5], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)]
            }),
            Box::new(|g, v| g.linear(v[0], v[1], v[2]).unwrap()),
        ),
        case("softmax", u(&[3, 5], -2.0, 2.0), Box::new(|g, v| g.softmax(v[0]).unwrap())),
        case("log_softmax", u(&[3, 5], -2.0, 2.0), Box::new(|g, v| g.log_softmax(v[0]).unwrap())),
        case("log", u(&[3, 4], 0.5, 2.0), Box::new(|g, v| g.log(v[0]))),
        case(
            "channel_affine",
            u(&[2, 3, 2, 2], -2.0, 2.0),
            Box::new(|g, v| {
                let m = Tensor::from_fn(&[2, 3], |i| [0.6, -0.8, 0.1, 0.8, 0.6, -0.3][i]);
                g.channel_affine(v[0], &m, Some(&[0.1, -0.2, 0.3]), Some(&[0.5, -0.5])).unwrap()
            }),
        ),
        case(
            "narrow_channels",
            u(&[2, 4, 2, 2], -2.0, 2.0),
            Box::new(|g, v| g.narrow_channels(v[0], 1, 2).unwrap()),
        ),
        case(
            "concat_channels",
            u2(&[2, 1, 2, 2], &[2, 3, 2, 2]),
            Box::new(|g, v| g.concat_channels(&[v[0], v[1]]).unwrap()),
        ),
        case(
            "weighted_sum",
            Box::new(|r: &mut ChaCha8Rng| {
                vec![uniform(r, &[2, 3], -2.0, 2.0), uniform(r, &[2, 3], -2.0, 2.0), uniform(r, &[2], -1.0, 1.0)]
            }),
            Box::new(|g, v| g.weighted_sum(&[v[0], v[1]], v[2]).unwrap()),
        ),
        case(
            "kd_loss",
            u(&[3, 6], -2.0, 2.0),
            Box::new(|g, v| {
                let teacher = Tensor::from_fn(&[3, 6], |i| ((i * 7) % 11) as f32 * 0.3 - 1.5);
                kd_loss(g, v[0], &teacher).unwrap()
            }),
        ),
        case(
            "memory_loss",
            Box::new(|r: &mut ChaCha8Rng| vec![uniform(r, &[3], -2.0, 2.0), uniform(r, &[3], -2.0, 2.0)]),
            memory(1.0),
        ),
        case(
            "memory_loss tau 0.25",
            Box::new(|r: &mut ChaCha8Rng| vec![uniform(r, &[3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)]),
            memory(0.25),
        ),
    ]
}

/// Checks every case on `instances` random inputs; FD step 1e-2.
pub fn run(instances: usize, seed: u64) -> Vec<OpResult> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(k, (name, make, f))| OpResult {
            name,
            instances,
            worst: gradcheck_instances(instances, seed + 1000 * k as u64, 1e-2, make, f),
        })
        .collect()
}

/// Straight-through mask of the quantizer: gradient 1 inside `[lo, hi]`,
/// 0 outside, checked exactly on random points.
pub fn ste_mask_exact(samples: usize, r: &mut ChaCha8Rng) -> bool {
    let (lo, hi) = (-1.0f32, 1.5f32);
    let x = Tensor::from_fn(&[samples], |_| r.gen_range(-3.0f32..3.0));
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let q = g.quantize(v, lo, hi, 3).unwrap();
    let s = g.sum(q);
    g.backward(s).unwrap();
    let grad = g.grad(v).unwrap();
    x.data()
        .iter()
        .zip(grad.data())
        .all(|(&xi, &gi)| gi == if (lo..=hi).contains(&xi) { 1.0 } else { 0.0 })
}
