#![allow(dead_code, clippy::needless_range_loop)]

pub mod grad_suite;
pub mod oracles;

use actcomp::tensor::{Graph, Tensor, Var};
use actcomp::transform::TransformCache;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Same as [`uniform`] but keeps every entry at least `gap` away from zero,
/// so kinks at the origin are not straddled by finite differences.
pub fn uniform_off_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32, gap: f32) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v: f32 = rng.gen_range(lo..hi);
        if v.abs() > gap {
            break v;
        }
    })
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Largest norm-relative error `|g_a - g_fd| / max(|g_a|, |g_fd|)`.
    pub error: f64,
    /// False when some finite-difference gradient is below what `f32`
    /// forward evaluation can resolve at this step size.
    pub resolvable: bool,
}

/// Gradient check against central finite differences.
///
/// `f` maps graph leaves to an output; the scalar under test is
/// `sum(weights * f(...))` with fixed random weights.
pub fn gradcheck_report(
    inputs: &[Tensor],
    seed: u64,
    step: f32,
    f: impl Fn(&mut Graph, &[Var]) -> Var,
) -> GradCheck {
    let mut r = rng(seed ^ 0x9e37_79b9);
    let eval = |xs: &[Tensor], weights: Option<&Tensor>| -> (f64, f64, Vec<Tensor>, Tensor) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let y = f(&mut g, &vars);
        let w = match weights {
            Some(w) => w.clone(),
            None => Tensor::zeros(g.value(y).shape()),
        };
        let yw = g.mul_const(y, &w).unwrap();
        let loss = g.sum(yw);
        let terms = g.value(y).data().iter().zip(w.data()).map(|(a, b)| *a as f64 * *b as f64);
        let value: f64 = terms.clone().sum();
        let magnitude: f64 = terms.map(|t| t * t).sum::<f64>().sqrt();
        g.backward(loss).unwrap();
        let grads = vars
            .iter()
            .map(|v| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(*v).shape())))
            .collect();
        (value, magnitude, grads, g.value(y).clone())
    };
    let (_, _, _, y0) = eval(inputs, None);
    let weights = Tensor::from_fn(y0.shape(), |_| r.gen_range(-1.0f32..1.0));
    let (_, magnitude, analytic, _) = eval(inputs, Some(&weights));
    // Independent f32 roundings per output term, over the 2h baseline.
    let noise = f32::EPSILON as f64 * magnitude / (2.0 * step as f64);
    let mut worst = 0.0f64;
    let mut resolvable = true;
    for (k, x) in inputs.iter().enumerate() {
        let mut num = vec![0.0f64; x.len()];
        for i in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] = x.data()[i] + step;
            let (fp, ..) = eval(&xs, Some(&weights));
            xs[k].data_mut()[i] = x.data()[i] - step;
            let (fm, ..) = eval(&xs, Some(&weights));
            num[i] = (fp - fm) / (2.0 * step as f64);
        }
        let a = analytic[k].data();
        let diff: f64 = a.iter().zip(&num).map(|(a, n)| (*a as f64 - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let nn: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nn < 1e2 * noise * (x.len() as f64).sqrt() {
            resolvable = false;
        }
        let denom = na.max(nn);
        let rel = if denom < 1e-12 { diff } else { diff / denom };
        worst = worst.max(rel);
    }
    GradCheck { error: worst, resolvable }
}

pub fn gradcheck(
    inputs: &[Tensor],
    seed: u64,
    step: f32,
    f: impl Fn(&mut Graph, &[Var]) -> Var,
) -> f64 {
    gradcheck_report(inputs, seed, step, f).error
}

/// Runs gradient checks on `count` resolvable random instances and returns
/// the worst error. Instances whose finite-difference gradient sits below
/// the `f32` noise floor are redrawn.
pub fn gradcheck_instances(
    count: usize,
    seed: u64,
    step: f32,
    mut make: impl FnMut(&mut ChaCha8Rng) -> Vec<Tensor>,
    f: impl Fn(&mut Graph, &[Var]) -> Var,
) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut attempts = 0;
    while done < count {
        attempts += 1;
        assert!(attempts <= 10 * count, "too many unresolvable instances");
        let inputs = make(&mut r);
        let rep = gradcheck_report(&inputs, seed + attempts as u64, step, &f);
        if !rep.resolvable {
            continue;
        }
        worst = worst.max(rep.error);
        done += 1;
    }
    worst
}

/// Direct six-loop cross-correlation.
pub fn conv2d_reference(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (o, _, kh, kw) = w.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * c + ic) * kh + ky) * kw + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out.data_mut()[((b * o + oc) * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }
    out
}

/// Correlated activations: a random channel mix of independent sources with
/// decaying scales, plus a per-channel offset.
pub fn correlated(seed: u64, n: usize, d: usize, h: usize, w: usize) -> Tensor {
    correlated_with_decay(seed, n, d, h, w, 0.5)
}

/// [`correlated`] with source `k` scaled by `2^(-decay * k)`.
pub fn correlated_with_decay(seed: u64, n: usize, d: usize, h: usize, w: usize, decay: f32) -> Tensor {
    let mut r = rng(seed);
    let mix = uniform(&mut r, &[d, d], -1.0, 1.0);
    let offset: Vec<f32> = (0..d).map(|_| r.gen_range(-3.0..3.0)).collect();
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, d, h, w]);
    for b in 0..n {
        for p in 0..hw {
            let src: Vec<f32> = (0..d)
                .map(|k| r.gen_range(-1.0f32..1.0) * 2.0f32.powf(-decay * k as f32))
                .collect();
            for o in 0..d {
                let v: f32 = (0..d).map(|k| mix.data()[o * d + k] * src[k]).sum();
                out.data_mut()[(b * d + o) * hw + p] = v + offset[o];
            }
        }
    }
    out
}

/// Squared reconstruction error after zeroing transformed channels
/// `keep..d`.
pub fn truncation_error(x: &Tensor, c: &TransformCache, keep: usize) -> f64 {
    let mut y = c.apply(x).unwrap();
    let (n, d, h, w) = y.dims4().unwrap();
    let hw = h * w;
    for b in 0..n {
        y.data_mut()[(b * d + keep) * hw..(b + 1) * d * hw].fill(0.0);
    }
    let back = c.invert(&y).unwrap();
    back.data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum()
}

/// A config small enough for a full baseline + compression run in seconds.
pub fn tiny_config() -> actcomp::config::RunConfig {
    actcomp::config::RunConfig {
        train_size: 320,
        eval_size: 128,
        baseline_epochs: 1,
        finetune_size: 128,
        batch_size: 32,
        epochs: 2,
        pca_samples: 64,
        probe_size: 64,
        ..Default::default()
    }
}
