//! Independent reference implementations.

use rand::Rng;

/// Nearest level by exhaustive search over all `2^b` levels; exact midpoints
/// go to the upper level.
pub fn table_lookup(x: f32, lo: f32, hi: f32, bits: u32) -> f32 {
    let n = 1u64 << bits;
    let step = (hi as f64 - lo as f64) / (n - 1) as f64;
    let xc = (x as f64).clamp(lo as f64, hi as f64);
    let mut best = 0u64;
    let mut best_d = f64::INFINITY;
    for k in 0..n {
        let level = lo as f64 + k as f64 * step;
        let d = (xc - level).abs();
        if d <= best_d {
            best = k;
            best_d = d;
        }
    }
    ((lo as f64 + best as f64 * step) as f32).clamp(lo, hi)
}

/// Independent oracle: re-evaluates every layer's metric from scratch at each
/// step, straight from the formula, and picks the global minimum (lowest layer
/// index on ties).
pub fn oracle_sequence(eigs: &[Vec<f32>], spatial: &[usize], budget: usize) -> Vec<(usize, usize)> {
    let mut remaining: Vec<usize> = eigs.iter().map(Vec::len).collect();
    let mut out = Vec::new();
    for _ in 0..budget {
        let mut best: Option<(usize, f64)> = None;
        for l in 0..eigs.len() {
            if remaining[l] <= 1 {
                continue;
            }
            let sig: Vec<f64> = eigs[l].iter().map(|&v| (v.max(0.0) as f64).sqrt()).collect();
            let total: f64 = sig[..remaining[l]].iter().sum();
            let s = if total <= 0.0 {
                0.0
            } else {
                sig[remaining[l] - 1] / total / spatial[l] as f64
            };
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((l, s));
            }
        }
        let (l, _) = best.expect("budget within removable");
        remaining[l] -= 1;
        out.push((l, remaining[l]));
    }
    out
}

/// Random descending spectra (about 10% exact zeros) and spatial sizes
/// for up to `max_layers` layers of up to `max_channels` channels.
pub fn random_instance(seed: u64, max_layers: usize, max_channels: usize) -> (Vec<Vec<f32>>, Vec<usize>) {
    let mut r = super::rng(seed);
    let layers = r.gen_range(1..=max_layers);
    let mut eigs = Vec::new();
    let mut spatial = Vec::new();
    for _ in 0..layers {
        let d = r.gen_range(1..=max_channels);
        let mut e: Vec<f32> = (0..d)
            .map(|_| if r.gen_bool(0.1) { 0.0 } else { r.gen_range(0.0f32..10.0) })
            .collect();
        e.sort_by(|a, b| b.total_cmp(a));
        eigs.push(e);
        spatial.push([1, 4, 16, 64][r.gen_range(0..4)]);
    }
    (eigs, spatial)
}
