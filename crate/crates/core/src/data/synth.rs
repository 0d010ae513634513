// Procedural 10-class RGB images: five shapes and five textures drawn with
// random colors, placement and scale over a shaded, cluttered and noisy
// background.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetSplit, SplitKind};

pub const SYNTH_SIZE: usize = 32;
pub const SYNTH_CLASSES: usize = 10;

const NAMES: [&str; SYNTH_CLASSES] = [
    "disk", "square", "triangle", "cross", "ring", "h-stripes", "v-stripes", "d-stripes", "checker", "dots",
];

pub fn class_name(label: usize) -> &'static str {
    NAMES[label]
}

struct Canvas {
    px: Vec<f32>,
}

impl Canvas {
    fn put(&mut self, x: usize, y: usize, color: [f32; 3]) {
        let k = (y * SYNTH_SIZE + x) * 3;
        self.px[k..k + 3].copy_from_slice(&color);
    }
}

fn color(r: &mut ChaCha8Rng) -> [f32; 3] {
    [r.gen_range(0.0..255.0), r.gen_range(0.0..255.0), r.gen_range(0.0..255.0)]
}

fn distance(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum()
}

/// Whether pixel `(x, y)` relative to the shape centre belongs to `label`.
fn inside(label: usize, dx: f32, dy: f32, size: f32, period: f32, phase: f32) -> bool {
    let rad = (dx * dx + dy * dy).sqrt();
    match label {
        0 => rad <= size,
        1 => dx.abs() <= size * 0.85 && dy.abs() <= size * 0.85,
        2 => dy <= size * 0.8 && dy >= -size && dx.abs() <= (dy + size) * 0.55,
        3 => (dx.abs() <= size * 0.3 && dy.abs() <= size) || (dy.abs() <= size * 0.3 && dx.abs() <= size),
        4 => rad <= size && rad >= size * 0.55,
        _ => {
            if dx.abs() > size * 1.3 || dy.abs() > size * 1.3 {
                return false;
            }
            let band = |v: f32| ((v + phase) / period).rem_euclid(2.0) < 1.0;
            match label {
                5 => band(dy),
                6 => band(dx),
                7 => band((dx + dy) * std::f32::consts::FRAC_1_SQRT_2),
                8 => band(dx) ^ band(dy),
                _ => {
                    let cx = ((dx + phase) / period).rem_euclid(1.0) - 0.5;
                    let cy = ((dy + phase) / period).rem_euclid(1.0) - 0.5;
                    cx * cx + cy * cy < 0.09
                }
            }
        }
    }
}

fn draw(label: usize, r: &mut ChaCha8Rng) -> Vec<u8> {
    let bg = color(r);
    let mut fg = color(r);
    while distance(fg, bg) < 110.0 {
        fg = color(r);
    }
    let mut c = Canvas {
        px: vec![0.0; SYNTH_SIZE * SYNTH_SIZE * 3],
    };
    let grad = [r.gen_range(-1.5..1.5), r.gen_range(-1.5..1.5)];
    for y in 0..SYNTH_SIZE {
        for x in 0..SYNTH_SIZE {
            let shade = grad[0] * (x as f32 - 16.0) + grad[1] * (y as f32 - 16.0);
            c.put(x, y, bg.map(|v| v + shade));
        }
    }
    let size: f32 = r.gen_range(5.0..10.0);
    let cx: f32 = r.gen_range(size..SYNTH_SIZE as f32 - size);
    let cy: f32 = r.gen_range(size..SYNTH_SIZE as f32 - size);
    let period: f32 = r.gen_range(2.0..4.0);
    let phase: f32 = r.gen_range(0.0..4.0);
    for y in 0..SYNTH_SIZE {
        for x in 0..SYNTH_SIZE {
            if inside(label, x as f32 + 0.5 - cx, y as f32 + 0.5 - cy, size, period, phase) {
                c.put(x, y, fg);
            }
        }
    }
    // A random bar in a third color as clutter.
    let clutter = color(r);
    let (bx, by) = (r.gen_range(0..SYNTH_SIZE - 8), r.gen_range(0..SYNTH_SIZE - 8));
    let (bw, bh) = if r.gen_bool(0.5) { (8, 2) } else { (2, 8) };
    for y in by..by + bh {
        for x in bx..bx + bw {
            c.put(x, y, clutter);
        }
    }
    let noise: f32 = r.gen_range(20.0..60.0);
    c.px.iter()
        .map(|&v| (v + r.gen_range(-noise..noise)).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// `count` images with uniformly drawn labels, fully determined by `seed`.
pub fn synthetic_split(count: usize, seed: u64, kind: SplitKind) -> DatasetSplit {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count * SYNTH_SIZE * SYNTH_SIZE * 3);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let label = r.gen_range(0..SYNTH_CLASSES);
        images.extend(draw(label, &mut r));
        labels.push(label as u8);
    }
    DatasetSplit::new(kind, (SYNTH_SIZE, SYNTH_SIZE, 3), SYNTH_CLASSES, images, labels).expect("synthetic split")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_labelled() {
        let a = synthetic_split(40, 5, SplitKind::Train);
        let b = synthetic_split(40, 5, SplitKind::Train);
        assert_eq!(a, b);
        assert!(a.labels.iter().all(|&l| (l as usize) < SYNTH_CLASSES));
        assert_ne!(a, synthetic_split(40, 6, SplitKind::Train));
    }
}
