//! Uniform quantizer levels and the soft mixture of three bit-widths.
//!
//! `cargo run --example quantize_mix`

use actcomp::quant::{expected_bits, MPModuleState, UniformQuantizer};
use actcomp::tensor::{Graph, Tensor};

fn main() -> actcomp::error::Result<()> {
    let xs = [-0.4f32, 0.0, 0.13, 0.5, 0.77, 1.0, 1.6];
    for bits in [1, 2, 4, 8] {
        let q = UniformQuantizer::new(bits, 0.0, 1.0)?;
        let ys: Vec<String> = xs.iter().map(|&x| format!("{:.4}", q.apply(x))).collect();
        println!("{bits} bits ({:>3} levels): {}", q.level_count(), ys.join(" "));
    }

    // One group with branches (6, 7, 8); sharpening beta toward the
    // 6-bit branch lowers the expected bit-width.
    for beta in [[0.0f32, 0.0, 0.0], [1.0, 0.0, -1.0], [4.0, 0.0, -4.0]] {
        let m = MPModuleState::new(0, 0, &[6, 7, 8])?.with_arch(&beta)?;
        let pi: Vec<String> = m.mixing_weights().iter().map(|p| format!("{p:.3}")).collect();
        println!(
            "beta {beta:?}: pi [{}], expected bits {:.3}, chosen {}",
            pi.join(", "),
            expected_bits(&m),
            m.chosen_bits()
        );
    }

    // The straight-through gradient passes inside the range and stops outside.
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(xs.to_vec()), true);
    let q = g.quantize(x, 0.0, 1.0, 3)?;
    let s = g.sum(q);
    g.backward(s)?;
    println!("STE gradient {:?}", g.grad(x).unwrap().data());
    Ok(())
}
