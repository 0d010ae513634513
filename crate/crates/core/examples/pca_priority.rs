//! Fits the per-layer PCA on a few activations of a baseline network,
//! prints the spectra and the first channels the greedy selection would
//! drop, then builds a three-group partition.
//!
//! `cargo run --release --example pca_priority -- [samples]`

use actcomp::data::{synthetic_split, SplitKind};
use actcomp::model::{layer_spatial, DeskCnn};
use actcomp::partition::{build_partition, greedy_rank, split_thresholds, LayerSelection, SelectionState};
use actcomp::pipeline::fit_transforms;

fn main() -> actcomp::error::Result<()> {
    let samples = std::env::args().nth(1).map_or(128, |a| a.parse().expect("sample count"));
    let split = synthetic_split(samples, 7, SplitKind::Train);
    let mut model = DeskCnn::new(10, 1);
    let transforms = fit_transforms(&mut model, &split)?;

    for t in &transforms {
        let total: f32 = t.eigenvalues.iter().sum();
        let mut acc = 0.0;
        let k90 = t.eigenvalues.iter().take_while(|&&v| {
            acc += v;
            acc < 0.9 * total
        });
        println!(
            "layer {}: d {:>2}, top eigenvalues {:.3?}, 90% energy in {} components, |U^T U - I| {:.1e}",
            t.layer,
            t.channels(),
            &t.eigenvalues[..4],
            k90.count() + 1,
            t.orthogonality_error()
        );
    }

    let layers = transforms
        .iter()
        .zip(layer_spatial())
        .map(|(t, s)| LayerSelection::from_eigenvalues(&t.eigenvalues, s))
        .collect::<actcomp::error::Result<Vec<_>>>()?;
    let state = SelectionState::new(layers);
    let ranked = greedy_rank(state.clone(), 12)?;
    let order: Vec<String> = ranked.log.iter().map(|r| format!("L{}c{}", r.layer, r.channel)).collect();
    println!("first removals: {}", order.join(" "));

    let part = build_partition(&state, &split_thresholds(3, 0.05))?;
    for (l, g) in part.layers.iter().enumerate() {
        println!("layer {l}: group sizes {:?}", g.sizes);
    }
    Ok(())
}
