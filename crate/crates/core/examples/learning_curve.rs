//! Validation accuracy as the training set grows.
//!
//! ```text
//! cargo run --release --example learning_curve
//! ```

use std::collections::BTreeMap;

use shaperank::analysis::{learning_curve, write_curve_csv};
use shaperank::dataset::{disjoint_pairs, oracle_label, responses_to_pairs, synth_shapes, Agreement, LatentScore, ShapeFamily};
use shaperank::{ArchitectureSpec, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let shapes = synth_shapes(40, 10, ShapeFamily::Union, 4)?;
    let grids: BTreeMap<_, _> = shapes.iter().map(|s| (s.grid.shape_id().to_string(), s.grid.clone())).collect();
    let latent: BTreeMap<_, _> = grids.iter().map(|(id, g)| (id.clone(), LatentScore::Volume.evaluate(g))).collect();
    let ids: Vec<String> = grids.keys().cloned().collect();

    let (train_pairs, val_pairs) = disjoint_pairs(&ids, 1000, 150, 4)?;
    let train_set = responses_to_pairs(&oracle_label(&train_pairs, &latent, Agreement::NoiseFree, 1, 4)?, &grids)?;
    let val_set = responses_to_pairs(&oracle_label(&val_pairs, &latent, Agreement::NoiseFree, 1, 5)?, &grids)?;

    let spec = ArchitectureSpec::full(10, vec![1000, 64, 16, 1])?;
    let config = TrainConfig { alpha: 1e-3, iterations: 150, ..TrainConfig::default() };
    let points = learning_curve(&spec, &train_set, &val_set, &[0.02, 0.05, 0.1, 0.25, 0.5, 1.0], &config)?;
    for p in &points {
        let bar = "#".repeat((p.accuracy * 50.0).round() as usize);
        println!("{:>5} pairs  {:.3} {bar}", p.n_train, p.accuracy);
    }
    write_curve_csv(&points, std::io::stdout())?;
    Ok(())
}
