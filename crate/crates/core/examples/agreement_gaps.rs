//! Ten simulated workers answer each pair; pairs are grouped by how strongly
//! the workers agreed, and the model's mean score gap is reported per group.
//!
//! The 50% group has no majority side, so it reports absolute gaps while the
//! other groups report signed gaps (majority minus minority). With smooth
//! latents that makes the 50% group sit above the 51-60% group.
//!
//! ```text
//! cargo run --release --example agreement_gaps
//! ```

use std::collections::BTreeMap;

use shaperank::analysis::{agreement_gap_analysis, score_map};
use shaperank::dataset::{disjoint_pairs, oracle_label, responses_to_pairs, synth_shapes, Agreement, LatentScore, ShapeFamily};
use shaperank::net::init_params;
use shaperank::ranktrain::train;
use shaperank::{ArchitectureSpec, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let shapes = synth_shapes(40, 10, ShapeFamily::Union, 8)?;
    let grids: BTreeMap<_, _> = shapes.iter().map(|s| (s.grid.shape_id().to_string(), s.grid.clone())).collect();
    let latent: BTreeMap<_, _> = grids.iter().map(|(id, g)| (id.clone(), LatentScore::Volume.evaluate(g))).collect();
    let ids: Vec<String> = grids.keys().cloned().collect();
    let agreement = Agreement::Logistic { steepness: 15.0 };

    let (train_pairs, study_pairs) = disjoint_pairs(&ids, 800, 200, 8)?;
    let train_set = responses_to_pairs(&oracle_label(&train_pairs, &latent, agreement, 1, 8)?, &grids)?;
    let spec = ArchitectureSpec::full(10, vec![1000, 64, 16, 1])?;
    let config = TrainConfig { alpha: 1e-3, iterations: 150, ..TrainConfig::default() };
    let (params, _) = train(init_params(&spec, 0), &train_set, &config, None)?;

    let study = oracle_label(&study_pairs, &latent, agreement, 10, 9)?;
    let report = agreement_gap_analysis(&study, &score_map(&params, &grids)?)?;
    println!("{:<8} {:>7} {:>10}", "group", "pairs", "mean gap");
    for b in &report.bins {
        println!("{:<8} {:>7} {:>10.4}", b.bin.label(), b.n_pairs, b.mean_diff);
    }
    Ok(())
}
