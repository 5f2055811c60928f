//! Rank a collection with a trained model and compare against the hidden
//! latent order.
//!
//! ```text
//! cargo run --release --example rank_shapes
//! ```

use std::collections::BTreeMap;

use shaperank::analysis::rank_shapes;
use shaperank::dataset::{oracle_label, random_pairs, responses_to_pairs, synth_shapes, Agreement, LatentScore, ShapeFamily};
use shaperank::net::init_params;
use shaperank::ranktrain::train;
use shaperank::{ArchitectureSpec, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let shapes = synth_shapes(30, 8, ShapeFamily::Box, 11)?;
    let grids: Vec<_> = shapes.into_iter().map(|s| s.grid).collect();
    let by_id: BTreeMap<_, _> = grids.iter().map(|g| (g.shape_id().to_string(), g.clone())).collect();
    let latent: BTreeMap<_, _> = by_id.iter().map(|(id, g)| (id.clone(), LatentScore::Height.evaluate(g))).collect();
    let ids: Vec<String> = by_id.keys().cloned().collect();

    let responses = oracle_label(&random_pairs(&ids, 600, 11), &latent, Agreement::NoiseFree, 1, 11)?;
    let set = responses_to_pairs(&responses, &by_id)?;
    let spec = ArchitectureSpec::full(8, vec![512, 32, 8, 1])?;
    let config = TrainConfig { alpha: 1e-3, iterations: 200, ..TrainConfig::default() };
    let (params, _) = train(init_params(&spec, 0), &set, &config, None)?;

    let ranking = rank_shapes(&params, &grids)?;
    println!("rank  shape      score    latent height");
    for (i, (id, score)) in ranking.entries.iter().enumerate() {
        if i < 5 || i + 5 >= ranking.entries.len() {
            println!("{:>4}  {id}  {score:>7.3}  {:>7.3}", i + 1, latent[id]);
        } else if i == 5 {
            println!("   ...");
        }
    }

    // Fraction of all shape pairs ordered the same way by model and latent.
    let mut agree = 0;
    let mut total = 0;
    for (i, (a, _)) in ranking.entries.iter().enumerate() {
        for (b, _) in &ranking.entries[i + 1..] {
            if latent[a] != latent[b] {
                total += 1;
                agree += (latent[a] > latent[b]) as usize;
            }
        }
    }
    println!("pairwise order agreement with the latent: {:.3}", agree as f64 / total as f64);

    let mut csv = Vec::new();
    ranking.write_csv(&mut csv)?;
    println!("{}", String::from_utf8(csv)?.lines().take(4).collect::<Vec<_>>().join("\n"));
    Ok(())
}
