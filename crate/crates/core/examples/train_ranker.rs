//! Train a ranking network on synthetic preferences whose hidden "taste" is
//! shape volume, then measure held-out accuracy.
//!
//! ```text
//! cargo run --release --example train_ranker
//! ```

use std::collections::BTreeMap;

use shaperank::dataset::{disjoint_pairs, oracle_label, responses_to_pairs, synth_shapes, Agreement, LatentScore, ShapeFamily};
use shaperank::ranktrain::{select_learning_rate, train, validation_accuracy, DEFAULT_ALPHA_GRID};
use shaperank::{ArchitectureSpec, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let shapes = synth_shapes(40, 10, ShapeFamily::Union, 3)?;
    let grids: BTreeMap<_, _> = shapes.iter().map(|s| (s.grid.shape_id().to_string(), s.grid.clone())).collect();
    let latent: BTreeMap<_, _> = grids.iter().map(|(id, g)| (id.clone(), LatentScore::Volume.evaluate(g))).collect();
    let ids: Vec<String> = grids.keys().cloned().collect();

    let (train_pairs, val_pairs) = disjoint_pairs(&ids, 800, 100, 3)?;
    let train_set = responses_to_pairs(&oracle_label(&train_pairs, &latent, Agreement::NoiseFree, 1, 3)?, &grids)?;
    let val_set = responses_to_pairs(&oracle_label(&val_pairs, &latent, Agreement::NoiseFree, 1, 4)?, &grids)?;

    let spec = ArchitectureSpec::full(10, vec![1000, 64, 16, 1])?;
    let config = TrainConfig { iterations: 150, ..TrainConfig::default() };

    let selection = select_learning_rate(&spec, &train_set, &val_set, &DEFAULT_ALPHA_GRID, &config)?;
    for c in &selection.candidates {
        match c.accuracy {
            Some(acc) => println!("alpha {:e}: validation accuracy {acc:.3}", c.alpha),
            None => println!("alpha {:e}: diverged", c.alpha),
        }
    }
    println!("selected alpha {:e}", selection.best);

    // Retrain with the chosen rate to get the per-iteration log.
    let config = TrainConfig { alpha: selection.best, ..config };
    let init = shaperank::net::init_params(&spec, config.seed);
    let (params, history) = train(init, &train_set, &config, Some(&val_set))?;
    for e in history.entries.iter().filter(|e| e.iteration % 30 == 0) {
        println!(
            "iter {:>3}: loss {:>10.3} (data {:>10.3}, reg {:>7.3}), val full {:.3}",
            e.iteration,
            e.loss.total,
            e.loss.data,
            e.loss.reg,
            e.val_full.unwrap_or(f64::NAN)
        );
    }
    let acc = validation_accuracy(&params, &val_set, config.filter_fraction)?;
    println!(
        "final: full {:.3}, filtered {:.3} on {}/{} confident pairs",
        acc.full,
        acc.filtered.unwrap_or(f64::NAN),
        acc.n_kept,
        acc.n_total
    );
    Ok(())
}
