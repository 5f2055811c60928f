//! Do two groups of workers agree on which shape wins each pair?
//!
//! ```text
//! cargo run --example consistency_analysis
//! ```

use std::collections::BTreeMap;

use shaperank::dataset::{
    consistency, consistency_from_shares, oracle_label, random_pairs, random_worker_split, synth_shapes, Agreement,
    LatentScore, ShapeFamily, Shares,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Per-pair percentage splits, e.g. from a survey summary table.
    let rows = [
        ("pair-1", (20.0, 80.0), (46.7, 53.3)),
        ("pair-2", (33.3, 66.7), (73.3, 26.7)),
        ("pair-3", (50.0, 50.0), (60.0, 40.0)),
        ("pair-4", (90.0, 10.0), (70.0, 30.0)),
    ];
    let report = consistency_from_shares(
        rows.iter()
            .map(|(id, (a1, b1), (a2, b2))| (id.to_string(), Shares { a: *a1, b: *b1 }, Shares { a: *a2, b: *b2 })),
    );
    for row in &report.rows {
        println!("{row:?}");
    }
    println!("table: {}/{} pairs match", report.matches(), report.total());

    // Ten simulated workers per pair with noisy agreement, split at random
    // into two groups of workers.
    let shapes = synth_shapes(20, 8, ShapeFamily::Ellipsoid, 5)?;
    let latent: BTreeMap<_, _> =
        shapes.iter().map(|s| (s.grid.shape_id().to_string(), LatentScore::Volume.evaluate(&s.grid))).collect();
    let ids: Vec<String> = latent.keys().cloned().collect();
    for k in [5.0, 20.0, 80.0] {
        let responses = oracle_label(&random_pairs(&ids, 40, 5), &latent, Agreement::Logistic { steepness: k }, 10, 5)?;
        let (g1, g2) = random_worker_split(&responses, 9)?;
        let report = consistency(&g1, &g2)?;
        println!("steepness {k:>4}: random worker groups agree on {:.0}% of pairs", 100.0 * report.match_rate());
    }
    Ok(())
}
