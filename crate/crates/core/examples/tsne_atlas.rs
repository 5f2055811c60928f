//! Embed a shape collection with t-SNE and draw a score-scaled SVG atlas.
//!
//! ```text
//! cargo run --release --example tsne_atlas
//! ```

use std::collections::BTreeMap;

use shaperank::dataset::{synth_shapes, LatentScore, ShapeFamily};
use shaperank::viz::{atlas, emit_svg, silhouette, tsne, Canvas, SilhouetteRenderer, TsneConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Two families, so the embedding has visible structure.
    let mut shapes = synth_shapes(30, 10, ShapeFamily::Box, 1)?;
    shapes.extend(synth_shapes(30, 10, ShapeFamily::Ellipsoid, 2)?);
    let ids: Vec<String> = shapes.iter().map(|s| s.grid.shape_id().to_string()).collect();
    let labels: Vec<usize> = shapes.iter().map(|s| (s.family == ShapeFamily::Ellipsoid) as usize).collect();
    let points: Vec<Vec<f64>> = shapes.iter().map(|s| s.grid.to_input().0).collect();

    let config = TsneConfig { perplexity: 10.0, ..TsneConfig::default() };
    let embedding = tsne(&points, &config)?;
    println!(
        "t-SNE: {} iterations, final KL {:.4}, family silhouette {:.3}",
        embedding.iterations,
        embedding.kl,
        silhouette(&embedding.coords, &labels)
    );

    // Icon size follows a score; here the smoothness functional stands in.
    let scores: Vec<f64> = shapes.iter().map(|s| LatentScore::Smoothness.evaluate(&s.grid)).collect();
    let layout = atlas(&ids, &embedding.coords, &scores, 20.0, 60.0, Canvas::default())?;
    let renderer = SilhouetteRenderer {
        grids: shapes.iter().map(|s| (s.grid.shape_id().to_string(), s.grid.clone())).collect::<BTreeMap<_, _>>(),
    };
    let svg = emit_svg(&layout, &renderer);
    let path = std::env::temp_dir().join("shaperank-atlas.svg");
    std::fs::write(&path, &svg)?;
    println!("wrote {} ({} bytes, {} icons)", path.display(), svg.len(), layout.items.len());
    Ok(())
}
