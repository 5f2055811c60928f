//! Two-sample t-tests: from published summary statistics, and from raw
//! per-shape scores split by a geometric feature.
//!
//! ```text
//! cargo run --example feature_ttest
//! ```

use shaperank::analysis::{ttest_equal_var, ttest_samples, GroupSummary};
use shaperank::dataset::{synth_shapes, LatentScore, ShapeFamily};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let symmetric = GroupSummary { mean: 0.2031, std: 0.2286, n: 67 };
    let asymmetric = GroupSummary { mean: -0.0598, std: 0.2308, n: 11 };
    println!("summary statistics: {}", ttest_equal_var(symmetric, asymmetric)?);

    // Score = smoothness; groups = mirror-symmetric or not.
    let shapes = synth_shapes(80, 12, ShapeFamily::Union, 2)?;
    let (mut sym, mut asym) = (Vec::new(), Vec::new());
    for s in &shapes {
        let score = LatentScore::Smoothness.evaluate(&s.grid);
        if LatentScore::MirrorSymmetry.evaluate(&s.grid) > 0.6 {
            sym.push(score);
        } else {
            asym.push(score);
        }
    }
    let result = ttest_samples(&sym, &asym)?;
    println!(
        "smoothness, symmetric (n={}, mean {:.4}) vs asymmetric (n={}, mean {:.4}): {result}",
        result.group1.n, result.group1.mean, result.group2.n, result.group2.mean
    );
    let mut csv = Vec::new();
    result.write_csv(&mut csv)?;
    print!("{}", String::from_utf8(csv)?);
    Ok(())
}
