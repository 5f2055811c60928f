//! Compare backpropagation against central finite differences for a small
//! fully-connected net and a small convolutional net.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use shaperank::ranktrain::gradient_check;
use shaperank::ArchitectureSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let nets = [
        ("full [27,8,4,1]", ArchitectureSpec::full(3, vec![27, 8, 4, 1])?, 6),
        ("conv R=8 m=4 st=2 C=3", ArchitectureSpec::conv(8, 3, 4, 2, vec![4, 1], vec![4, 1])?, 4),
    ];
    for (label, spec, pairs) in nets {
        let n_params: usize = spec.layers().iter().map(|l| l.weight_len() + l.bias_len()).sum();
        for seed in 0..3 {
            let err = gradient_check(&spec, seed, pairs, 1e-5)?;
            let verdict = if err < 1e-5 { "ok" } else { "MISMATCH" };
            println!("{label} ({n_params} params), seed {seed}: max relative error {err:.2e} {verdict}");
        }
    }
    Ok(())
}
