//! Parse an OBJ mesh, frame it in the canonical cube, and voxelize it.
//!
//! ```text
//! cargo run --example voxelize_mesh
//! ```

use shaperank::geometry::{parse_obj, DEFAULT_PADDING};
use shaperank::voxel::{read_grid, write_grid};
use shaperank::{normalize_mesh, voxelize, FillMode};

// A square-based pyramid, deliberately off-centre and not unit-sized.
const PYRAMID: &str = "\
# pyramid
v 10 0 10
v 14 0 10
v 14 0 14
v 10 0 14
v 12 6 12
f 1 2 3
f 1 3 4
f 1 2 5
f 2 3 5
f 3 4 5
f 4 1 5
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mesh = parse_obj(PYRAMID, "pyramid")?;
    let normalized = normalize_mesh(&mesh, DEFAULT_PADDING)?;
    let bb = normalized.bounds().expect("non-empty mesh");
    println!("normalized bounds: min {:.3?} max {:.3?}", bb.min, bb.max);

    let surface = voxelize(&normalized, 15, FillMode::Surface)?;
    let solid = voxelize(&normalized, 15, FillMode::Solid)?;
    println!("R=15 surface cells: {}, solid cells: {}", surface.occupied_count(), solid.occupied_count());

    // Horizontal slices through the solid grid, bottom to top.
    let r = solid.resolution();
    for y in (0..r).step_by(4) {
        println!("slice y={y}:");
        for z in 0..r {
            let row: String = (0..r).map(|x| if solid.get(x, y, z) { '#' } else { '.' }).collect();
            println!("  {row}");
        }
    }

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("pyramid.srvox");
    write_grid(&solid, &path)?;
    let back = read_grid(&path)?;
    assert_eq!(back, solid);
    println!("round-tripped {} bytes through {}", std::fs::metadata(&path)?.len(), path.display());
    Ok(())
}
