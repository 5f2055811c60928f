//! Perceptual aesthetics scores for 3D shapes, learned from pairwise human
//! preferences.
//!
//! The pipeline runs from triangle meshes to a trained ranking network:
//!
//! * [`geometry`] loads Wavefront OBJ meshes and frames them in a canonical cube.
//! * [`voxel`] turns normalized meshes into binary occupancy grids.
//! * [`net`] holds the fully-connected and 3D-convolutional scoring networks.
//! * [`ranktrain`] trains a network from preferred/other pairs with a squared
//!   hinge ranking loss and full-batch gradient descent.
//! * [`dataset`] builds crowd tasks, checks response consistency, and produces
//!   synthetic oracle data.
//! * [`analysis`] ranks collections and runs the statistical studies.
//! * [`viz`] embeds shapes with t-SNE and lays out score-scaled atlases.
//! * [`server`] is the HTTP preference-collection service.
//! * [`cli`] wires everything into the `shaperank` command.
//!
//! Runnable walkthroughs of each capability live in `examples/`; run them with
//! `cargo run --example <name>`.

pub mod analysis;
pub mod cli;
pub mod dataset;
pub mod geometry;
pub mod net;
pub mod ranktrain;
pub mod server;
pub mod stats;
pub mod viz;
pub mod voxel;

pub use geometry::{load_mesh, normalize_mesh, Mesh};
pub use net::{ArchitectureSpec, NetworkParams};
pub use ranktrain::{PairSet, TrainConfig};
pub use voxel::{voxelize, FillMode, VoxelGrid};
