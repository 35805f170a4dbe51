//! Planning and simulation for robotic assembly of compounded lattice blocks.
//!
//! The pipeline runs mesh -> voxel grid -> block tiling -> build plan ->
//! discrete-event simulation, and the twin server streams the simulation to
//! remote clients.

// `!(x > 0.0)` is deliberate: it rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod fixtures;
pub mod mesh;
pub mod path;
pub mod sequencer;
pub mod simulator;
pub mod study;
pub mod tiler;
pub mod twin;
pub mod voxel;
