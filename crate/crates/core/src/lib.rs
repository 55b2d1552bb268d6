//! Occupancy fields end to end: learn a continuous occupancy decoder from
//! sampled points, extract watertight meshes from any occupancy field with
//! multiresolution isosurface extraction, refine them with first and second
//! order field information, and score the results.

pub mod error;
pub mod fields;
pub mod geometry;
pub mod marching_cubes;
pub mod mesh_refine;
pub mod metrics;
pub mod mise;
pub mod neural;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
