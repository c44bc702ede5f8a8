//! Significance-guided sparse temporal fusion for center-based BEV detection.
//!
//! Per frame, the most significant heatmap locations are sampled and only
//! their feature patches are kept. A small network predicts where each
//! sample moves by the next frame, and the stored patches are scattered
//! there and merged with the new frame. A synthetic moving-object simulator
//! and a dense brute-force oracle serve as ground truth.
//!
//! Modules follow the data flow: [`sim`] produces frames on a [`grid`],
//! [`sample`] picks the sparse set, [`geonet`] learns displacements, [`fuse`]
//! warps and merges, and [`eval`] scores detection. [`cli`] wires them into
//! the `suit` binary, with [`container`] and [`config`] for I/O.

pub mod cli;
pub mod config;
pub mod container;
pub mod error;
pub mod eval;
pub mod fuse;
pub mod geonet;
pub mod grid;
pub mod sample;
pub mod sim;

pub use error::{Error, Result};
