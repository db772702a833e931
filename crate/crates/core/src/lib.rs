//! Look-Think-Answer reasoning over point clouds at desk scale.
//!
//! The pipeline: [`geometry`] canonicalizes clouds and builds the 8-view rig,
//! [`encoders`] turn clouds and splat views into tokens, [`fusion`] runs
//! geometry-guided cross-modal attention and assembles the fused sequence,
//! [`reasoner`] decodes a rationale then an answer, [`objectives`] defines the
//! training losses and stage schedule, [`datagen`] builds the synthetic
//! benchmark and [`evalverify`] scores it.

pub mod datagen;
pub mod encoders;
pub mod error;
pub mod evalverify;
pub mod fusion;
pub mod geometry;
pub mod gradsuite;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod reasoner;
pub mod train;

pub use error::{Error, Result};
