//! Boundary-based outlier synthesis for out-of-distribution detection.
//!
//! The pipeline learns a latent space aligned to fixed class anchors, measures
//! how many signed-gradient steps each training feature needs to change the
//! cosine classifier's decision, pushes the closest ones across the boundary
//! to obtain synthetic outliers, and uses those outliers to regularize an
//! energy-based detector.
//!
//! Data-parallel loops (distance estimation, synthesis, batch scoring) go
//! through [`par::Exec`]; the `parallel` feature backs them with rayon.

pub mod boundary;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod latent;
pub mod nn;
pub mod par;
pub mod rng;
pub mod synthesis;

pub use error::{Error, Result};
