//! Shape-from-caustics reconstruction of printed glass height fields.
//!
//! The crate bundles a differentiable photon-splatting caustic renderer
//! ([`render`]), a small CPU convolutional network engine for the learned
//! denoiser and update networks ([`neural`]), dataset generators
//! ([`datasets`]), the reconstruction loop with learned and classical update
//! rules ([`reconstruct`]), evaluation metrics ([`metrics`]) and a 2D toy
//! model of the underdetermined inverse problem ([`toy2d`]).
//!
//! Runnable walkthroughs for each capability live in `examples/`; the
//! `caustic-recon` binary exposes the same workflows on the command line.

pub mod cli;
pub mod datasets;
pub mod error;
pub mod heightfield;
pub mod io;
pub mod metrics;
pub mod neural;
pub mod reconstruct;
pub mod render;
pub mod seed;
pub mod toy2d;
pub mod vec3;

pub use error::{Error, Result};
pub use heightfield::{HeightField, LineFieldRanges, LineSpec};
pub use render::{Irradiance, SceneParams};
