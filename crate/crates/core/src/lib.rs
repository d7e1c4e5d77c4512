//! Point-pair-feature supervised attention for bidirectional 6D object pose
//! estimation on oriented point clouds.
//!
//! The crate is organised bottom-up:
//!
//! - [`geom`]: rigid transforms and oriented point clouds
//! - [`ppf`]: point-pair features and the dense attention target
//! - [`tensor`]: a small reverse-mode autodiff engine
//! - [`net`]: the pseudo-siamese attention network, prediction heads and losses
//! - [`solver`]: pose recovery from correspondences and pose averaging
//! - [`metrics`]: ADD / ADD-S, threshold accuracy and AUC
//! - [`synth`]: deterministic synthetic shapes and scenes
//! - [`io`]: file formats
//! - [`config`]: flat key = value run configuration
//! - [`experiment`]: train/evaluate runs, the ablation grid and the toy setup
//! - [`gradcheck`]: finite-difference suites for every differentiable op
//! - `cli`: the `attnpose` command line (feature `cli`)

#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod geom;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod net;
pub mod ppf;
pub mod solver;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
