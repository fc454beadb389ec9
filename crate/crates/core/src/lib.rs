//! Weakly-supervised point cloud segmentation with region-wise masking and
//! masked consistency training.
//!
//! The crate is organised bottom-up:
//!
//! - [`pointcloud`]: the point cloud data model, scene files, voxelization and
//!   weak label sampling.
//! - [`masking`]: point-wise and region-wise mask construction.
//! - [`augment`]: the random similarity transforms and color jitter used for
//!   the two consistency branches.
//! - [`autodiff`]: a small define-by-run reverse-mode autodiff engine.
//! - [`model`]: a weight-shared k-NN aggregation network.
//! - [`losses`]: supervised cross-entropy, Jensen-Shannon consistency and the
//!   masked consistency objective.
//! - [`trainer`]: the per-scene training step and the epoch loop.
//! - [`eval`]: IoU metrics and masked evaluation.
//! - [`synth`]: procedural indoor scenes with known ground truth.
//! - [`experiment`]: multi-seed ablation cells shared by the CLI and tests.
//! - [`config`] and [`cli`]: the `cpcm` command line front end.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod knn;
pub mod losses;
pub mod masking;
pub mod model;
pub mod pointcloud;
pub mod seed;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
