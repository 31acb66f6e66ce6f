//! Unsupervised adversarial density adaption for object counting.
//!
//! The crate is organized bottom-up: a dense `f64` tensor ([`grid`]), raw
//! kernels, a reverse-mode [`tape`], then density ground truth, patch
//! pyramids, the two networks, losses, optimizers, metrics, synthetic data
//! and the two-stage trainer.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod density;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod imageio;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod pyramid;
pub mod synth;
pub mod tape;
pub mod train;

pub use checkpoint::{Checkpoint, NamedArray};
pub use config::TrainConfig;
pub use dataset::Sample;
pub use density::{generate_density, DensityMap, PointAnnotation, SigmaMode};
pub use error::{CodaError, Result};
pub use grid::DenseGrid;
pub use metrics::EvalReport;
pub use nets::{CountingNetConfig, DiscriminatorConfig, ModelParams};
pub use tape::{Tape, Var};
