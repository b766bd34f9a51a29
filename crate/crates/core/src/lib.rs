//! Referring-segmentation network and the tooling around it: synthetic data,
//! training, evaluation and checkpoints.

pub mod cfm;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod model;
pub mod msrc;
pub mod nn;
pub mod optim;
pub mod params;
pub mod reference;
pub mod swin;
pub mod synth;
pub mod text;
pub mod train;
pub mod verify;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use params::ParamStore;
