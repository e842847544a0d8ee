//! Body part regression: a self-supervised slice scorer for CT volumes and
//! the tooling around it (training, evaluation, post-processing and
//! applications such as body part tagging and cropping).

pub mod apps;
pub mod augment;
pub mod cli;
pub mod error;
pub mod eval;
pub mod landmarks;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod par;
pub mod phantom;
pub mod plot;
pub mod postprocess;
pub mod sampling;
pub mod stats;
pub mod train;
pub mod volume;

pub use error::{BpregError, Result};
