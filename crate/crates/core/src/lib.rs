//! Evaluation toolkit for perturbation-screen embeddings: data bundles,
//! preprocessing, baseline embedders, post-processing and the metric suite.

pub mod data;
pub mod embed;
pub mod error;
pub mod harness;
pub mod knn;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod oracle;
pub mod postprocess;
pub mod preprocess;
pub mod synth;

pub use error::{Error, Result};
