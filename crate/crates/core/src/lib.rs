//! Federated leverage-score feature selection and subspace training of an
//! invariant variational autoencoder over sparse binary cell-by-feature
//! matrices, with clustering metrics and numerical verifiers for the sampling
//! and loss mathematics.

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod fedsim;
pub mod leverage;
pub mod matrix;
pub mod metrics;
pub mod seed;
pub mod synth;
pub mod vae;
pub mod verify;

pub use error::{Error, Result};
