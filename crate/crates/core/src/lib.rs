//! N-VAE: a variational autoencoder whose latent space is split into
//! class-dependent blocks and a shared block, trained with a
//! classification-augmented evidence lower bound.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod distributions;
pub mod error;
pub mod image;
pub mod model;
pub mod optim;
pub mod rng;
pub mod special;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
