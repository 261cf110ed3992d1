//! Multi-view variational autoencoder for long multi-track symbolic music.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod midi;
pub mod model;
pub mod nn;
pub mod octuple;
pub mod train;
pub mod vae;
pub mod views;

pub use error::{Error, Result};
