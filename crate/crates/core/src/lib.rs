//! Masked video autoencoder with frame-concatenated cross-attention decoding,
//! trained on CPU in f64, plus label-propagation segmentation and J/F scoring.

pub mod cli;
pub mod config;
pub mod dataio;
pub mod error;
pub mod experiment;
pub mod labelprop;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod probe;
pub mod selftest;
pub mod training;

pub use error::{Error, Result};
