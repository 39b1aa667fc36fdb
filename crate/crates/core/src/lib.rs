//! Quasi-geostrophic turbulence lab.
//!
//! Simulates two-layer QG turbulence, extracts subgrid forcing by filtering and
//! coarse-graining, trains all-convolutional closures with optional single-layer
//! transfer learning, and analyses the trained kernels and activations in
//! Fourier space.

pub mod cnn;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod explain;
pub mod fft;
pub mod filtering;
pub mod metrics;
pub mod qg;
pub mod seed;
pub mod specanalysis;

pub use error::{Error, Result};
