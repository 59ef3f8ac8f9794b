//! Viscous rectified flow with noise optimization on small synthetic
//! problems: a reverse-mode autodiff engine, the networks and losses,
//! samplers, diagnostics, and reproducible experiment pipelines.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod nets;
pub mod plot;
pub mod report;
pub mod rng;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
