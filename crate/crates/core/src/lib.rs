//! Curvature diagnostics for single-output feedforward networks.

pub mod cli;
pub mod config;
pub mod curvature;
pub mod diff;
pub mod eigen;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod loss;
pub mod network;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
