pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod cohort;
pub mod config;
pub mod disentangle;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod progression;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
