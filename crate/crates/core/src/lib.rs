//! Dynamic diffusion convolutional recurrent network for multistep WAN
//! traffic forecasting on a graph of sites.
//!
//! The pipeline runs from raw interface counters ([`ingest`]) through graph
//! construction ([`graph`]), the recurrent model ([`model`]) and its trainer
//! ([`training`]) to forecast evaluation ([`evaluation`]). Reference
//! forecasters live in [`baselines`] and a synthetic traffic generator in
//! [`synth`].

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod ingest;
pub mod manifest;
pub mod matrix;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;
