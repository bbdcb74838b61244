//! Multi-order correlation heatmap regression for facial landmarks.

pub mod autodiff;
pub mod backend;
pub mod channel;
pub mod cli;
pub mod config;
pub mod covariance;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod heatmap;
pub mod landmarks;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod search;
pub mod spatial;
pub mod tensor;
pub mod verify;

pub use autodiff::{Graph, Var};
pub use backend::{Backend, Eager};
pub use error::{Error, Result};
pub use tensor::Tensor;
