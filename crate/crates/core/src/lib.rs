//! lp-constrained softmax classifiers on a small reverse-mode autodiff
//! engine, with the synthetic-data experiments that probe them.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fsutil;
pub mod gradcheck;
pub mod lpnorm;
pub mod metrics;
pub mod models;
pub mod render;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
