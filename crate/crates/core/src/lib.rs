//! Pretrain a decay-based bidirectional recurrent imputer on multivariate
//! clinical time series, then fine-tune downstream classifiers on its
//! imputations and hidden states with the imputer either frozen or unfrozen.
//!
//! Stages are independent: every stage reads its inputs from disk and writes
//! its outputs under the run's output directory, so imputation quality and
//! classifier quality can be assessed separately.

pub mod dataset;
pub mod classifiers;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod imputer;
pub mod masking;
pub mod nn;
pub mod numerics;
pub mod rng;
pub mod store;
pub mod training;

pub use error::{Error, Result};
