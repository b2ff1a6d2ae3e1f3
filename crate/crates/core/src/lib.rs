//! Sequential recommendation engine built on a selective state-space
//! sequence encoder, with attention / GRU / linear-attention baselines, a
//! leave-one-out training and evaluation pipeline, and a scaling benchmark
//! harness.

pub mod baselines;
pub mod model;
pub mod numerics;
pub mod ssm;

pub use numerics::NumError;

use thiserror::Error;

/// Crate-wide error type for the pipeline layers above `numerics`.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("training error: {0}")]
    Train(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
