//! Federated domain generalization for retrieval with domain and feature
//! hallucination, simulated in-process on synthetic multi-domain data.

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod federation;
pub mod hallucinate;
pub mod losses;
pub mod matrix;
pub mod model;
pub mod numerics;
pub mod stats;
mod wire;

pub use error::{Error, Result};
pub use matrix::Matrix;
