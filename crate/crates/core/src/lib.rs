//! Unsupervised person re-identification with grouped attention modules,
//! instance discrimination and agglomerative clustering.

pub mod acl;
pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod idl;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
