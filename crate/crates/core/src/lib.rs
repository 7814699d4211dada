//! Full-duplex streaming inference for selective state-space sequence models.

pub mod error;
pub mod init;
pub mod module;
pub mod numerics;
pub mod ssm;
pub mod blocks;
pub mod adapter;
pub mod lm;
pub mod checkpoint;
pub mod duplex;
pub mod training;
pub mod harness;

pub use error::{Error, Result};
