//! Synthetic-data audit pipeline: procedural corpora, conditional GAN,
//! multi-task classifier, membership-inference attacks and audit reports.

pub mod attacks;
pub mod audit;
pub mod corpus;
pub mod downstream;
pub mod error;
pub mod experiment;
pub mod fsutil;
pub mod generative;
pub mod metrics;
pub mod models;
pub mod serde_util;

pub use error::{Error, Result};
