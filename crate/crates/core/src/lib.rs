//! Prime-feature debiasing with simplex-ETF primes.
//!
//! The crate builds a fixed simplex equiangular tight frame whose vertices
//! stand in for a perfectly learned shortcut, trains an MLP whose classifier
//! sees `[z; m_b]` (learnable feature, prime of the sample's bias attribute),
//! and classifies at test time with the all-zero prime. Neural-Collapse
//! metrics and an exact pulling/forcing gradient decomposition are provided
//! for analysing training dynamics.

mod codec;
pub mod data;
pub mod error;
pub mod etf;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod train;

pub use codec::file_crc32;
pub use error::{Error, Result};
