//! SPformer: a policy-token transformer for cooperative lane-change decisions,
//! together with the lattice ramp simulator, state encoder and multi-agent
//! DQN trainer it is evaluated with.
//!
//! The crate is `no_std` (it needs `alloc`); file formats, configuration
//! files and the command line live in the companion `spformer-cli` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod agent;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod net;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
