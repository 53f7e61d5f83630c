//! Preference-conditioned, plan-level structured pruning.
//!
//! The crate is `no_std` (with `alloc`). The `parallel` feature pulls in
//! `std` and evaluates GRPO group members on a rayon pool; results are
//! identical either way.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod calib;
pub mod diffmath;
pub mod error;
pub mod grpo;
pub mod pareto;
pub mod policy;
pub mod pruner;
pub mod recovery;
pub mod rewards;
pub mod toyvlm;
pub mod types;

pub use error::{Error, Result};
pub use types::{Budget, Preference};
