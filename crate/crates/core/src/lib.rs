//! Task-aware architecture ranking.
//!
//! A ranker `v(u, z)` scores a continuous architecture encoding `u` given
//! deep-set meta-features `z` of a task's samples. It is trained from a
//! database of measured child-model performances with pairwise ranking
//! losses, then used for gradient-ascent architecture search on unseen
//! tasks. The [`eval`] module runs the leave-one-out protocol.

pub mod child;
pub mod error;
pub mod eval;
pub mod expdb;
pub mod losses;
pub mod numerics;
pub mod ranker;
pub mod search;
pub mod seed;
pub mod tasks;

pub use error::{Error, Result};
