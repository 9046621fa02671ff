//! Online continual learning engine.
//!
//! A one-pass class-incremental stream ([`datastream`]) feeds a replay-based
//! learner built from stacked experts ([`network`]). Each expert is supervised
//! with a task-separated cross-entropy plus a supervised contrastive term, and
//! the deepest expert is pulled towards the normalized features of the shallow
//! ones ([`losses`]). [`trainer`] drives MOSE and the ER / SCR baselines and
//! [`eval`] produces the accuracy matrix, ACC / AF and the buffer overfitting
//! factor.

pub mod augment;
pub mod datastream;
pub mod error;
pub mod eval;
pub mod losses;
pub mod memory;
pub mod network;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
