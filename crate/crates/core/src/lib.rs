//! Importance-aware machine unlearning for trajectory-user linking (TUL).
//!
//! The crate is organised as a pipeline:
//!
//! - [`geo`] turns raw GPS points into hexagon-token sequences.
//! - [`corpus`] owns labelled trajectories, the train/test split, deletion
//!   requests and the forget/retain partition.
//! - [`importance`] computes data-driven importance scores per trajectory.
//! - [`nn`] is a small GRU classifier with hand-written backpropagation.
//! - [`unlearn`] implements the importance-weighted teacher-student method and
//!   the baseline unlearning procedures.
//! - [`eval`] computes UA/RA/TA, membership-inference AUC and speedup, and
//!   renders comparison tables.
//! - [`bench`] runs the full (method x strategy x fraction x seed) matrix.

pub mod bench;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod geo;
pub mod importance;
pub mod io;
pub mod nn;
pub mod seed;
pub mod unlearn;

pub use error::{Error, ErrorKind, Result};
