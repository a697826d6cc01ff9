//! Teacher-student domain adaptation for a compact two-stage object detector, trained and
//! evaluated on procedurally generated shape scenes.

pub mod adversary;
pub mod augment;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
