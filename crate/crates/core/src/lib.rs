//! Class-agnostic counting with a repetition-aware proposal network and an
//! exemplar-conditioned density network.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod density;
pub mod dpn;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod nn;
pub mod pipeline;
pub mod reprpn;
pub mod teachers;
pub mod train;

pub use error::{Error, Result};
