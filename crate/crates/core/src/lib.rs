//! Soft-label emotion classification with a dual-ambiguity objective.
//!
//! Three heads (audio, text, gated fusion) predict class distributions from
//! precomputed embeddings. One head is the student; it is fit to the rater
//! distribution and, through reliability weights, to the other two heads.

pub mod autodiff;
pub mod dataio;
pub mod distlib;
pub mod error;
pub mod evalreport;
pub mod losses;
pub mod model;
pub mod trainer;

pub use error::{AmberError, Result};
