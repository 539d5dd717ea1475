//! Training-free visual-token compression driven by CLS attention.
//!
//! The crate scores visual tokens from a vision encoder's CLS attention,
//! ensembles scores across layers, prunes to a budget, and measures how well
//! encoder-side importance agrees with decoder-side importance. A toy
//! transformer simulator produces attention traces for end-to-end checks.

pub mod cost;
pub mod diagnostics;
pub mod error;
pub mod numeric;
pub mod scoring;
pub mod selection;
pub mod sim;
pub mod trace;

pub use error::{Error, Result};
