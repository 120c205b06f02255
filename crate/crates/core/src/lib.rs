//! Confidence-based routing between small and large models.
//!
//! A sample stays with a cheap small model when that model is confident
//! enough and goes to the expensive large model otherwise. The large model's
//! answers can be distilled back into a copy of the small model so fewer
//! samples need it later.

pub mod api;
pub mod backends;
pub mod distillation;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod prob;
pub mod prompting;
pub mod router;
pub mod seed;

pub use error::{ErrorKind, Result, ShuntError};
