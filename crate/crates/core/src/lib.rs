//! Cross-resolution relational contrastive distillation.
//!
//! A high-resolution teacher and a low-resolution student are tied together
//! by learned relation vectors: the relation between two teacher embeddings
//! supervises the relation between a teacher embedding and a student
//! embedding through a contrastive critic. The crate contains the relation
//! heads, critic, objectives, negative bank, data pipeline, trainer and the
//! evaluation protocols, all in `f64` on the CPU.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod critic;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod negatives;
pub mod nn;
pub mod relation;
pub mod trainer;

pub use error::{Error, Result};
