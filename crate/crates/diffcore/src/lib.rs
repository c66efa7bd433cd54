//! Deterministic differentiable-compute substrate.
//!
//! A small closed set of tensor ops recorded on a [`Graph`] tape, exact
//! reverse-mode gradients, a central-difference [`grad_check`] oracle,
//! AdamW, and a single-file checkpoint format. Everything is single-threaded
//! and reduces in fixed index order, so identical inputs give bitwise
//! identical outputs.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod optim;
mod params;
mod tensor;

pub use error::{DiffError, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig, StepStats};
pub use params::{ParamEntry, ParamGrads, ParamId, ParamStore};
pub use tensor::{fnv1a, lit, seeded_init, Float, Init, Tensor};
