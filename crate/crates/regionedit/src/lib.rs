//! Region- and instruction-aware adapters for a frozen toy joint-attention
//! diffusion transformer, with a co-trained mask predictor, a procedural
//! latent-edit corpus, and the training/evaluation harness around them.

pub mod adapter;
pub mod backbone;
pub mod condenc;
pub mod harness;
pub mod config;
mod error;
pub mod latent;
pub mod maskpred;
pub mod model;
pub mod morph;
pub mod nn;
pub mod objectives;
pub mod synthdata;

pub use error::{Error, Result};
