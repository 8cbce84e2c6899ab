//! Extractive question answering with a neural bag-of-words baseline,
//! FastQA and FastQAExt, built on a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod bow;
pub mod checks;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod fastqa;
pub mod features;
pub mod fusion;
pub mod layers;
pub mod model;
pub mod params;
pub mod synth;
pub mod text;
pub mod train;
pub mod wiq;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ModelKind};
