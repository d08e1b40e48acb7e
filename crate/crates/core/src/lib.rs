//! Crossing variational autoencoders for sentence-level answer retrieval.
//!
//! Two GRU encoders map questions and answers to Gaussian latents; each
//! latent is decoded into the *paired* text (answer from question, question
//! from answer) while a cosine matcher is trained on in-batch negatives.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numeric;
pub mod objective;
pub mod project;
pub mod rng;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
