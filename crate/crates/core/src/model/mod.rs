//! Encoders, decoders, matcher, parameter storage and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod network;
pub mod params;
pub mod pretrained;

pub use checkpoint::{Checkpoint, TrainingState};
pub use config::{ModelConfig, Variant};
pub use network::{gru_sequence, gru_step, match_probability, Encoded, GruVars, LatentGaussian, Model, Session, Side};
pub use params::ParamStore;
