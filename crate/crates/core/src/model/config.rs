use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which network the config builds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Two encoders and the matcher; no sampling, no decoders.
    DualEncoders,
    /// Each latent reconstructs its own text.
    DualVae,
    /// Each latent reconstructs the paired text.
    CrossVae,
}

impl Variant {
    pub fn has_decoders(self) -> bool {
        !matches!(self, Variant::DualEncoders)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::DualEncoders => "dual_encoders",
            Variant::DualVae => "dual_vae",
            Variant::CrossVae => "cross_vae",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub attention_hops: usize,
    pub attention_dim: usize,
    pub variant: Variant,
    /// Maximum tokens per sequence including EOS.
    pub max_len: usize,
}

impl ModelConfig {
    /// Small dimensions that train on a laptop CPU.
    pub fn desk(vocab_size: usize, variant: Variant) -> Self {
        Self {
            vocab_size,
            embed_dim: 64,
            hidden_dim: 64,
            latent_dim: 32,
            attention_hops: 4,
            attention_dim: 64,
            variant,
            max_len: 64,
        }
    }

    /// Full-size dimensions (768-unit GRUs, 512-dim latents).
    pub fn full(vocab_size: usize, variant: Variant) -> Self {
        Self {
            embed_dim: 768,
            hidden_dim: 768,
            latent_dim: 512,
            ..Self::desk(vocab_size, variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("latent_dim", self.latent_dim),
            ("attention_hops", self.attention_hops),
            ("attention_dim", self.attention_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        if self.vocab_size <= crate::data::vocab::RESERVED {
            return Err(Error::Config("model.vocab_size must exceed the reserved ids".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("model.max_len must be at least 2".into()));
        }
        Ok(())
    }
}
