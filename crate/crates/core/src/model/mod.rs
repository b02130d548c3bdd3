//! Small pre-LayerNorm transformer with optional LoRA adapters on the
//! attention projections.

mod backbone;
mod lm;
mod lora;
pub mod pretrain;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backbone::{Backbone, KvCache};
pub use lm::TransformerLm;
pub use lora::{lora_merge_view, LoraAdapter, Projection};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_position: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_position: 192,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= 4 {
            return Err(Error::Config(format!("vocab_size {} leaves no room for words", self.vocab_size)));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_position == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Checks that prompts and completions fit the position table.
    pub fn check_lengths(&self, max_prompt: usize, max_completion: usize) -> Result<()> {
        if max_prompt + max_completion > self.max_position {
            return Err(Error::Config(format!(
                "max_position {} is shorter than {max_prompt} prompt + {max_completion} completion tokens",
                self.max_position
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 16,
            alpha: 32.0,
            dropout: 0.05,
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("LoRA dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Which attention projection an adapter is attached to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Target {
    Query,
    Key,
    Value,
    Output,
}

impl Target {
    pub const ALL: [Target; 4] = [Target::Query, Target::Key, Target::Value, Target::Output];

    pub fn as_str(self) -> &'static str {
        match self {
            Target::Query => "q",
            Target::Key => "k",
            Target::Value => "v",
            Target::Output => "o",
        }
    }
}
