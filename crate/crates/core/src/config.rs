//! Run configuration: every stage's settings in one TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::grpo::{GrpoConfig, Preset};
use crate::model::pretrain::PretrainConfig;
use crate::model::{LoraConfig, ModelConfig};
use crate::rewards::RewardConfig;
use crate::rng;
use crate::sampling::SamplerConfig;
use crate::scorer::ClassifierConfig;
use crate::text::{AugmentationConfig, DEFAULT_VOCAB_CAP};

/// Transformer shape; the vocabulary size comes from the data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_position: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::new(0);
        ModelShape {
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            max_position: c.max_position,
        }
    }
}

impl ModelShape {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_position: self.max_position,
        }
    }
}

/// Artifact locations. Relative paths resolve against `out_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out_dir: PathBuf,
    pub dataset: PathBuf,
    pub prompts: PathBuf,
    /// Prompts for best-checkpoint selection during GRPO.
    pub validation_prompts: PathBuf,
    pub eval_prompts: PathBuf,
    pub vocabulary: PathBuf,
    pub base_model: PathBuf,
    pub classifier: PathBuf,
    /// Directory for GRPO logs and checkpoints.
    pub grpo_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out_dir: PathBuf::from("runs/default"),
            dataset: PathBuf::from("corpus.jsonl"),
            prompts: PathBuf::from("prompts.jsonl"),
            validation_prompts: PathBuf::from("validation_prompts.jsonl"),
            eval_prompts: PathBuf::from("eval_prompts.jsonl"),
            vocabulary: PathBuf::from("vocab.json"),
            base_model: PathBuf::from("base.ckpt"),
            classifier: PathBuf::from("classifier.ckpt"),
            grpo_dir: PathBuf::from("grpo"),
        }
    }
}

impl Paths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_records: usize,
    pub n_prompts: usize,
    pub n_eval_prompts: usize,
    pub n_validation_prompts: usize,
    pub vocab_cap: usize,
    /// Adds one augmented copy of every training prompt.
    pub augment_prompts: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_records: 2000,
            n_prompts: 500,
            n_eval_prompts: 100,
            n_validation_prompts: 50,
            vocab_cap: DEFAULT_VOCAB_CAP,
            augment_prompts: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub samples_per_prompt: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples_per_prompt: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    pub paths: Paths,
    pub data: DataConfig,
    pub augmentation: AugmentationConfig,
    pub model: ModelShape,
    pub pretrain: PretrainConfig,
    pub classifier: ClassifierConfig,
    pub lora: LoraConfig,
    pub sampler: SamplerConfig,
    pub rewards: RewardConfig,
    pub grpo: GrpoConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::for_preset(Preset::Methods, 0)
    }
}

impl RunConfig {
    pub fn for_preset(preset: Preset, seed: u64) -> Self {
        let mut c = RunConfig {
            seed,
            preset,
            paths: Paths::default(),
            data: DataConfig::default(),
            augmentation: AugmentationConfig::default(),
            model: ModelShape::default(),
            pretrain: PretrainConfig::default(),
            classifier: ClassifierConfig::default(),
            lora: LoraConfig::default(),
            sampler: SamplerConfig::default(),
            rewards: RewardConfig::default(),
            grpo: GrpoConfig::default(),
            eval: EvalConfig::default(),
        };
        c.apply_preset(preset);
        c.set_seed(seed);
        c
    }

    /// Overwrites the hyperparameters on which the two presets differ.
    pub fn apply_preset(&mut self, preset: Preset) {
        let g = preset.grpo();
        let l = preset.lora();
        self.preset = preset;
        self.grpo.learning_rate = g.learning_rate;
        self.grpo.batch_prompts = g.batch_prompts;
        self.grpo.grad_accum_steps = g.grad_accum_steps;
        self.lora.rank = l.rank;
        self.lora.alpha = l.alpha;
    }

    /// Derives every stage seed from `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        let s = |k: u64| rng::derive_seed(seed, &[k]) >> 1;
        self.seed = seed;
        self.augmentation.rng_seed = s(1);
        self.pretrain.seed = s(2);
        self.classifier.seed = s(3);
        self.sampler.rng_seed = s(4);
        self.grpo.seed = s(5);
        self.eval.seed = s(6);
    }

    pub fn validate(&self) -> Result<()> {
        self.model.with_vocab(DEFAULT_VOCAB_CAP).validate()?;
        self.model
            .with_vocab(DEFAULT_VOCAB_CAP)
            .check_lengths(self.grpo.max_prompt_len, self.sampler.max_new_tokens)?;
        self.augmentation.validate()?;
        self.classifier.validate()?;
        self.lora.validate()?;
        self.sampler.validate()?;
        self.rewards.validate()?;
        self.grpo.validate()?;
        if self.data.n_records < 2 || self.data.n_prompts == 0 {
            return Err(Error::Config("data needs at least 2 records and 1 prompt".into()));
        }
        if self.eval.samples_per_prompt == 0 {
            return Err(Error::Config("eval.samples_per_prompt must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a possibly partial file. Missing fields take the defaults of
    /// the preset and seed named in the file, so `preset = "experiments"`
    /// alone selects that preset's hyperparameters and stage seeds follow
    /// `seed` unless given explicitly.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let preset = match user.get("preset") {
            None => Preset::default(),
            Some(v) => v
                .as_str()
                .and_then(Preset::parse)
                .ok_or_else(|| Error::Config(format!("unknown preset {v}")))?,
        };
        let seed = match user.get("seed") {
            None => 0,
            Some(v) => v
                .as_integer()
                .and_then(|i| u64::try_from(i).ok())
                .ok_or_else(|| Error::Config(format!("seed must be a non-negative integer, got {v}")))?,
        };
        let mut merged = toml::Table::try_from(RunConfig::for_preset(preset, seed))
            .map_err(|e| Error::Config(e.to_string()))?;
        overlay(&mut merged, user);
        merged.try_into().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fsutil::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_toml()?.as_bytes())
    }
}

fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => overlay(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        for preset in [Preset::Methods, Preset::Experiments] {
            let mut c = RunConfig::for_preset(preset, 42);
            c.grpo.max_steps = Some(50);
            c.rewards.noise_sigma = 0.1 + 0.2;
            let text = c.to_toml().unwrap();
            assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
            assert!(c.validate().is_ok());
        }
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::from_toml("seed = 3\n[grpo]\nepochs = 2\n").unwrap();
        assert_eq!(c.grpo.epochs, 2);
        assert_eq!(c.grpo.clip_epsilon, 0.2);
        assert!(RunConfig::from_toml("[grpo]\nepoch = 2\n").is_err());
        assert_eq!(c, {
            let mut d = RunConfig::for_preset(Preset::Methods, 3);
            d.grpo.epochs = 2;
            d
        });
        let e = RunConfig::from_toml("preset = \"experiments\"\n[lora]\nrank = 4\n").unwrap();
        assert_eq!((e.grpo.learning_rate, e.lora.rank, e.lora.alpha), (5e-5, 4, 16.0));
    }

    #[test]
    fn presets_set_their_fields() {
        let e = RunConfig::for_preset(Preset::Experiments, 0);
        assert_eq!((e.grpo.learning_rate, e.grpo.batch_prompts, e.lora.rank), (5e-5, 4, 8));
        let mut m = e.clone();
        m.apply_preset(Preset::Methods);
        assert_eq!((m.grpo.learning_rate, m.grpo.grad_accum_steps, m.lora.alpha), (2e-5, 2, 32.0));
    }
}
