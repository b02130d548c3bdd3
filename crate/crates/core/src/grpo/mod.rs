//! Group-relative policy optimization over LoRA adapters.

mod eval;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LoraConfig, TransformerLm};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::sampling::CandidateGroup;

pub use eval::{evaluate, Comparison, ComparisonRow, EvalMetrics, PlotSeries};
pub use train::{train, TrainLogRecord, TrainOutput, TrainReport, CSV_HEADER, LOG_EVERY};

/// The two hyperparameter sets: the methods description (lr 2e-5, 8
/// prompts, accumulation 2, LoRA 16/32) and the experiments description
/// (lr 5e-5, 4 prompts, no accumulation, LoRA 8/16).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Methods,
    Experiments,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Preset> {
        match s {
            "methods" => Some(Preset::Methods),
            "experiments" => Some(Preset::Experiments),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Methods => "methods",
            Preset::Experiments => "experiments",
        }
    }

    pub fn grpo(self) -> GrpoConfig {
        match self {
            Preset::Methods => GrpoConfig::default(),
            Preset::Experiments => GrpoConfig {
                learning_rate: 5e-5,
                batch_prompts: 4,
                grad_accum_steps: 1,
                ..GrpoConfig::default()
            },
        }
    }

    pub fn lora(self) -> LoraConfig {
        match self {
            Preset::Methods => LoraConfig::default(),
            Preset::Experiments => LoraConfig {
                rank: 8,
                alpha: 16.0,
                ..LoraConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_coefficient: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Prompts per micro-batch.
    pub batch_prompts: usize,
    pub grad_accum_steps: usize,
    pub advantage_std_epsilon: f64,
    /// Prompt budget in tokens, BOS included.
    pub max_prompt_len: usize,
    /// Stops after this many optimizer steps, which then also define
    /// progress `t`; otherwise `epochs` full passes.
    pub max_steps: Option<usize>,
    pub checkpoint_every: usize,
    /// Halts when the step reward stays below `divergence_ratio` times its
    /// running best for this many consecutive steps.
    pub divergence_patience: usize,
    pub divergence_ratio: f64,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 4,
            clip_epsilon: 0.2,
            kl_coefficient: 0.04,
            learning_rate: 2e-5,
            epochs: 4,
            batch_prompts: 8,
            grad_accum_steps: 2,
            advantage_std_epsilon: 1e-6,
            max_prompt_len: 32,
            max_steps: None,
            checkpoint_every: 100,
            divergence_patience: 200,
            divergence_ratio: 0.5,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!("group_size must be at least 2, got {}", self.group_size)));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::Config(format!("clip_epsilon {} outside (0, 1)", self.clip_epsilon)));
        }
        if !(self.kl_coefficient.is_finite() && self.kl_coefficient >= 0.0) {
            return Err(Error::Config(format!("kl_coefficient must be non-negative, got {}", self.kl_coefficient)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_prompts == 0 || self.grad_accum_steps == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("epochs, batch_prompts, grad_accum_steps and checkpoint_every must be positive".into()));
        }
        if self.max_prompt_len < 2 {
            return Err(Error::Config("max_prompt_len must leave room for BOS and one word".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be positive when set".into()));
        }
        if !(self.advantage_std_epsilon.is_finite() && self.advantage_std_epsilon >= 0.0) {
            return Err(Error::Config("advantage_std_epsilon must be non-negative".into()));
        }
        Ok(())
    }

    /// Prompts consumed by one optimizer step.
    pub fn prompts_per_step(&self) -> usize {
        self.batch_prompts * self.grad_accum_steps
    }

    pub fn steps_per_epoch(&self, n_prompts: usize) -> usize {
        n_prompts.div_ceil(self.prompts_per_step())
    }

    pub fn total_steps(&self, n_prompts: usize) -> usize {
        self.max_steps.unwrap_or(self.epochs * self.steps_per_epoch(n_prompts))
    }
}

/// `(r - mean) / (popstd + eps)`. A group of identical rewards gives zeros.
pub fn compute_advantages(rewards: &[f64], std_epsilon: f64) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + std_epsilon;
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

/// Diagnostics of one group's loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    pub surrogate: f64,
    pub kl: f64,
    /// Tokens whose ratio left `[1 - eps, 1 + eps]`.
    pub clipped_tokens: usize,
    pub tokens: usize,
}

impl LossStats {
    pub fn clip_fraction(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.clipped_tokens as f64 / self.tokens as f64
        }
    }
}

/// Records the group loss `-surrogate + beta * KL`. Each term is a token
/// mean within a completion, then a mean over completions. Ratios compare
/// the current policy with the log-probs recorded at sampling time; the
/// KL estimate uses the stored reference log-probs.
pub fn grpo_loss<T: Scalar>(
    tape: &mut Tape<T>,
    policy: &TransformerLm<T>,
    group: &CandidateGroup,
    cfg: &GrpoConfig,
    temperature: f64,
    mut train: Option<&mut Rng>,
) -> Result<(Var, LossStats)> {
    if group.is_empty() {
        return Err(Error::contract("empty candidate group"));
    }
    let eps = cfg.clip_epsilon;
    let prompt = group.prompt.real_ids();
    let mut stats = LossStats::default();
    let mut total: Option<Var> = None;
    for (i, completion) in group.completions.iter().enumerate() {
        let ids = completion.real_ids();
        let n = ids.len();
        let old = &group.policy_logprobs[i];
        let reference = &group.reference_logprobs[i];
        if old.len() != n || reference.len() != n {
            return Err(Error::contract(format!(
                "completion {i} has {n} tokens but {} / {} recorded log-probs",
                old.len(),
                reference.len()
            )));
        }
        let lp = policy.completion_logprobs_tape(tape, prompt, ids, temperature, train.as_deref_mut())?;
        let old_v = tape.constant(Tensor::new(vec![n], old.iter().map(|&x| T::of(x)).collect())?);
        let log_ratio = tape.sub(lp, old_v)?;
        let ratio = tape.exp(log_ratio);
        let ratio_values = tape.value(ratio).data();
        if let Some(k) = ratio_values.iter().position(|r| !r.is_finite()) {
            return Err(Error::NonFinite(format!(
                "policy ratio of completion {i}, token {k}: current log-prob {}, sampled {}",
                tape.value(lp).data()[k].as_f64(),
                old[k]
            )));
        }
        stats.clipped_tokens += ratio_values
            .iter()
            .filter(|r| {
                let r = r.as_f64();
                r < 1.0 - eps || r > 1.0 + eps
            })
            .count();
        stats.tokens += n;

        let a = T::of(group.advantages[i]);
        let unclipped = tape.scale(ratio, a);
        let clipped = tape.clamp(ratio, T::of(1.0 - eps), T::of(1.0 + eps));
        let clipped = tape.scale(clipped, a);
        let surrogate = tape.minimum(unclipped, clipped)?;
        let surrogate = tape.mean(surrogate);

        let ref_v = tape.constant(Tensor::new(vec![n], reference.iter().map(|&x| T::of(x)).collect())?);
        let d = tape.sub(ref_v, lp)?;
        let e = tape.exp(d);
        let kl = tape.sub(e, d)?;
        let kl = tape.add_scalar(kl, -T::one());
        let kl = tape.mean(kl);

        stats.surrogate += tape.value(surrogate).item()?.as_f64();
        stats.kl += tape.value(kl).item()?.as_f64();

        let penalty = tape.scale(kl, T::of(cfg.kl_coefficient));
        let term = tape.sub(penalty, surrogate)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    let g = group.len() as f64;
    let loss = tape.scale(total.expect("non-empty group"), T::of(1.0 / g));
    stats.surrogate /= g;
    stats.kl /= g;
    stats.loss = tape.value(loss).item()?.as_f64();
    Ok((loss, stats))
}
