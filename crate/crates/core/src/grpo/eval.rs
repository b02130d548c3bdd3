use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::TransformerLm;
use crate::numerics::Scalar;
use crate::rewards::RewardModel;
use crate::rng::{self, Rng};
use crate::sampling::{reference_stats, sample_many, SamplerConfig};
use crate::text::encode_prompt;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean `P_neutral`.
    pub fairness: f64,
    /// Mean fluency reward under the reference model.
    pub fluency: f64,
    /// Mean semantic reward.
    pub relevance: f64,
    /// Mean noise-free composite reward.
    pub mean_reward: f64,
    pub completions: usize,
}

/// Samples `sampler.group_size` completions per prompt and averages their
/// noise-free rewards at progress `t`. Member `j` of prompt `i` draws
/// from `substream(sampler.rng_seed, [0xe7a1, i, j])`.
pub fn evaluate<T: Scalar>(
    model: &TransformerLm<T>,
    prompts: &[String],
    rewards: &RewardModel<'_, T>,
    sampler: &SamplerConfig,
    max_prompt_len: usize,
    t: f64,
) -> Result<EvalMetrics> {
    let mut sums = [0.0f64; 4];
    let mut n = 0usize;
    for (i, prompt) in prompts.iter().enumerate() {
        let ids = encode_prompt(prompt, rewards.vocab, max_prompt_len, false);
        let mut rngs: Vec<Rng> = (0..sampler.group_size as u64)
            .map(|j| rng::substream(sampler.rng_seed, &[0xe7a1, i as u64, j]))
            .collect();
        let completions = sample_many(model, &ids, sampler, &mut rngs)?;
        let embedding = rewards.prompt_embedding(prompt)?;
        for c in completions {
            let tokens = c.tokens.real_ids();
            let stats = reference_stats(rewards.reference, ids.real_ids(), tokens, 1.0)?;
            let b = rewards.breakdown::<Rng>(prompt, &embedding, tokens, &stats, t, None)?;
            sums[0] += b.r_fair;
            sums[1] += b.r_flu;
            sums[2] += b.r_sem;
            sums[3] += b.final_reward;
            n += 1;
        }
    }
    let d = n.max(1) as f64;
    Ok(EvalMetrics {
        fairness: sums[0] / d,
        fluency: sums[1] / d,
        relevance: sums[2] / d,
        mean_reward: sums[3] / d,
        completions: n,
    })
}

/// Base versus tuned model on the three evaluation metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub fairness: f64,
    pub fluency: f64,
    pub relevance: f64,
}

/// One bar group per metric, one value per model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub metric: String,
    pub labels: Vec<String>,
    pub values: Vec<f64>,
}

impl Comparison {
    pub fn new(base: &EvalMetrics, tuned: &EvalMetrics) -> Self {
        let row = |model: &str, m: &EvalMetrics| ComparisonRow {
            model: model.into(),
            fairness: m.fairness,
            fluency: m.fluency,
            relevance: m.relevance,
        };
        Comparison {
            rows: vec![row("base", base), row("grpo_tuned", tuned)],
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,fairness,fluency,relevance\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.model, r.fairness, r.fluency, r.relevance));
        }
        s
    }

    pub fn plot_data(&self) -> Vec<PlotSeries> {
        let labels: Vec<String> = self.rows.iter().map(|r| r.model.clone()).collect();
        let metrics: [(&str, fn(&ComparisonRow) -> f64); 3] = [
            ("fairness", |r| r.fairness),
            ("fluency", |r| r.fluency),
            ("relevance", |r| r.relevance),
        ];
        metrics
            .iter()
            .map(|(name, get)| PlotSeries {
                metric: name.to_string(),
                labels: labels.clone(),
                values: self.rows.iter().map(get).collect(),
            })
            .collect()
    }
}
