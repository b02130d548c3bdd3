//! Temperature and nucleus (top-p) sampling, and groups of candidate
//! completions scored under a frozen reference model.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TransformerLm;
use crate::numerics::{kernels, Scalar};
use crate::rng::{self, Rng};
use crate::text::{TokenSequence, EOS};

/// Below this temperature decoding is greedy.
pub const GREEDY_BELOW: f64 = 1e-4;
/// EOS stays in the nucleus whenever its probability exceeds this.
pub const EOS_KEEP_PROB: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub group_size: usize,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            temperature: 0.7,
            top_p: 0.9,
            max_new_tokens: 64,
            group_size: 4,
            rng_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be positive".into()));
        }
        if self.group_size < 2 {
            return Err(Error::Config(format!("group_size must be at least 2, got {}", self.group_size)));
        }
        Ok(())
    }
}

/// Token ids sorted by probability descending, ties by id ascending.
fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx
}

fn nucleus(probs: &[f64], p: f64, always_keep: Option<usize>) -> Vec<f64> {
    if p >= 1.0 {
        return probs.to_vec();
    }
    let mut keep = vec![false; probs.len()];
    let mut cum = 0.0;
    for i in ranked(probs) {
        if probs[i] <= 0.0 {
            break;
        }
        keep[i] = true;
        cum += probs[i];
        if cum >= p {
            break;
        }
    }
    if let Some(e) = always_keep {
        if probs.get(e).is_some_and(|&pe| pe > EOS_KEEP_PROB) {
            keep[e] = true;
        }
    }
    let total: f64 = probs.iter().zip(&keep).filter(|(_, &k)| k).map(|(p, _)| p).sum();
    probs
        .iter()
        .zip(&keep)
        .map(|(&q, &k)| if k { q / total } else { 0.0 })
        .collect()
}

/// Keeps the shortest most-probable prefix whose mass reaches `p` (the
/// crossing token included) and renormalizes. `p >= 1` returns the input.
pub fn filter_top_p(probs: &[f64], p: f64) -> Vec<f64> {
    nucleus(probs, p, None)
}

fn draw(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p;
        last = i;
        if u < cum {
            return i;
        }
    }
    last
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Log-probabilities of `softmax(logits / temperature)`, with the same
/// arithmetic the training tape uses.
fn scaled_log_softmax<T: Scalar>(logits: &[T], temperature: f64) -> Vec<T> {
    let mut row: Vec<T> = if temperature == 1.0 {
        logits.to_vec()
    } else {
        let inv = T::of(1.0 / temperature);
        logits.iter().map(|&x| x * inv).collect()
    };
    kernels::log_softmax_in_place(&mut row);
    row
}

/// Picks the next token and its log-probability under the unfiltered
/// temperature-scaled distribution.
fn choose<T: Scalar>(logits: &[T], cfg: &SamplerConfig, rng: &mut Rng) -> (u32, f64) {
    let lp = scaled_log_softmax(logits, cfg.temperature);
    let tok = if cfg.temperature < GREEDY_BELOW {
        argmax(logits)
    } else {
        let probs: Vec<f64> = lp.iter().map(|l| l.as_f64().exp()).collect();
        draw(&nucleus(&probs, cfg.top_p, Some(EOS as usize)), rng)
    };
    (tok as u32, lp[tok].as_f64())
}

/// A sampled completion with the policy log-probability of each token.
#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub tokens: TokenSequence,
    pub logprobs: Vec<f64>,
}

/// Draws `n` completions of one prompt, each from its own stream. Stops a
/// completion at EOS (kept as its last token) or after `max_new_tokens`.
pub fn sample_many<T: Scalar>(model: &TransformerLm<T>, prompt: &TokenSequence, cfg: &SamplerConfig, rngs: &mut [Rng]) -> Result<Vec<Completion>> {
    let prompt = prompt.real_ids();
    if prompt.is_empty() {
        return Err(Error::contract("prompt has no real tokens"));
    }
    let room = model.config().max_position.saturating_sub(prompt.len());
    if room == 0 {
        return Err(Error::contract("prompt leaves no room for a completion"));
    }
    let max_new = cfg.max_new_tokens.min(room);
    let n = rngs.len();
    let (cache, first) = model.prefill(prompt)?;
    let mut caches = vec![cache; n];
    let mut tokens: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut logprobs: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut rows: Vec<Vec<T>> = vec![first; n];
    let mut active: Vec<usize> = (0..n).collect();
    loop {
        let mut next_active = Vec::new();
        let mut fed = Vec::new();
        for (slot, &i) in active.iter().enumerate() {
            let (tok, lp) = choose(&rows[slot], cfg, &mut rngs[i]);
            tokens[i].push(tok);
            logprobs[i].push(lp);
            if tok != EOS && tokens[i].len() < max_new {
                next_active.push(i);
                fed.push(tok);
            }
        }
        if next_active.is_empty() {
            break;
        }
        let mut live = vec![false; n];
        next_active.iter().for_each(|&i| live[i] = true);
        let mut batch: Vec<_> = caches
            .iter_mut()
            .zip(&live)
            .filter_map(|(c, &l)| l.then_some(c))
            .collect();
        rows = model.decode(&mut batch, &fed)?;
        active = next_active;
    }
    Ok(tokens
        .into_iter()
        .zip(logprobs)
        .map(|(t, l)| Completion {
            tokens: TokenSequence::from_ids(t),
            logprobs: l,
        })
        .collect())
}

pub fn sample_completion<T: Scalar>(model: &TransformerLm<T>, prompt: &TokenSequence, cfg: &SamplerConfig, rng: &mut Rng) -> Result<Completion> {
    let mut one = [rng.clone()];
    let out = sample_many(model, prompt, cfg, &mut one)?;
    *rng = one[0].clone();
    Ok(out.into_iter().next().expect("one completion"))
}

/// Statistics of one completion under the frozen reference model.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceStats {
    /// Per-token log-probs at the sampling temperature.
    pub logprobs: Vec<f64>,
    /// Mean negative log-likelihood at temperature 1, EOS included;
    /// 0 for a completion without tokens.
    pub mean_nll: f64,
    /// Entropy (nats, temperature 1) of the next-token distribution right
    /// after the last non-EOS completion token.
    pub final_entropy: f64,
    /// Mean entropy over the positions predicting each body token and the
    /// final one.
    pub mean_entropy: f64,
}

pub fn reference_stats<T: Scalar>(reference: &TransformerLm<T>, prompt: &[u32], completion: &[u32], temperature: f64) -> Result<ReferenceStats> {
    if prompt.is_empty() {
        return Err(Error::contract("prompt has no real tokens"));
    }
    let body_len = completion.iter().take_while(|&&t| t != EOS).count();
    let mut ids = prompt.to_vec();
    ids.extend_from_slice(&completion[..body_len]);
    let logits = reference.logits(&ids)?;
    let first = prompt.len() - 1;
    let mut logprobs = Vec::with_capacity(completion.len());
    let mut nll = 0.0;
    for (k, &tok) in completion.iter().enumerate() {
        let row = logits.row(first + k);
        logprobs.push(scaled_log_softmax(row, temperature)[tok as usize].as_f64());
        nll -= scaled_log_softmax(row, 1.0)[tok as usize].as_f64();
    }
    let mean_nll = if completion.is_empty() { 0.0 } else { nll / completion.len() as f64 };
    let entropies: Vec<f64> = (first..=first + body_len)
        .map(|r| kernels::entropy_of_logits(logits.row(r)))
        .collect();
    let final_entropy = entropies[body_len];
    let mean_entropy = entropies.iter().sum::<f64>() / entropies.len() as f64;
    Ok(ReferenceStats {
        logprobs,
        mean_nll,
        final_entropy,
        mean_entropy,
    })
}

/// `G` completions of one prompt with policy and reference statistics.
/// Rewards and advantages are filled in by the trainer.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateGroup {
    pub prompt: TokenSequence,
    pub completions: Vec<TokenSequence>,
    pub policy_logprobs: Vec<Vec<f64>>,
    pub reference_logprobs: Vec<Vec<f64>>,
    pub reference_nll: Vec<f64>,
    pub reference_entropy: Vec<f64>,
    pub reference_mean_entropy: Vec<f64>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl CandidateGroup {
    pub fn len(&self) -> usize {
        self.completions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.completions.is_empty()
    }
}

/// Samples `group_size` completions for the prompt with index
/// `prompt_index`; member `j` draws from stream `(seed, prompt_index, j)`.
pub fn sample_group<T: Scalar>(
    policy: &TransformerLm<T>,
    reference: &TransformerLm<T>,
    prompt: &TokenSequence,
    prompt_index: u64,
    cfg: &SamplerConfig,
) -> Result<CandidateGroup> {
    cfg.validate()?;
    let mut rngs: Vec<Rng> = (0..cfg.group_size as u64)
        .map(|j| rng::substream(cfg.rng_seed, &[0x5a4d, prompt_index, j]))
        .collect();
    let samples = sample_many(policy, prompt, cfg, &mut rngs)?;
    let g = samples.len();
    let mut group = CandidateGroup {
        prompt: prompt.clone(),
        completions: Vec::with_capacity(g),
        policy_logprobs: Vec::with_capacity(g),
        reference_logprobs: Vec::with_capacity(g),
        reference_nll: Vec::with_capacity(g),
        reference_entropy: Vec::with_capacity(g),
        reference_mean_entropy: Vec::with_capacity(g),
        rewards: vec![0.0; g],
        advantages: vec![0.0; g],
    };
    for s in samples {
        let stats = reference_stats(reference, prompt.real_ids(), s.tokens.ids(), cfg.temperature)?;
        group.reference_logprobs.push(stats.logprobs);
        group.reference_nll.push(stats.mean_nll);
        group.reference_entropy.push(stats.final_entropy);
        group.reference_mean_entropy.push(stats.mean_entropy);
        group.policy_logprobs.push(s.logprobs);
        group.completions.push(s.tokens);
    }
    Ok(group)
}

/// Token ids of a completion without its terminating EOS.
pub fn completion_body(tokens: &[u32]) -> &[u32] {
    match tokens.last() {
        Some(&EOS) => &tokens[..tokens.len() - 1],
        _ => tokens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn keeps_crossing_token() {
        let out = filter_top_p(&[0.5, 0.3, 0.15, 0.05], 0.9);
        let expect = [0.5 / 0.95, 0.3 / 0.95, 0.15 / 0.95, 0.0];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((out[0] - 0.5263).abs() < 1e-4);
        assert!((out[1] - 0.3158).abs() < 1e-4);
        assert!((out[2] - 0.1579).abs() < 1e-4);
    }

    #[test]
    fn p_one_is_identity() {
        let probs = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(filter_top_p(&probs, 1.0), probs.to_vec());
    }

    #[test]
    fn point_mass_is_unchanged() {
        for p in [0.01, 0.5, 0.99, 1.0] {
            assert_eq!(filter_top_p(&[0.0, 1.0, 0.0], p), vec![0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn ties_go_to_lower_id() {
        assert_eq!(filter_top_p(&[0.25, 0.25, 0.25, 0.25], 0.5), vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn eos_is_retained() {
        let mut probs = vec![0.0; 5];
        probs[4] = 0.96;
        probs[EOS as usize] = 0.04;
        let out = nucleus(&probs, 0.9, Some(EOS as usize));
        assert!(out[EOS as usize] > 0.0);
        probs[EOS as usize] = 1e-7;
        probs[4] = 1.0 - 1e-7;
        assert_eq!(nucleus(&probs, 0.9, Some(EOS as usize))[EOS as usize], 0.0);
    }

    #[test]
    fn config_bounds() {
        assert!(SamplerConfig::default().validate().is_ok());
        let bad = [
            SamplerConfig { temperature: 0.0, ..Default::default() },
            SamplerConfig { top_p: 0.0, ..Default::default() },
            SamplerConfig { top_p: 1.2, ..Default::default() },
            SamplerConfig { group_size: 1, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }

    fn distribution() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, 1..12).prop_filter_map("non-zero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-3).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn output_is_a_distribution_on_the_input_support(probs in distribution(), p in 0.01f64..1.0) {
            let out = filter_top_p(&probs, p);
            prop_assert!(out.iter().all(|&q| q >= 0.0));
            prop_assert!((out.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            for (q, r) in out.iter().zip(&probs) {
                prop_assert!(*q == 0.0 || *r > 0.0);
            }
        }

        #[test]
        fn smaller_p_never_keeps_more(probs in distribution(), a in 0.01f64..1.0, b in 0.01f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let small = filter_top_p(&probs, lo);
            let large = filter_top_p(&probs, hi);
            for (s, l) in small.iter().zip(&large) {
                prop_assert!(*s == 0.0 || *l > 0.0);
            }
        }
    }
}
