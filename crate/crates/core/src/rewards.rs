//! The six reward components, their fixed-coefficient Form aggregate, the
//! weight schedule and the normalized composite. All arithmetic is f64.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TransformerLm;
use crate::numerics::Scalar;
use crate::sampling::{completion_body, reference_stats, ReferenceStats};
use crate::scorer::{Embedding, FairnessClassifier};
use crate::text::{detokenize, encode_prompt, split_words, tokenize, Vocabulary, EOS};

/// Form coefficients in hundredths, for (sem, len, flu, para, rep).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormCoefficients {
    pub sem: u32,
    pub len: u32,
    pub flu: u32,
    pub para: u32,
    pub rep: u32,
}

pub const FORM_COEFFICIENTS: FormCoefficients = FormCoefficients {
    sem: 30,
    len: 25,
    flu: 15,
    para: 20,
    rep: 10,
};

impl FormCoefficients {
    pub fn sum_hundredths(&self) -> u32 {
        self.sem + self.len + self.flu + self.para + self.rep
    }

    /// Coefficients as reals, in (sem, len, flu, para, rep) order.
    pub fn as_f64(&self) -> [f64; 5] {
        [self.sem, self.len, self.flu, self.para, self.rep].map(|c| f64::from(c) / 100.0)
    }
}

impl Default for FormCoefficients {
    fn default() -> Self {
        FORM_COEFFICIENTS
    }
}

/// Which reference entropy gates the length reward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    /// Next-token entropy after the last generated token.
    #[default]
    Final,
    /// Mean over every generated position.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub alpha_len: f64,
    pub target_length: usize,
    pub entropy_gate_a: f64,
    pub entropy_gate_b: f64,
    pub entropy_mode: EntropyMode,
    pub beta_flu: f64,
    pub ngram_n: usize,
    pub epsilon_rep: f64,
    pub form_coeffs: FormCoefficients,
    pub noise_sigma: f64,
    pub noise_enabled: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha_len: 0.02,
            target_length: 48,
            entropy_gate_a: 2.0,
            entropy_gate_b: 2.5,
            entropy_mode: EntropyMode::Final,
            beta_flu: 1.0,
            ngram_n: 3,
            epsilon_rep: 1e-6,
            form_coeffs: FORM_COEFFICIENTS,
            noise_sigma: 0.05,
            noise_enabled: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha_len", self.alpha_len),
            ("entropy_gate_a", self.entropy_gate_a),
            ("beta_flu", self.beta_flu),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.entropy_gate_b.is_finite() {
            return Err(Error::Config("entropy_gate_b must be finite".into()));
        }
        if self.ngram_n == 0 {
            return Err(Error::Config("ngram_n must be at least 1".into()));
        }
        if !(self.epsilon_rep.is_finite() && self.epsilon_rep >= 0.0) {
            return Err(Error::Config(format!("epsilon_rep must be non-negative, got {}", self.epsilon_rep)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma must be non-negative, got {}", self.noise_sigma)));
        }
        if self.form_coeffs.sum_hundredths() != 100 {
            return Err(Error::Config(format!(
                "form coefficients must sum to 1, got {}",
                f64::from(self.form_coeffs.sum_hundredths()) / 100.0
            )));
        }
        Ok(())
    }
}

fn unit(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cosine similarity, or `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// `P_neutral` of the completion body.
pub fn fairness_reward<T: Scalar>(clf: &FairnessClassifier<T>, completion_ids: &[u32]) -> Result<f64> {
    Ok(unit(clf.p_neutral(completion_ids)?))
}

/// `(cos + 1) / 2`; 0.5 when either embedding is degenerate.
pub fn semantic_reward(prompt: &Embedding, completion: &Embedding) -> f64 {
    if prompt.degenerate || completion.degenerate {
        return 0.5;
    }
    match cosine(&prompt.vector, &completion.vector) {
        Some(c) => unit((c + 1.0) / 2.0),
        None => 0.5,
    }
}

fn term_frequencies(text: &str) -> HashMap<String, f64> {
    let mut tf = HashMap::new();
    for w in split_words(text) {
        *tf.entry(w).or_insert(0.0) += 1.0;
    }
    tf
}

/// `1 - rho^2` with `rho` the cosine of lowercased term-frequency vectors.
/// Text without tokens on either side gives `rho = 0`.
pub fn paraphrase_penalty(prompt: &str, completion: &str) -> f64 {
    let x = term_frequencies(prompt);
    let y = term_frequencies(completion);
    let nx: f64 = x.values().map(|v| v * v).sum();
    let ny: f64 = y.values().map(|v| v * v).sum();
    if nx == 0.0 || ny == 0.0 {
        return 1.0;
    }
    let dot: f64 = x.iter().filter_map(|(k, v)| y.get(k).map(|w| v * w)).sum();
    unit(1.0 - dot * dot / (nx * ny))
}

/// Completeness gate `sigmoid(a (H - b))`.
pub fn completeness_gate(entropy: f64, cfg: &RewardConfig) -> f64 {
    sigmoid(cfg.entropy_gate_a * (entropy - cfg.entropy_gate_b))
}

/// `exp(-alpha |L - L*|) * C(H)`.
pub fn length_reward(length: usize, entropy: f64, cfg: &RewardConfig) -> f64 {
    let gap = (length as f64 - cfg.target_length as f64).abs();
    unit((-cfg.alpha_len * gap).exp() * completeness_gate(entropy, cfg))
}

/// `exp(-beta * NLL)` for a mean per-token NLL.
pub fn fluency_reward(mean_nll: f64, cfg: &RewardConfig) -> f64 {
    unit((-cfg.beta_flu * mean_nll).exp())
}

/// `1 - (N - distinct) / (N + eps)` over the `N` n-grams; 1 when `N = 0`.
pub fn repetition_reward<K: Hash + Eq>(tokens: &[K], cfg: &RewardConfig) -> f64 {
    let n = cfg.ngram_n;
    if tokens.len() < n {
        return 1.0;
    }
    let total = tokens.len() - n + 1;
    let distinct: HashSet<&[K]> = tokens.windows(n).collect();
    let repeats = (total - distinct.len()) as f64;
    unit(1.0 - repeats / (total as f64 + cfg.epsilon_rep))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub t: f64,
    pub w_form: f64,
    pub w_fair: f64,
}

/// Piecewise-constant weights over normalized progress. `t` outside
/// `[0, 1]` is clamped with a warning.
pub fn schedule(t: f64) -> ScheduleState {
    let t = if (0.0..=1.0).contains(&t) {
        t
    } else {
        log::warn!("schedule progress {t} outside [0, 1]; clamping");
        if t.is_nan() {
            0.0
        } else {
            t.clamp(0.0, 1.0)
        }
    };
    let (w_form, w_fair) = if t < 0.3 {
        (1.2, 0.6)
    } else if t <= 0.7 {
        (1.0, 1.0)
    } else {
        (0.8, 1.4)
    };
    ScheduleState { t, w_form, w_fair }
}

/// The six component scores of one completion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub r_fair: f64,
    pub r_sem: f64,
    pub r_para: f64,
    pub r_len: f64,
    pub r_flu: f64,
    pub r_rep: f64,
}

impl Components {
    pub fn form(&self, coeffs: &FormCoefficients) -> f64 {
        let [sem, len, flu, para, rep] = coeffs.as_f64();
        sem * self.r_sem + len * self.r_len + flu * self.r_flu + para * self.r_para + rep * self.r_rep
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_fair: f64,
    pub r_sem: f64,
    pub r_para: f64,
    pub r_len: f64,
    pub r_flu: f64,
    pub r_rep: f64,
    pub form: f64,
    pub t: f64,
    pub w_fair: f64,
    pub w_form: f64,
    pub raw: f64,
    /// Normalized reward before noise.
    #[serde(rename = "final")]
    pub final_reward: f64,
    pub noise_factor: f64,
    /// Set when a fallback value replaced an undefined component.
    pub degenerate: bool,
}

impl RewardBreakdown {
    pub fn components(&self) -> Components {
        Components {
            r_fair: self.r_fair,
            r_sem: self.r_sem,
            r_para: self.r_para,
            r_len: self.r_len,
            r_flu: self.r_flu,
            r_rep: self.r_rep,
        }
    }

    /// The value the trainer optimizes: the normalized reward times noise.
    pub fn noisy_reward(&self) -> f64 {
        self.final_reward * self.noise_factor
    }
}

/// Weighted, normalized composite without noise.
pub fn compose(c: Components, state: ScheduleState, coeffs: &FormCoefficients) -> RewardBreakdown {
    let form = c.form(coeffs);
    let raw = state.w_fair * c.r_fair + state.w_form * form;
    RewardBreakdown {
        r_fair: c.r_fair,
        r_sem: c.r_sem,
        r_para: c.r_para,
        r_len: c.r_len,
        r_flu: c.r_flu,
        r_rep: c.r_rep,
        form,
        t: state.t,
        w_fair: state.w_fair,
        w_form: state.w_form,
        raw,
        final_reward: unit(raw / (state.w_fair + state.w_form)),
        noise_factor: 1.0,
        degenerate: false,
    }
}

/// Multiplicative noise `N(1, sigma)` clamped to `[0.8, 1.2]`.
pub fn noise_factor<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> f64 {
    if sigma == 0.0 {
        return 1.0;
    }
    let d = Normal::new(1.0, sigma).expect("sigma validated non-negative");
    d.sample(rng).clamp(0.8, 1.2)
}

/// Scores completions against the trained classifier, its shared encoder
/// and the frozen reference model.
pub struct RewardModel<'a, T> {
    pub classifier: &'a FairnessClassifier<T>,
    pub reference: &'a TransformerLm<T>,
    pub vocab: &'a Vocabulary,
    pub config: &'a RewardConfig,
}

impl<T: Scalar> RewardModel<'_, T> {
    /// Classifier input for a prompt.
    pub fn prompt_embedding(&self, prompt: &str) -> Result<Embedding> {
        self.classifier.embed(&self.classifier.encode_text(prompt, self.vocab))
    }

    /// Component scores of `completion` (generated ids, optional trailing
    /// EOS) given its reference statistics.
    pub fn components(
        &self,
        prompt: &str,
        prompt_embedding: &Embedding,
        completion: &[u32],
        stats: &ReferenceStats,
    ) -> Result<(Components, bool)> {
        let cfg = self.config;
        let body = completion_body(completion);
        let text = detokenize(body, self.vocab);
        let embedding = self.classifier.embed(body)?;
        let entropy = match cfg.entropy_mode {
            EntropyMode::Final => stats.final_entropy,
            EntropyMode::Mean => stats.mean_entropy,
        };
        let empty = body.is_empty();
        let c = Components {
            r_fair: fairness_reward(self.classifier, body)?,
            r_sem: semantic_reward(prompt_embedding, &embedding),
            r_para: paraphrase_penalty(prompt, &text),
            r_len: length_reward(body.len(), entropy, cfg),
            r_flu: if empty { 0.0 } else { fluency_reward(stats.mean_nll, cfg) },
            r_rep: repetition_reward(body, cfg),
        };
        Ok((c, empty || prompt_embedding.degenerate || embedding.degenerate))
    }

    /// Full breakdown of one sampled completion. Noise is drawn from `rng`
    /// when given and enabled.
    pub fn breakdown<R: Rng + ?Sized>(
        &self,
        prompt: &str,
        prompt_embedding: &Embedding,
        completion: &[u32],
        stats: &ReferenceStats,
        t: f64,
        rng: Option<&mut R>,
    ) -> Result<RewardBreakdown> {
        let (c, degenerate) = self.components(prompt, prompt_embedding, completion, stats)?;
        let mut b = compose(c, schedule(t), &self.config.form_coeffs);
        b.degenerate = degenerate;
        if let (true, Some(rng)) = (self.config.noise_enabled, rng) {
            b.noise_factor = noise_factor(self.config.noise_sigma, rng);
        }
        Ok(b)
    }

    /// Noise-free breakdown of a completion given as text; the text is
    /// treated as finished, so EOS counts toward its NLL.
    pub fn score_text(&self, prompt: &str, completion: &str, t: f64, max_prompt: usize) -> Result<RewardBreakdown> {
        let prompt_ids = encode_prompt(prompt, self.vocab, max_prompt, false);
        let room = self.reference.config().max_position.saturating_sub(prompt_ids.len()).max(1);
        let mut ids = tokenize(completion, self.vocab, room, false).ids().to_vec();
        if ids.len() < room {
            ids.push(EOS);
        }
        let stats = reference_stats(self.reference, prompt_ids.ids(), &ids, 1.0)?;
        let emb = self.prompt_embedding(prompt)?;
        self.breakdown::<crate::rng::Rng>(prompt, &emb, &ids, &stats, t, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficients_sum_to_one_on_the_grid() {
        assert_eq!(FORM_COEFFICIENTS.sum_hundredths(), 100);
        assert!(RewardConfig::default().validate().is_ok());
        let mut bad = RewardConfig::default();
        bad.form_coeffs.rep = 11;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gate_midpoint_and_saturation() {
        let cfg = RewardConfig::default();
        assert_eq!(length_reward(48, 2.5, &cfg), 0.5);
        assert!((length_reward(48, 1e6, &cfg) - 1.0).abs() < 1e-12);
        assert_eq!(length_reward(48, -1e6, &cfg), 0.0);
    }

    #[test]
    fn out_of_range_progress_is_clamped() {
        assert_eq!(schedule(-0.5).t, 0.0);
        assert_eq!(schedule(1.5).w_fair, 1.4);
        assert_eq!(schedule(f64::NAN).w_form, 1.2);
    }

    #[test]
    fn zero_sigma_means_no_noise() {
        assert_eq!(noise_factor(0.0, &mut crate::rng::seeded(0)), 1.0);
    }
}
