use fairgrpo::model::{ModelConfig, TransformerLm};
use fairgrpo::numerics::Tensor;
use fairgrpo::rng;
use fairgrpo::sampling::{reference_stats, sample_completion, sample_group, SamplerConfig};
use fairgrpo::text::{TokenSequence, EOS};

fn model(vocab: usize, seed: u64) -> TransformerLm<f32> {
    let cfg = ModelConfig {
        vocab_size: vocab,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_position: 96,
    };
    let mut lm = TransformerLm::new(cfg, seed).unwrap();
    // sharpen the output distribution so samples are not near-uniform
    let id = lm.params().find("tok_emb").unwrap();
    let t = lm.params().value(id).scale(6.0);
    lm.params_mut().get_mut(id).value = t;
    lm
}

fn prompt() -> TokenSequence {
    TokenSequence::from_ids(vec![1, 5, 6, 7]).left_padded(8)
}

#[test]
fn near_zero_temperature_is_greedy() {
    let lm = model(24, 1);
    let cfg = SamplerConfig {
        temperature: 1e-5,
        max_new_tokens: 10,
        ..Default::default()
    };
    let out = sample_completion(&lm, &prompt(), &cfg, &mut rng::seeded(3)).unwrap();
    let mut ids = prompt().real_ids().to_vec();
    let mut expected = Vec::new();
    for _ in 0..10 {
        let logits = lm.logits(&ids).unwrap();
        let row = logits.row(ids.len() - 1);
        let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b }) as u32;
        expected.push(best);
        if best == EOS {
            break;
        }
        ids.push(best);
    }
    assert_eq!(out.tokens.ids(), expected.as_slice());
}

#[test]
fn fixed_seed_repeats_and_length_is_bounded() {
    let lm = model(24, 2);
    let cfg = SamplerConfig::default();
    for seed in 0..20 {
        let a = sample_completion(&lm, &prompt(), &cfg, &mut rng::seeded(seed)).unwrap();
        let b = sample_completion(&lm, &prompt(), &cfg, &mut rng::seeded(seed)).unwrap();
        assert_eq!(a, b);
        assert!(a.tokens.len() <= 64 && !a.tokens.is_empty());
        let eos_at = a.tokens.ids().iter().position(|&t| t == EOS);
        assert!(eos_at.is_none() || eos_at == Some(a.tokens.len() - 1));
    }
}

#[test]
fn recorded_log_probs_match_recomputation() {
    let lm = model(24, 3);
    let cfg = SamplerConfig::default();
    for seed in 0..10 {
        let s = sample_completion(&lm, &prompt(), &cfg, &mut rng::seeded(seed)).unwrap();
        let again = lm.log_prob_of_completion(&prompt(), &s.tokens, cfg.temperature).unwrap();
        assert_eq!(again.len(), s.logprobs.len());
        for (a, b) in again.iter().zip(&s.logprobs) {
            assert!((f64::from(*a) - b).abs() <= 1e-5);
        }
    }
}

#[test]
fn group_has_g_members_and_is_reproducible() {
    let policy = model(24, 4);
    let reference = policy.freeze();
    let cfg = SamplerConfig {
        rng_seed: 11,
        ..Default::default()
    };
    let g = sample_group(&policy, &reference, &prompt(), 5, &cfg).unwrap();
    assert_eq!(g.len(), 4);
    for list in [g.policy_logprobs.len(), g.reference_logprobs.len(), g.rewards.len(), g.advantages.len()] {
        assert_eq!(list, 4);
    }
    assert_eq!(g, sample_group(&policy, &reference, &prompt(), 5, &cfg).unwrap());
    assert_ne!(g.completions, sample_group(&policy, &reference, &prompt(), 6, &cfg).unwrap().completions);
    // at step 0 the reference is the policy
    assert_eq!(g.policy_logprobs, g.reference_logprobs);
}

#[test]
fn group_members_match_single_draws() {
    let policy = model(24, 5);
    let cfg = SamplerConfig {
        rng_seed: 2,
        group_size: 3,
        ..Default::default()
    };
    let g = sample_group(&policy, &policy, &prompt(), 9, &cfg).unwrap();
    for (j, c) in g.completions.iter().enumerate() {
        let mut r = rng::substream(2, &[0x5a4d, 9, j as u64]);
        let single = sample_completion(&policy, &prompt(), &cfg, &mut r).unwrap();
        assert_eq!(&single.tokens, c);
    }
}

#[test]
fn reference_stats_by_hand() {
    let lm = model(24, 6);
    let p = [1u32, 5, 6];
    let completion = [9u32, 10, EOS];
    let st = reference_stats(&lm, &p, &completion, 0.7).unwrap();
    let logits = lm.logits(&[1, 5, 6, 9, 10]).unwrap();
    let mut nll = 0.0;
    for (k, &tok) in completion.iter().enumerate() {
        let row: Vec<f64> = logits.row(2 + k).iter().map(|&x| f64::from(x)).collect();
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        nll -= row[tok as usize] - z.ln();
    }
    assert!((st.mean_nll - nll / 3.0).abs() < 1e-4);
    // the distribution after token 10 is the one that predicts EOS
    let row: Vec<f64> = logits.row(4).iter().map(|&x| f64::from(x)).collect();
    let z: f64 = row.iter().map(|x| x.exp()).sum();
    let h: f64 = -row.iter().map(|x| (x.exp() / z) * (x - z.ln())).sum::<f64>();
    assert!((st.final_entropy - h).abs() < 1e-4);

    let empty = reference_stats(&lm, &p, &[], 0.7).unwrap();
    assert_eq!(empty.mean_nll, 0.0);
}

/// 10k one-token draws at temperature 1 without truncation; every token's
/// frequency must lie within three binomial standard deviations.
#[test]
fn single_token_frequencies_match_model_probabilities() {
    let mut lm = model(12, 7);
    let id = lm.params().find("tok_emb").unwrap();
    let t: Tensor<f32> = lm.params().value(id).scale(0.1);
    lm.params_mut().get_mut(id).value = t;
    let cfg = SamplerConfig {
        temperature: 1.0,
        top_p: 1.0,
        max_new_tokens: 1,
        ..Default::default()
    };
    let n = 10_000;
    let mut counts = [0usize; 12];
    let mut r = rng::seeded(12345);
    for _ in 0..n {
        let s = sample_completion(&lm, &prompt(), &cfg, &mut r).unwrap();
        counts[s.tokens.ids()[0] as usize] += 1;
    }
    let logits = lm.logits(prompt().real_ids()).unwrap();
    let row: Vec<f64> = logits.row(3).iter().map(|&x| f64::from(x)).collect();
    let z: f64 = row.iter().map(|x| x.exp()).sum();
    for (tok, &c) in counts.iter().enumerate() {
        let p = row[tok].exp() / z;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let freq = c as f64 / n as f64;
        assert!((freq - p).abs() <= 3.0 * sigma, "token {tok}: freq {freq} p {p}");
    }
}
