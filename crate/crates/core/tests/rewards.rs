use fairgrpo::model::{ModelConfig, TransformerLm};
use fairgrpo::numerics::Tensor;
use fairgrpo::rewards::{
    compose, cosine, fluency_reward, length_reward, noise_factor, paraphrase_penalty, repetition_reward, schedule,
    semantic_reward, Components, RewardConfig, RewardModel, FORM_COEFFICIENTS,
};
use fairgrpo::rng;
use fairgrpo::sampling::reference_stats;
use fairgrpo::scorer::{ClassifierConfig, Embedding, EncoderKind, FairnessClassifier};
use fairgrpo::text::{Vocabulary, EOS};
use proptest::prelude::*;

fn emb(v: &[f64]) -> Embedding {
    Embedding {
        vector: v.to_vec(),
        degenerate: false,
    }
}

fn uniform_lm(vocab: usize) -> TransformerLm<f64> {
    let cfg = ModelConfig {
        vocab_size: vocab,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_position: 32,
    };
    let mut lm = TransformerLm::new(cfg, 0).unwrap();
    let id = lm.params().find("tok_emb").unwrap();
    lm.params_mut().get_mut(id).value = Tensor::zeros(&[vocab, 8]);
    lm
}

#[test]
fn schedule_bands() {
    let pairs: Vec<(f64, f64)> = [0.1, 0.3, 0.7, 0.9]
        .iter()
        .map(|&t| {
            let s = schedule(t);
            (s.w_form, s.w_fair)
        })
        .collect();
    assert_eq!(pairs, vec![(1.2, 0.6), (1.0, 1.0), (1.0, 1.0), (0.8, 1.4)]);
}

#[test]
fn schedule_has_three_pieces() {
    let mut r = rng::seeded(1);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..10_000 {
        let t: f64 = rand::Rng::random(&mut r);
        let s = schedule(t);
        seen.insert((s.w_form.to_bits(), s.w_fair.to_bits()));
        let expected = if t < 0.3 {
            (1.2, 0.6)
        } else if t <= 0.7 {
            (1.0, 1.0)
        } else {
            (0.8, 1.4)
        };
        assert_eq!((s.w_form, s.w_fair), expected);
    }
    assert_eq!(seen.len(), 3);
}

#[test]
fn repetition_examples() {
    let cfg = RewardConfig::default();
    let abc: Vec<&str> = "a b c a b c a b c".split(' ').collect();
    assert!((repetition_reward(&abc, &cfg) - (1.0 - 4.0 / 7.0)).abs() <= 1e-6);
    assert!((repetition_reward(&[1, 2, 3, 4, 5], &cfg) - 1.0).abs() <= 1e-12);
    assert_eq!(repetition_reward(&[1, 2], &cfg), 1.0);
    assert_eq!(repetition_reward::<u32>(&[], &cfg), 1.0);
}

#[test]
fn paraphrase_examples() {
    assert!((paraphrase_penalty("a b", "a c") - 0.75).abs() <= 1e-9);
    assert_eq!(paraphrase_penalty("why are they so lazy ?", "Why are they so lazy ?"), 0.0);
    assert_eq!(paraphrase_penalty("a b", "c d"), 1.0);
    assert_eq!(paraphrase_penalty("a b", ""), 1.0);
}

#[test]
fn semantic_examples() {
    assert_eq!(semantic_reward(&emb(&[1.0, 2.0]), &emb(&[1.0, 2.0])), 1.0);
    assert_eq!(semantic_reward(&emb(&[1.0, 0.0]), &emb(&[0.0, 3.0])), 0.5);
    assert_eq!(semantic_reward(&emb(&[1.0, -1.0]), &emb(&[-2.0, 2.0])), 0.0);
    let zero = Embedding {
        vector: vec![0.0, 0.0],
        degenerate: true,
    };
    assert_eq!(semantic_reward(&emb(&[1.0, 0.0]), &zero), 0.5);
    assert_eq!(cosine(&[0.0], &[1.0]), None);
}

#[test]
fn length_examples() {
    let cfg = RewardConfig::default();
    assert_eq!(length_reward(48, 2.5, &cfg), 0.5);
    let gated = length_reward(58, 1e9, &cfg);
    assert!((gated - (-0.2f64).exp()).abs() < 1e-12);
    assert!((gated - 0.8187).abs() < 1e-4);
    assert_eq!(length_reward(38, 1e9, &cfg), gated);
}

#[test]
fn fluency_examples() {
    let cfg = RewardConfig::default();
    assert_eq!(fluency_reward(0.0, &cfg), 1.0);
    let two = RewardConfig { beta_flu: 2.0, ..cfg.clone() };
    let nll = 1.3;
    assert!((fluency_reward(nll, &two).ln() - 2.0 * fluency_reward(nll, &cfg).ln()).abs() < 1e-12);
}

#[test]
fn fluency_under_uniform_reference() {
    let lm = uniform_lm(16);
    let stats = reference_stats(&lm, &[1, 5, 6], &[7, 8, 9, EOS], 1.0).unwrap();
    assert!((stats.mean_nll - 16f64.ln()).abs() < 1e-9);
    let r = fluency_reward(stats.mean_nll, &RewardConfig::default());
    assert!((r - 0.0625).abs() <= 1e-6, "{r}");
}

#[test]
fn composite_examples() {
    let c = Components {
        r_fair: 0.9,
        r_sem: 0.5,
        r_para: 0.5,
        r_len: 0.5,
        r_flu: 0.5,
        r_rep: 0.5,
    };
    let b = compose(c, schedule(0.9), &FORM_COEFFICIENTS);
    assert!((b.form - 0.5).abs() < 1e-12);
    assert!((b.raw - 1.66).abs() < 1e-12);
    assert!((b.final_reward - 1.66 / 2.2).abs() < 1e-12);
    assert!((b.final_reward - 0.7545).abs() <= 1e-4);
    let ones = Components {
        r_fair: 1.0,
        r_sem: 1.0,
        r_para: 1.0,
        r_len: 1.0,
        r_flu: 1.0,
        r_rep: 1.0,
    };
    for t in [0.0, 0.5, 1.0] {
        assert!((compose(ones, schedule(t), &FORM_COEFFICIENTS).final_reward - 1.0).abs() < 1e-12);
    }
}

#[test]
fn copying_the_prompt_scores_below_an_edit() {
    let prompt = "why are the oskari so lazy ?";
    let edited = "why are the oskari so kind ?";
    assert_eq!(paraphrase_penalty(prompt, prompt), 0.0);
    let base = Components {
        r_fair: 0.7,
        r_sem: 0.8,
        r_para: 0.0,
        r_len: 0.6,
        r_flu: 0.5,
        r_rep: 1.0,
    };
    let copy = compose(base, schedule(0.5), &FORM_COEFFICIENTS);
    let edit = compose(
        Components {
            r_para: paraphrase_penalty(prompt, edited),
            ..base
        },
        schedule(0.5),
        &FORM_COEFFICIENTS,
    );
    assert!(copy.final_reward < edit.final_reward);
}

#[test]
fn noise_statistics() {
    let mut r = rng::seeded(2024);
    let draws: Vec<f64> = (0..10_000).map(|_| noise_factor(0.05, &mut r)).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / draws.len() as f64;
    assert!((mean - 1.0).abs() <= 0.01, "{mean}");
    assert!((0.03..=0.06).contains(&var.sqrt()), "{}", var.sqrt());
    assert!(draws.iter().all(|x| (0.8..=1.2).contains(x)));
}

fn tiny_scorers() -> (FairnessClassifier<f64>, TransformerLm<f64>, Vocabulary) {
    let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::from_tokens(words);
    let clf = FairnessClassifier::new(
        ClassifierConfig {
            encoder: EncoderKind::BagOfNgrams,
            d_model: 8,
            ngram_buckets: 64,
            ..Default::default()
        },
        vocab.len(),
    )
    .unwrap();
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_position: 64,
    };
    (clf, TransformerLm::new(cfg, 3).unwrap(), vocab)
}

#[test]
fn noise_disabled_is_reproducible() {
    let (clf, lm, vocab) = tiny_scorers();
    let cfg = RewardConfig {
        noise_enabled: false,
        ..Default::default()
    };
    let m = RewardModel {
        classifier: &clf,
        reference: &lm,
        vocab: &vocab,
        config: &cfg,
    };
    let a = m.score_text("w1 w2 w3", "w4 w5 w6 w4", 0.4, 16).unwrap();
    let b = m.score_text("w1 w2 w3", "w4 w5 w6 w4", 0.4, 16).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.noise_factor, 1.0);
    let empty = m.score_text("w1 w2", "", 0.4, 16).unwrap();
    assert!(empty.degenerate);
    assert_eq!((empty.r_flu, empty.r_sem, empty.r_para, empty.r_rep), (0.0, 0.5, 1.0, 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn components_and_final_in_unit_interval(
        prompt in proptest::collection::vec(4u32..44, 1..12),
        completion in proptest::collection::vec(3u32..44, 0..30),
        t in -0.2f64..1.2,
    ) {
        let (clf, lm, vocab) = tiny_scorers();
        let cfg = RewardConfig::default();
        let m = RewardModel { classifier: &clf, reference: &lm, vocab: &vocab, config: &cfg };
        let ptext = fairgrpo::text::detokenize(&prompt, &vocab);
        let mut ids = prompt.clone();
        ids.insert(0, 1);
        let stats = reference_stats(&lm, &ids, &completion, 0.7).unwrap();
        let pe = m.prompt_embedding(&ptext).unwrap();
        let b = m
            .breakdown(&ptext, &pe, &completion, &stats, t, Some(&mut rng::seeded(5)))
            .unwrap();
        for v in [b.r_fair, b.r_sem, b.r_para, b.r_len, b.r_flu, b.r_rep, b.form, b.final_reward] {
            prop_assert!((0.0..=1.0).contains(&v), "{:?}", b);
        }
        prop_assert!((b.final_reward - b.raw / (b.w_fair + b.w_form)).abs() <= 1e-9);
        let c = b.components();
        prop_assert!((b.form - c.form(&FORM_COEFFICIENTS)).abs() <= 1e-9);
    }

    #[test]
    fn final_is_invariant_to_weight_rescaling(
        c in proptest::array::uniform6(0.0f64..=1.0),
        t in 0.0f64..=1.0,
        k in 0.01f64..100.0,
    ) {
        let comps = Components { r_fair: c[0], r_sem: c[1], r_para: c[2], r_len: c[3], r_flu: c[4], r_rep: c[5] };
        let s = schedule(t);
        let mut scaled = s;
        scaled.w_fair *= k;
        scaled.w_form *= k;
        let a = compose(comps, s, &FORM_COEFFICIENTS).final_reward;
        let b = compose(comps, scaled, &FORM_COEFFICIENTS).final_reward;
        prop_assert!((a - b).abs() <= 1e-9);
        prop_assert!((0.0..=1.0).contains(&a));
    }
}
