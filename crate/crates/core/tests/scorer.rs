use fairgrpo::numerics::Tensor;
use fairgrpo::scorer::{
    examples_from_records, split_examples, train_fairness_classifier, ClassifierConfig, ClassifierMetrics, Confusion,
    EncoderKind, Example, FairnessClassifier,
};
use fairgrpo::text::{generate_synthetic_corpus, tokenize, Label, TokenSequence, Vocabulary};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn corpus(seed: u64, n: usize) -> (Vec<Example>, Vocabulary) {
    let records = generate_synthetic_corpus(seed, n);
    let vocab = Vocabulary::build(
        records
            .iter()
            .flat_map(|r| [r.prompt.as_str(), r.response.as_deref().unwrap_or("")]),
        4000,
    );
    (examples_from_records(&records, &vocab, 64).unwrap(), vocab)
}

fn fast_config(encoder: EncoderKind, seed: u64) -> ClassifierConfig {
    ClassifierConfig {
        encoder,
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        d_ff: 64,
        max_len: 64,
        seed,
        ..Default::default()
    }
}

fn zero_head(clf: &mut FairnessClassifier<f32>) {
    for name in ["head.weight", "head.bias"] {
        let id = clf.params().find(name).unwrap();
        let shape = clf.params().value(id).shape().to_vec();
        clf.params_mut().get_mut(id).value = Tensor::zeros(&shape);
    }
}

#[test]
fn separable_corpus_reaches_high_f1() {
    let (examples, vocab) = corpus(1, 600);
    for kind in [EncoderKind::Transformer, EncoderKind::BagOfNgrams] {
        let cfg = fast_config(kind, 3);
        let (clf, m) = train_fairness_classifier::<f32>(&examples, vocab.len(), &cfg, |_, _| {}).unwrap();
        assert!(m.f1 >= 0.95, "{kind:?}: {m:?}");
        if kind != EncoderKind::Transformer {
            continue;
        }
        let train: Vec<String> = generate_synthetic_corpus(1, 600).into_iter().filter_map(|r| r.response).collect();
        let held_out = generate_synthetic_corpus(77, 200)
            .into_iter()
            .filter(|r| r.label == Some(Label::Neutral))
            .filter_map(|r| r.response)
            .find(|t| !train.contains(t))
            .unwrap();
        let p = clf.p_neutral(tokenize(&held_out, &vocab, 64, false).ids()).unwrap();
        assert!(p > 0.9, "{kind:?}: p_neutral {p} for {held_out:?}");
    }
}

#[test]
fn shuffled_labels_give_chance_accuracy() {
    let (mut examples, vocab) = corpus(2, 2000);
    let mut labels: Vec<Label> = examples.iter().map(|e| e.label).collect();
    labels.shuffle(&mut fairgrpo::rng::seeded(99));
    for (e, l) in examples.iter_mut().zip(labels) {
        e.label = l;
    }
    let cfg = fast_config(EncoderKind::BagOfNgrams, 4);
    let (_, m) = train_fairness_classifier::<f32>(&examples, vocab.len(), &cfg, |_, _| {}).unwrap();
    assert!((m.accuracy - 0.5).abs() <= 0.1, "{m:?}");
}

#[test]
fn training_is_deterministic() {
    let (examples, vocab) = corpus(3, 200);
    let cfg = fast_config(EncoderKind::Transformer, 5);
    let (a, ma) = train_fairness_classifier::<f32>(&examples, vocab.len(), &cfg, |_, _| {}).unwrap();
    let (b, mb) = train_fairness_classifier::<f32>(&examples, vocab.len(), &cfg, |_, _| {}).unwrap();
    assert_eq!(ma, mb);
    let ids = &examples[0].ids;
    assert_eq!(a.p_neutral(ids).unwrap(), b.p_neutral(ids).unwrap());
}

#[test]
fn single_class_dataset_is_refused() {
    let (examples, vocab) = corpus(4, 100);
    let only: Vec<Example> = examples.into_iter().filter(|e| e.label == Label::Neutral).collect();
    let err = train_fairness_classifier::<f32>(&only, vocab.len(), &ClassifierConfig::default(), |_, _| {}).unwrap_err();
    assert!(err.to_string().contains("both labels"), "{err}");
}

#[test]
fn split_is_ninety_ten_and_seeded() {
    let (examples, _) = corpus(5, 100);
    let (train, val) = split_examples(&examples, 0.1, 7);
    assert_eq!((train.len(), val.len()), (90, 10));
    assert_eq!(split_examples(&examples, 0.1, 7).1, val);
}

#[test]
fn metrics_match_confusion_oracle() {
    use Label::{Discriminatory as D, Neutral as N};
    let gold = [D, D, D, N, N, N, N, D];
    let pred = [D, N, D, N, D, N, N, D];
    // tp = 3, fn = 1, fp = 1, tn = 3
    let c = Confusion::from_pairs(&gold, &pred);
    assert_eq!((c.true_positive, c.false_negative, c.false_positive, c.true_negative), (3, 1, 1, 3));
    let m = ClassifierMetrics::from_confusion(&c, 0.2, 0.3);
    assert_eq!(m.accuracy, 6.0 / 8.0);
    assert_eq!(m.precision, 3.0 / 4.0);
    assert_eq!(m.recall, 3.0 / 4.0);
    assert_eq!(m.f1, 2.0 * 0.75 * 0.75 / 1.5);
    let none = ClassifierMetrics::from_confusion(&Confusion::from_pairs(&[N, N], &[N, N]), 0.0, 0.0);
    assert_eq!((none.precision, none.recall, none.f1, none.accuracy), (0.0, 0.0, 0.0, 1.0));
}

#[test]
fn evaluate_agrees_with_confusion_oracle() {
    let (examples, vocab) = corpus(6, 80);
    let clf = FairnessClassifier::<f32>::new(fast_config(EncoderKind::BagOfNgrams, 1), vocab.len()).unwrap();
    let m = clf.evaluate(&examples, 0.0).unwrap();
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for e in &examples {
        let predicted_neutral = clf.p_neutral(&e.ids).unwrap() >= 0.5;
        match (e.label == Label::Neutral, predicted_neutral) {
            (false, false) => tp += 1,
            (true, false) => fp += 1,
            (true, true) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let acc = (tp + tn) as f64 / examples.len() as f64;
    assert_eq!(m.accuracy, acc);
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    assert_eq!(m.precision, precision);
    assert_eq!(m.recall, recall);
}

#[test]
fn zero_logit_head_gives_one_half() {
    let (_, vocab) = corpus(7, 20);
    let mut clf = FairnessClassifier::<f32>::new(fast_config(EncoderKind::Transformer, 2), vocab.len()).unwrap();
    zero_head(&mut clf);
    assert_eq!(clf.p_neutral(&[5, 6, 7]).unwrap(), 0.5);
    assert_eq!(clf.p_neutral(&[]).unwrap(), 0.5);
}

#[test]
fn empty_text_uses_head_prior_and_embeds_to_zero() {
    let (_, vocab) = corpus(8, 20);
    let mut clf = FairnessClassifier::<f32>::new(fast_config(EncoderKind::Transformer, 2), vocab.len()).unwrap();
    let id = clf.params().find("head.bias").unwrap();
    clf.params_mut().get_mut(id).value = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
    let p = clf.p_neutral(&[]).unwrap();
    assert!((p - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-7);
    let e = clf.embed(&[]).unwrap();
    assert!(e.degenerate);
    assert_eq!(e.vector, vec![0.0; 32]);
}

#[test]
fn embedding_dimension_and_self_cosine() {
    let (examples, vocab) = corpus(9, 20);
    let clf = FairnessClassifier::<f32>::new(ClassifierConfig::default(), vocab.len()).unwrap();
    assert_eq!(clf.embedding_dim(), 64);
    let a = clf.embed(&examples[0].ids).unwrap();
    let b = clf.embed(&examples[0].ids).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.vector.len(), 64);
    let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
    let n: f64 = a.vector.iter().map(|x| x * x).sum();
    assert!((dot / n - 1.0).abs() < 1e-6);
}

#[test]
fn checkpoint_round_trip() {
    let (examples, vocab) = corpus(10, 40);
    let clf = FairnessClassifier::<f32>::new(fast_config(EncoderKind::BagOfNgrams, 6), vocab.len()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clf.ckpt");
    clf.save(&path).unwrap();
    let back = FairnessClassifier::<f32>::load(&path).unwrap();
    assert_eq!(back.config(), clf.config());
    for e in &examples {
        assert_eq!(back.p_neutral(&e.ids).unwrap(), clf.p_neutral(&e.ids).unwrap());
    }
}

fn small_clf(kind: EncoderKind) -> FairnessClassifier<f32> {
    FairnessClassifier::new(fast_config(kind, 8), 60).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn p_neutral_is_padding_and_position_invariant(
        ids in proptest::collection::vec(4u32..60, 0..20),
        pad in 0usize..10,
        other in proptest::collection::vec(4u32..60, 1..20),
    ) {
        for kind in [EncoderKind::Transformer, EncoderKind::BagOfNgrams] {
            let clf = small_clf(kind);
            let p = clf.p_neutral(&ids).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            let probs = clf.probabilities(&ids).unwrap();
            prop_assert_eq!(probs[0] + probs[1], 1.0);
            let seq = TokenSequence::from_ids(ids.clone());
            let padded = seq.left_padded(ids.len() + pad);
            prop_assert_eq!(clf.p_neutral(padded.ids()).unwrap(), p);
            let o = TokenSequence::from_ids(other.clone());
            let batch = clf.p_neutral_batch(&[o.clone(), padded.clone()]).unwrap();
            let swapped = clf.p_neutral_batch(&[padded, o]).unwrap();
            prop_assert_eq!(batch[1], p);
            prop_assert_eq!(swapped[0], p);
            let e = clf.embed(&ids).unwrap();
            let ep = clf.embed(seq.left_padded(ids.len() + pad).ids()).unwrap();
            prop_assert_eq!(e, ep);
        }
    }
}
