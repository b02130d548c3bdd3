use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{ClassifierMetrics, Confusion};
use crate::error::{Error, Result};
use crate::model::{Backbone, ModelConfig, Projection};
use crate::numerics::{checkpoint, AdamW, AdamWConfig, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::rng;
use crate::text::{tokenize, DatasetRecord, Label, TokenSequence, Vocabulary, PAD};

const KIND: &str = "fairness_classifier";

/// Index of each class in the two output logits.
pub const BIASED: usize = 0;
pub const NEUTRAL: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Bidirectional transformer encoder.
    Transformer,
    /// Mean of hashed unigram and bigram embeddings.
    BagOfNgrams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub encoder: EncoderKind,
    /// Width of the pooled representation, which is also the sentence
    /// embedding dimension.
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub ngram_buckets: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            encoder: EncoderKind::Transformer,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 128,
            ngram_buckets: 4096,
            epochs: 5,
            batch_size: 16,
            learning_rate: 1e-3,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.max_len == 0 || self.ngram_buckets == 0 {
            return Err(Error::Config("classifier epochs, batch size, max_len and buckets must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Encoder {
    Transformer(Backbone),
    Ngrams { table: ParamId },
}

#[derive(Serialize, Deserialize)]
struct StoredConfig {
    kind: String,
    vocab_size: usize,
    classifier: ClassifierConfig,
}

/// Unigram and bigram feature ids in `0..buckets`.
pub fn ngram_features(ids: &[u32], buckets: usize) -> Vec<usize> {
    let b = buckets as u64;
    let mut out: Vec<usize> = ids
        .iter()
        .map(|&i| ((u64::from(i).wrapping_mul(2_654_435_761)) % b) as usize)
        .collect();
    for w in ids.windows(2) {
        let h = u64::from(w[0])
            .wrapping_mul(1_000_003)
            .wrapping_add(u64::from(w[1]).wrapping_mul(2_654_435_761))
            .wrapping_add(0x9e37_79b9);
        out.push((h % b) as usize);
    }
    out
}

/// Binary neutral/biased classifier over token ids. Its pooled encoder
/// output doubles as the sentence embedding.
#[derive(Clone, Debug)]
pub struct FairnessClassifier<T> {
    config: ClassifierConfig,
    vocab_size: usize,
    store: ParamStore<T>,
    encoder: Encoder,
    head: Projection,
}

impl<T: Scalar> FairnessClassifier<T> {
    pub fn new(config: ClassifierConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::substream(config.seed, &[0xc1a5]);
        let d = config.d_model;
        let encoder = match config.encoder {
            EncoderKind::Transformer => {
                let dims = ModelConfig {
                    vocab_size,
                    d_model: d,
                    n_layers: config.n_layers,
                    n_heads: config.n_heads,
                    d_ff: config.d_ff,
                    max_position: config.max_len,
                };
                Encoder::Transformer(Backbone::new(&mut store, "encoder.", &dims, false, &mut r)?)
            }
            EncoderKind::BagOfNgrams => {
                let t = Tensor::randn(&[config.ngram_buckets, d], 0.1, &mut r);
                Encoder::Ngrams {
                    table: store.add("encoder.ngram_emb", t, true),
                }
            }
        };
        let head = Projection::new(&mut store, "head", d, 2, &mut r);
        Ok(FairnessClassifier {
            config,
            vocab_size,
            store,
            encoder,
            head,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.d_model
    }

    /// Token ids the classifier sees for a text: head-truncated, unpadded.
    pub fn encode_text(&self, text: &str, vocab: &Vocabulary) -> Vec<u32> {
        tokenize(text, vocab, self.config.max_len, false).ids().to_vec()
    }

    /// Drops pad ids and keeps the first `max_len` real tokens.
    fn clip(&self, ids: &[u32]) -> Vec<u32> {
        ids.iter().copied().filter(|&t| t != PAD).take(self.config.max_len).collect()
    }

    /// Records the pooled representation `[1, d]`; `None` for no tokens.
    fn pooled(&self, tape: &mut Tape<T>, ids: &[u32]) -> Result<Option<Var>> {
        let ids = self.clip(ids);
        if ids.is_empty() {
            return Ok(None);
        }
        let ids = ids.as_slice();
        let h = match &self.encoder {
            Encoder::Transformer(b) => b.forward(&self.store, tape, ids, None)?,
            Encoder::Ngrams { table } => {
                let t = tape.param(&self.store, *table);
                tape.embedding(t, &ngram_features(ids, self.config.ngram_buckets))?
            }
        };
        Ok(Some(tape.mean_rows(h)?))
    }

    /// Records the two class logits `[1, 2]`. Without tokens the pooled
    /// vector is zero, so the logits are the head bias.
    fn logits_tape(&self, tape: &mut Tape<T>, ids: &[u32]) -> Result<Var> {
        let pooled = match self.pooled(tape, ids)? {
            Some(p) => p,
            None => tape.constant(Tensor::zeros(&[1, self.config.d_model])),
        };
        self.head.apply(&self.store, tape, pooled, None)
    }

    /// `[P(biased), P(neutral)]`.
    pub fn probabilities(&self, ids: &[u32]) -> Result<[f64; 2]> {
        let mut tape = Tape::no_grad();
        let l = self.logits_tape(&mut tape, ids)?;
        let l = tape.value(l).data();
        let (b, n) = (l[BIASED].as_f64(), l[NEUTRAL].as_f64());
        let m = b.max(n);
        let (eb, en) = ((b - m).exp(), (n - m).exp());
        let p_neutral = en / (eb + en);
        Ok([1.0 - p_neutral, p_neutral])
    }

    /// Probability of the neutral class.
    pub fn p_neutral(&self, ids: &[u32]) -> Result<f64> {
        Ok(self.probabilities(ids)?[NEUTRAL])
    }

    /// `p_neutral` for a whole batch of possibly padded sequences.
    pub fn p_neutral_batch(&self, batch: &[TokenSequence]) -> Result<Vec<f64>> {
        batch.iter().map(|s| self.p_neutral(s.real_ids())).collect()
    }

    pub fn predict(&self, ids: &[u32]) -> Result<Label> {
        Ok(if self.p_neutral(ids)? >= 0.5 { Label::Neutral } else { Label::Discriminatory })
    }

    /// Sentence embedding: the pooled encoder output. Text without tokens
    /// gives the zero vector and `degenerate = true`.
    pub fn embed(&self, ids: &[u32]) -> Result<Embedding> {
        let mut tape = Tape::no_grad();
        Ok(match self.pooled(&mut tape, ids)? {
            Some(p) => Embedding {
                vector: tape.value(p).to_f64(),
                degenerate: false,
            },
            None => Embedding {
                vector: vec![0.0; self.config.d_model],
                degenerate: true,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = StoredConfig {
            kind: KIND.into(),
            vocab_size: self.vocab_size,
            classifier: self.config.clone(),
        };
        checkpoint::save(path, &self.store, serde_json::to_value(cfg)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = checkpoint::load::<T>(path)?;
        let cfg: StoredConfig = serde_json::from_value(ckpt.manifest.config.clone())
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if cfg.kind != KIND {
            return Err(Error::Incompatible(format!("{} holds a {}, not a classifier", path.display(), cfg.kind)));
        }
        let mut clf = Self::new(cfg.classifier, cfg.vocab_size)?;
        checkpoint::restore_into(&mut clf.store, &ckpt)?;
        Ok(clf)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub degenerate: bool,
}

/// One labeled example: classifier input ids and gold label.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub ids: Vec<u32>,
    pub label: Label,
}

/// Classifier inputs from labeled records: the response text.
pub fn examples_from_records(records: &[DatasetRecord], vocab: &Vocabulary, max_len: usize) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let Some(label) = r.label else { continue };
        let text = r
            .response
            .as_deref()
            .ok_or_else(|| Error::Dataset(format!("labeled record {} has no response", i + 1)))?;
        out.push(Example {
            ids: tokenize(text, vocab, max_len, false).ids().to_vec(),
            label,
        });
    }
    Ok(out)
}

/// Deterministic shuffled split; the validation part gets
/// `round(fraction * n)` examples.
pub fn split_examples(examples: &[Example], fraction: f64, seed: u64) -> (Vec<Example>, Vec<Example>) {
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(&mut rng::substream(seed, &[0x5b117]));
    let n_val = (fraction * examples.len() as f64).round() as usize;
    let val = idx[..n_val].iter().map(|&i| examples[i].clone()).collect();
    let train = idx[n_val..].iter().map(|&i| examples[i].clone()).collect();
    (train, val)
}

fn class_index(label: Label) -> usize {
    match label {
        Label::Neutral => NEUTRAL,
        Label::Discriminatory => BIASED,
    }
}

impl<T: Scalar> FairnessClassifier<T> {
    /// Mean cross-entropy of a batch, recorded on `tape`.
    fn batch_loss(&self, tape: &mut Tape<T>, batch: &[&Example]) -> Result<Var> {
        let mut total: Option<Var> = None;
        for ex in batch {
            let logits = self.logits_tape(tape, &ex.ids)?;
            let lp = tape.log_softmax_rows(logits)?;
            let picked = tape.pick(lp, &[class_index(ex.label)])?;
            let s = tape.sum(picked);
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
        }
        let total = total.ok_or_else(|| Error::contract("empty batch"))?;
        Ok(tape.scale(total, T::of(-1.0 / batch.len() as f64)))
    }

    /// Mean cross-entropy and metrics on `examples`.
    pub fn evaluate(&self, examples: &[Example], training_loss: f64) -> Result<ClassifierMetrics> {
        let mut loss = 0.0;
        let mut gold = Vec::with_capacity(examples.len());
        let mut pred = Vec::with_capacity(examples.len());
        for ex in examples {
            let p = self.probabilities(&ex.ids)?;
            loss -= p[class_index(ex.label)].max(1e-300).ln();
            gold.push(ex.label);
            pred.push(if p[NEUTRAL] >= 0.5 { Label::Neutral } else { Label::Discriminatory });
        }
        let loss = if examples.is_empty() { 0.0 } else { loss / examples.len() as f64 };
        Ok(ClassifierMetrics::from_confusion(&Confusion::from_pairs(&gold, &pred), loss, training_loss))
    }
}

/// Trains a fresh classifier on a seeded split of `examples` and reports
/// validation metrics.
pub fn train_fairness_classifier<T: Scalar>(
    examples: &[Example],
    vocab_size: usize,
    config: &ClassifierConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(FairnessClassifier<T>, ClassifierMetrics)> {
    let neutral = examples.iter().filter(|e| e.label == Label::Neutral).count();
    if neutral == 0 || neutral == examples.len() {
        return Err(Error::Dataset(format!(
            "classifier training needs both labels; got {neutral} neutral of {}",
            examples.len()
        )));
    }
    let mut clf = FairnessClassifier::<T>::new(config.clone(), vocab_size)?;
    let (train, val) = split_examples(examples, config.validation_fraction, config.seed);
    let mut opt = AdamW::new(AdamWConfig::with_lr(config.learning_rate));
    let mut last = 0.0;
    for epoch in 0..config.epochs {
        let mut order: Vec<&Example> = train.iter().collect();
        order.shuffle(&mut rng::substream(config.seed, &[0xe90c, epoch as u64]));
        let mut sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let loss = clf.batch_loss(&mut tape, batch)?;
            sum += tape.value(loss).item()?.as_f64();
            batches += 1;
            let grads = tape.backward(loss)?;
            clf.store.accumulate(&grads, T::one())?;
            opt.step(&mut clf.store)?;
        }
        last = sum / batches.max(1) as f64;
        log::info!("classifier epoch {epoch}: loss {last:.4}");
        on_epoch(epoch, last);
    }
    let metrics = clf.evaluate(&val, last)?;
    Ok((clf, metrics))
}
