//! Learned judges: the neutral/biased classifier and the sentence
//! embedding derived from its encoder.

mod classifier;
mod metrics;

pub use classifier::{
    examples_from_records, ngram_features, split_examples, train_fairness_classifier, ClassifierConfig, Embedding,
    EncoderKind, Example, FairnessClassifier, BIASED, NEUTRAL,
};
pub use metrics::{ClassifierMetrics, Confusion};
