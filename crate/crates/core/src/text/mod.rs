mod augment;
mod dataset;
pub mod synthetic;
mod tokenizer;

pub use augment::{augment, AugmentationConfig, ParaphraseRule};
pub use dataset::{load_dataset, parse_dataset, save_dataset, to_ndjson, Category, DatasetRecord, Label};
pub use synthetic::{generate_prompts, generate_synthetic_corpus};
pub use tokenizer::{
    detokenize, encode_prompt, normalize, split_words, tokenize, TokenSequence, Vocabulary, BOS,
    DEFAULT_VOCAB_CAP, EOS, PAD, UNK,
};
