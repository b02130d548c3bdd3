//! Prompt augmentation: synonym swaps, one-character typos, and
//! pattern-based rewrites.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::dataset::DatasetRecord;
use super::tokenizer::split_words;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParaphraseRule {
    /// Regular expression matched against the normalized prompt.
    pub pattern: String,
    /// Replacement; `$1`, `$2`, ... refer to capture groups.
    pub rewrite: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub synonym_dictionary: BTreeMap<String, Vec<String>>,
    pub replacement_probability: f64,
    pub perturbation_probability: f64,
    pub paraphrase_templates: Vec<ParaphraseRule>,
    /// Chance that the first matching paraphrase rule is applied.
    pub paraphrase_probability: f64,
    pub rng_seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        let syn = |k: &str, v: &[&str]| (k.to_string(), v.iter().map(|s| s.to_string()).collect());
        AugmentationConfig {
            synonym_dictionary: BTreeMap::from([
                syn("think", &["believe", "feel"]),
                syn("hire", &["employ", "recruit"]),
                syn("usually", &["typically", "often"]),
                syn("behave", &["act"]),
                syn("good", &["nice", "great"]),
                syn("true", &["correct", "right"]),
                syn("expect", &["anticipate"]),
                syn("company", &["business", "firm"]),
                syn("neighbors", &["neighbours"]),
                syn("heard", &["read"]),
                syn("popular", &["common"]),
                syn("travel", &["go", "get"]),
            ]),
            replacement_probability: 0.15,
            perturbation_probability: 0.05,
            paraphrase_templates: vec![
                ParaphraseRule {
                    pattern: r"^why are (.+) so (\w+) \?$".into(),
                    rewrite: "what explains that $1 are so $2 ?".into(),
                },
                ParaphraseRule {
                    pattern: r"^what do you think about (.+) \?$".into(),
                    rewrite: "what is your view of $1 ?".into(),
                },
                ParaphraseRule {
                    pattern: r"^what are (.+) like \?$".into(),
                    rewrite: "how would you describe $1 ?".into(),
                },
                ParaphraseRule {
                    pattern: r"^is it true that (.+) \?$".into(),
                    rewrite: "would you say that $1 ?".into(),
                },
            ],
            paraphrase_probability: 0.3,
            rng_seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// All probabilities zero: augmentation becomes the identity.
    pub fn disabled() -> Self {
        AugmentationConfig {
            replacement_probability: 0.0,
            perturbation_probability: 0.0,
            paraphrase_probability: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("replacement_probability", self.replacement_probability),
            ("perturbation_probability", self.perturbation_probability),
            ("paraphrase_probability", self.paraphrase_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if let Some((k, _)) = self.synonym_dictionary.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::Config(format!("synonym list for {k:?} is empty")));
        }
        for rule in &self.paraphrase_templates {
            Regex::new(&rule.pattern)
                .map_err(|e| Error::Config(format!("paraphrase pattern {:?}: {e}", rule.pattern)))?;
        }
        Ok(())
    }
}

fn perturb_word<R: rand::Rng + ?Sized>(word: &str, rng: &mut R) -> String {
    let mut chars: Vec<char> = word.chars().collect();
    if chars.len() < 4 || !chars.iter().all(|c| c.is_alphabetic()) {
        return word.to_string();
    }
    // first and last characters stay in place
    let i = rng.random_range(1..chars.len() - 2);
    if rng.random_bool(0.5) {
        chars.swap(i, i + 1);
    } else {
        chars.remove(i);
    }
    chars.into_iter().collect()
}

/// Augments the prompt of `record`; response, label, and category are kept.
/// The random stream depends only on the seed and the prompt text.
pub fn augment(record: &DatasetRecord, cfg: &AugmentationConfig) -> Result<DatasetRecord> {
    cfg.validate()?;
    let mut rng = rng::substream(cfg.rng_seed, &[rng::text_key(&record.prompt)]);
    let mut changed = false;
    let mut words = split_words(&record.prompt);
    for w in words.iter_mut() {
        if cfg.replacement_probability > 0.0 && rng.random_bool(cfg.replacement_probability) {
            if let Some(choices) = cfg.synonym_dictionary.get(w.as_str()) {
                *w = choices.choose(&mut rng).expect("validated non-empty").clone();
                changed = true;
            }
        }
        if cfg.perturbation_probability > 0.0 && rng.random_bool(cfg.perturbation_probability) {
            let p = perturb_word(w, &mut rng);
            changed |= p != *w;
            *w = p;
        }
    }
    let mut prompt = words.join(" ");
    if cfg.paraphrase_probability > 0.0 && rng.random_bool(cfg.paraphrase_probability) {
        for rule in &cfg.paraphrase_templates {
            let re = Regex::new(&rule.pattern).expect("validated pattern");
            if re.is_match(&prompt) {
                prompt = re.replace(&prompt, rule.rewrite.as_str()).into_owned();
                changed = true;
                break;
            }
        }
    }
    let mut out = record.clone();
    if changed {
        out.prompt = prompt;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{generate_synthetic_corpus, Category, Label};

    fn rec(prompt: &str) -> DatasetRecord {
        DatasetRecord {
            prompt: prompt.into(),
            response: Some("r".into()),
            label: Some(Label::Discriminatory),
            category: Category::Ethnic,
        }
    }

    #[test]
    fn forced_synonym_swap() {
        let cfg = AugmentationConfig {
            synonym_dictionary: BTreeMap::from([("happy".to_string(), vec!["glad".to_string()])]),
            replacement_probability: 1.0,
            ..AugmentationConfig::disabled()
        };
        assert_eq!(augment(&rec("i am happy"), &cfg).unwrap().prompt, "i am glad");
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let cfg = AugmentationConfig::disabled();
        for r in generate_synthetic_corpus(2, 50) {
            assert_eq!(augment(&r, &cfg).unwrap(), r);
        }
        let odd = rec("Why ARE   they so rude?");
        assert_eq!(augment(&odd, &cfg).unwrap(), odd);
    }

    #[test]
    fn deterministic_and_label_preserving() {
        let cfg = AugmentationConfig {
            replacement_probability: 0.5,
            perturbation_probability: 0.5,
            paraphrase_probability: 0.5,
            rng_seed: 9,
            ..Default::default()
        };
        for r in generate_synthetic_corpus(4, 200) {
            let a = augment(&r, &cfg).unwrap();
            assert_eq!(a, augment(&r, &cfg).unwrap());
            assert_eq!(a.label, r.label);
            assert_eq!(a.category, r.category);
            assert_eq!(a.response, r.response);
        }
    }

    #[test]
    fn paraphrase_rule_rewrites() {
        let cfg = AugmentationConfig {
            paraphrase_probability: 1.0,
            ..AugmentationConfig::disabled()
        };
        let out = augment(&rec("why are fogherders so rude ?"), &cfg).unwrap();
        assert_eq!(out.prompt, "what explains that fogherders are so rude ?");
    }

    #[test]
    fn perturbation_keeps_edges() {
        let mut r = rng::seeded(1);
        for _ in 0..100 {
            let p = perturb_word("lanternkeepers", &mut r);
            assert!(p.starts_with('l') && p.ends_with('s'));
            assert!(p.len() == 13 || p.len() == 14);
        }
        assert_eq!(perturb_word("abc", &mut r), "abc");
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = AugmentationConfig::disabled();
        cfg.perturbation_probability = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = AugmentationConfig::disabled();
        cfg.synonym_dictionary.insert("x".into(), vec![]);
        assert!(cfg.validate().is_err());
    }
}
