use std::collections::BTreeMap;
use std::io::{self, BufRead, Read, Write};
use std::path::{Path, PathBuf};

use fairgrpo::config::RunConfig;
use fairgrpo::fsutil;
use fairgrpo::grpo::{self, Comparison, TrainOutput};
use fairgrpo::model::pretrain::{self as pt, training_sequence};
use fairgrpo::rewards::RewardModel;
use fairgrpo::rng;
use fairgrpo::sampling::{completion_body, sample_completion, SamplerConfig};
use fairgrpo::scorer::{examples_from_records, train_fairness_classifier};
use fairgrpo::text::{
    augment, detokenize, encode_prompt, generate_prompts, generate_synthetic_corpus, load_dataset, save_dataset,
    DatasetRecord, Vocabulary,
};
use fairgrpo::{Error, FairnessClassifier, LanguageModel};
use serde::{Deserialize, Serialize};

use crate::exit::{self, Failure, Outcome};

/// Seed paths of the generated data sets under the global seed.
const DATA_STREAM: u64 = 0xda7a;
const LORA_STREAM: u64 = 0x10a;
const GENERATE_STREAM: u64 = 0x9e4;
/// Progress at which `eval` composes rewards: the end of training.
const EVAL_T: f64 = 1.0;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    Ok(fsutil::write_atomic(path, text.as_bytes())?)
}

/// Writes to `path` atomically, or to stdout.
fn emit(path: Option<&Path>, text: &str) -> Outcome<()> {
    match path {
        Some(p) => Ok(fsutil::write_atomic(p, text.as_bytes())?),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Failure::new(exit::IO, format!("stdout: {e}")))
        }
    }
}

fn load_vocab(cfg: &RunConfig) -> Outcome<Vocabulary> {
    let p = cfg.paths.resolve(&cfg.paths.vocabulary);
    exit::require(&p, "gen-data")?;
    Ok(Vocabulary::load(&p)?)
}

fn load_records(path: &Path) -> Outcome<Vec<DatasetRecord>> {
    exit::require(path, "gen-data")?;
    Ok(load_dataset(path)?)
}

fn load_prompts(path: &Path) -> Outcome<Vec<String>> {
    Ok(load_records(path)?.into_iter().map(|r| r.prompt).collect())
}

fn vocab_mismatch(what: &str, path: &Path, found: usize, vocab: &Vocabulary) -> Outcome<()> {
    if found == vocab.len() {
        return Ok(());
    }
    Err(Failure::new(
        exit::INCOMPATIBLE,
        format!(
            "{what} {} was built for {found} tokens but the vocabulary has {}",
            path.display(),
            vocab.len()
        ),
    ))
}

fn load_model(path: &Path, producer: &str, vocab: &Vocabulary) -> Outcome<LanguageModel> {
    exit::require(path, producer)?;
    let lm = LanguageModel::load(path)?;
    vocab_mismatch("model", path, lm.config().vocab_size, vocab)?;
    Ok(lm)
}

fn load_classifier(cfg: &RunConfig, vocab: &Vocabulary) -> Outcome<FairnessClassifier> {
    let p = cfg.paths.resolve(&cfg.paths.classifier);
    exit::require(&p, "train-classifier")?;
    let clf = FairnessClassifier::load(&p)?;
    vocab_mismatch("classifier", &p, clf.vocab_size(), vocab)?;
    Ok(clf)
}

fn grpo_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.resolve(&cfg.paths.grpo_dir)
}

pub fn init_config(cfg: &RunConfig, output: Option<&Path>) -> Outcome<()> {
    emit(output, &cfg.to_toml()?)
}

#[derive(Serialize)]
struct DataSummary {
    records: usize,
    labels: BTreeMap<String, usize>,
    categories: BTreeMap<String, usize>,
    prompts: usize,
    validation_prompts: usize,
    eval_prompts: usize,
    vocabulary_size: usize,
}

pub fn gen_data(cfg: &RunConfig, n: Option<usize>, output: Option<&Path>) -> Outcome<()> {
    let n = n.unwrap_or(cfg.data.n_records);
    if n == 0 {
        return Err(Failure::new(exit::DATA, "the corpus needs at least one record"));
    }
    let seed = |k: u64| rng::derive_seed(cfg.seed, &[DATA_STREAM, k]);
    let corpus = generate_synthetic_corpus(seed(0), n);
    let mut prompts = generate_prompts(seed(1), cfg.data.n_prompts);
    if cfg.data.augment_prompts {
        let extra = prompts
            .iter()
            .map(|r| augment(r, &cfg.augmentation))
            .collect::<fairgrpo::Result<Vec<_>>>()?;
        prompts.extend(extra);
    }
    let validation = generate_prompts(seed(2), cfg.data.n_validation_prompts);
    let eval = generate_prompts(seed(3), cfg.data.n_eval_prompts);

    let texts = corpus
        .iter()
        .flat_map(|r| std::iter::once(r.prompt.as_str()).chain(r.response.as_deref()))
        .chain(prompts.iter().chain(&validation).chain(&eval).map(|r| r.prompt.as_str()));
    let vocab = Vocabulary::build(texts, cfg.data.vocab_cap);

    let dataset = output.map_or_else(|| cfg.paths.resolve(&cfg.paths.dataset), Path::to_path_buf);
    save_dataset(&dataset, &corpus)?;
    save_dataset(&cfg.paths.resolve(&cfg.paths.prompts), &prompts)?;
    save_dataset(&cfg.paths.resolve(&cfg.paths.validation_prompts), &validation)?;
    save_dataset(&cfg.paths.resolve(&cfg.paths.eval_prompts), &eval)?;
    vocab.save(&cfg.paths.resolve(&cfg.paths.vocabulary))?;

    let mut summary = DataSummary {
        records: corpus.len(),
        labels: BTreeMap::new(),
        categories: BTreeMap::new(),
        prompts: prompts.len(),
        validation_prompts: validation.len(),
        eval_prompts: eval.len(),
        vocabulary_size: vocab.len(),
    };
    for r in &corpus {
        let label = r.label.map_or("unlabeled", |l| l.as_str());
        *summary.labels.entry(label.into()).or_default() += 1;
        *summary.categories.entry(r.category.as_str().into()).or_default() += 1;
    }
    let stem = dataset.file_stem().unwrap_or_default().to_string_lossy();
    write_json(&dataset.with_file_name(format!("{stem}.summary.json")), &summary)?;
    log::info!("wrote {} records to {}", corpus.len(), dataset.display());
    Ok(())
}

pub fn pretrain(cfg: &RunConfig) -> Outcome<()> {
    let vocab = load_vocab(cfg)?;
    let records = load_records(&cfg.paths.resolve(&cfg.paths.dataset))?;
    let sequences: Vec<Vec<u32>> = records
        .iter()
        .filter_map(|r| {
            let response = r.response.as_deref()?;
            Some(training_sequence(&r.prompt, response, &vocab, cfg.grpo.max_prompt_len, cfg.sampler.max_new_tokens))
        })
        .collect();
    let shape = cfg.model.with_vocab(vocab.len());
    shape.check_lengths(cfg.grpo.max_prompt_len, cfg.sampler.max_new_tokens)?;
    let mut lm = LanguageModel::new(shape, rng::derive_seed(cfg.pretrain.seed, &[1]))?;
    let losses = pt::pretrain(&mut lm, &sequences, &cfg.pretrain, |_, _| {})?;
    let path = cfg.paths.resolve(&cfg.paths.base_model);
    lm.save(&path)?;
    write_json(&cfg.paths.resolve(Path::new("pretrain_metrics.json")), &BTreeMap::from([("epoch_losses", losses)]))?;
    log::info!("wrote base model to {}", path.display());
    Ok(())
}

pub fn train_classifier(cfg: &RunConfig) -> Outcome<()> {
    let vocab = load_vocab(cfg)?;
    let records = load_records(&cfg.paths.resolve(&cfg.paths.dataset))?;
    let examples = examples_from_records(&records, &vocab, cfg.classifier.max_len)?;
    let (clf, metrics) = train_fairness_classifier::<f32>(&examples, vocab.len(), &cfg.classifier, |_, _| {})?;
    let path = cfg.paths.resolve(&cfg.paths.classifier);
    clf.save(&path)?;
    write_json(&cfg.paths.resolve(Path::new("classifier_metrics.json")), &metrics)?;
    log::info!("classifier f1 {:.4}, accuracy {:.4}", metrics.f1, metrics.accuracy);
    Ok(())
}

#[derive(Serialize)]
struct GrpoSummary {
    steps: usize,
    best_step: usize,
    best_validation_reward: Option<f64>,
    base_hash: String,
}

pub fn train_grpo(cfg: &RunConfig, max_steps: Option<usize>) -> Outcome<()> {
    let vocab = load_vocab(cfg)?;
    let base = load_model(&cfg.paths.resolve(&cfg.paths.base_model), "pretrain", &vocab)?;
    let clf = load_classifier(cfg, &vocab)?;
    let prompts = load_prompts(&cfg.paths.resolve(&cfg.paths.prompts))?;
    let validation = load_prompts(&cfg.paths.resolve(&cfg.paths.validation_prompts))?;

    let reference = base.freeze();
    let rewards = RewardModel {
        classifier: &clf,
        reference: &reference,
        vocab: &vocab,
        config: &cfg.rewards,
    };
    let mut policy = base;
    policy.attach_lora(&cfg.lora, rng::derive_seed(cfg.grpo.seed, &[LORA_STREAM]))?;
    let mut gcfg = cfg.grpo.clone();
    if max_steps.is_some() {
        gcfg.max_steps = max_steps;
    }
    gcfg.validate()?;
    let dir = grpo_dir(cfg);
    let output = TrainOutput { dir: Some(dir.clone()) };
    cfg.save(&dir.join("config.toml"))?;
    let report = grpo::train(&mut policy, &prompts, &validation, &rewards, &cfg.sampler, &gcfg, &output, |_| {})?;
    let summary = GrpoSummary {
        steps: report.steps,
        best_step: report.best_step,
        best_validation_reward: report.best_validation_reward.is_finite().then_some(report.best_validation_reward),
        base_hash: policy.base_hash(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    log::info!("{} steps; best checkpoint from step {}", report.steps, report.best_step);
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreRequest {
    prompt: String,
    completion: String,
    t: f64,
}

pub fn score(cfg: &RunConfig, input: Option<&Path>, output: Option<&Path>) -> Outcome<()> {
    let vocab = load_vocab(cfg)?;
    let reference = load_model(&cfg.paths.resolve(&cfg.paths.base_model), "pretrain", &vocab)?.freeze();
    let clf = load_classifier(cfg, &vocab)?;
    let rewards = RewardModel {
        classifier: &clf,
        reference: &reference,
        vocab: &vocab,
        config: &cfg.rewards,
    };
    let (text, source) = match input.filter(|p| p.as_os_str() != "-") {
        Some(p) => {
            exit::require(p, "score")?;
            (fsutil::read_to_string(p)?, p.to_path_buf())
        }
        None => {
            let mut s = String::new();
            io::stdin()
                .lock()
                .read_to_string(&mut s)
                .map_err(|e| Failure::new(exit::IO, format!("stdin: {e}")))?;
            (s, PathBuf::from("<stdin>"))
        }
    };
    let mut out = String::new();
    for (i, line) in text.as_bytes().lines().enumerate() {
        let line = line.map_err(|e| Failure::new(exit::IO, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let req: ScoreRequest = serde_json::from_str(&line).map_err(|e| Error::Data {
            path: source.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let b = rewards.score_text(&req.prompt, &req.completion, req.t, cfg.grpo.max_prompt_len)?;
        out.push_str(&serde_json::to_string(&b).map_err(Error::from)?);
        out.push('\n');
    }
    emit(output, &out)
}

pub fn eval(cfg: &RunConfig, base: Option<&Path>, tuned: Option<&Path>) -> Outcome<()> {
    let vocab = load_vocab(cfg)?;
    let base_path = base.map_or_else(|| cfg.paths.resolve(&cfg.paths.base_model), Path::to_path_buf);
    let tuned_path = tuned.map_or_else(|| TrainOutput { dir: Some(grpo_dir(cfg)) }.best_path().unwrap(), Path::to_path_buf);
    let base = load_model(&base_path, "pretrain", &vocab)?;
    let tuned = load_model(&tuned_path, "train-grpo", &vocab)?;
    if base.config() != tuned.config() {
        return Err(Failure::new(
            exit::INCOMPATIBLE,
            format!("{} and {} have different shapes", base_path.display(), tuned_path.display()),
        ));
    }
    let clf = load_classifier(cfg, &vocab)?;
    let prompts = load_prompts(&cfg.paths.resolve(&cfg.paths.eval_prompts))?;
    let reference = base.freeze();
    let rewards = RewardModel {
        classifier: &clf,
        reference: &reference,
        vocab: &vocab,
        config: &cfg.rewards,
    };
    let sampler = SamplerConfig {
        group_size: cfg.eval.samples_per_prompt,
        rng_seed: cfg.eval.seed,
        ..cfg.sampler.clone()
    };
    let before = grpo::evaluate(&base, &prompts, &rewards, &sampler, cfg.grpo.max_prompt_len, EVAL_T)?;
    let after = grpo::evaluate(&tuned, &prompts, &rewards, &sampler, cfg.grpo.max_prompt_len, EVAL_T)?;
    let report = Comparison::new(&before, &after);
    let csv = report.to_csv();
    fsutil::write_atomic(&cfg.paths.resolve(Path::new("eval_report.csv")), csv.as_bytes())?;
    write_json(&cfg.paths.resolve(Path::new("eval_report.json")), &report)?;
    write_json(&cfg.paths.resolve(Path::new("plot_data.json")), &report.plot_data())?;
    emit(None, &csv)
}

#[derive(Serialize)]
struct Generation<'a> {
    prompt: &'a str,
    completion: String,
    finished: bool,
}

pub fn generate(
    cfg: &RunConfig,
    mut prompts: Vec<String>,
    input: Option<&Path>,
    model: Option<&Path>,
    output: Option<&Path>,
) -> Outcome<()> {
    if let Some(p) = input {
        prompts.extend(load_prompts(p)?);
    }
    if prompts.is_empty() {
        return Err(Failure::new(exit::DATA, "no prompts given; use --prompt or --input"));
    }
    let vocab = load_vocab(cfg)?;
    let path = model.map_or_else(|| TrainOutput { dir: Some(grpo_dir(cfg)) }.best_path().unwrap(), Path::to_path_buf);
    let lm = load_model(&path, "train-grpo", &vocab)?;
    let mut out = String::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let ids = encode_prompt(prompt, &vocab, cfg.grpo.max_prompt_len, false);
        let mut r = rng::substream(cfg.sampler.rng_seed, &[GENERATE_STREAM, i as u64]);
        let c = sample_completion(&lm, &ids, &cfg.sampler, &mut r)?;
        let tokens = c.tokens.real_ids();
        let body = completion_body(tokens);
        let g = Generation {
            prompt,
            completion: detokenize(body, &vocab),
            finished: body.len() < tokens.len(),
        };
        out.push_str(&serde_json::to_string(&g).map_err(Error::from)?);
        out.push('\n');
    }
    emit(output, &out)
}
