use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::{compute_advantages, eval, grpo_loss, GrpoConfig};
use crate::error::{Error, Result};
use crate::model::TransformerLm;
use crate::numerics::{AdamW, AdamWConfig, Scalar, Tape};
use crate::rewards::{schedule, RewardModel};
use crate::rng;
use crate::sampling::{sample_group, SamplerConfig};
use crate::text::encode_prompt;

pub const CSV_HEADER: &str = "step,t,w_form,w_fair,mean_reward,r_fair,r_sem,r_para,r_len,r_flu,r_rep,loss,kl,clip_fraction";

/// Steps between log records.
pub const LOG_EVERY: usize = 10;

/// Progress used when scoring the validation set, so that epochs are
/// compared under the same weights.
pub const VALIDATION_T: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRecord {
    pub step: usize,
    pub t: f64,
    pub w_form: f64,
    pub w_fair: f64,
    /// Mean pre-noise composite reward of the step's completions.
    pub mean_reward: f64,
    pub r_fair: f64,
    pub r_sem: f64,
    pub r_para: f64,
    pub r_len: f64,
    pub r_flu: f64,
    pub r_rep: f64,
    pub loss: f64,
    pub kl: f64,
    pub clip_fraction: f64,
}

impl TrainLogRecord {
    pub fn csv_row(&self) -> String {
        let v = [
            self.t,
            self.w_form,
            self.w_fair,
            self.mean_reward,
            self.r_fair,
            self.r_sem,
            self.r_para,
            self.r_len,
            self.r_flu,
            self.r_rep,
            self.loss,
            self.kl,
            self.clip_fraction,
        ];
        let mut s = self.step.to_string();
        for x in v {
            write!(s, ",{x:.8}").expect("writing to a String");
        }
        s
    }
}

/// Where training artifacts go. Without a directory nothing is written.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

impl TrainOutput {
    pub fn log_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("train_log.csv"))
    }

    pub fn best_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("best.ckpt"))
    }

    pub fn final_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("final.ckpt"))
    }

    fn step_path(&self, step: usize) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("checkpoints").join(format!("step_{step:06}.ckpt")))
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport<T> {
    pub steps: usize,
    pub records: Vec<TrainLogRecord>,
    /// The CSV log, header included.
    pub csv: String,
    /// Mean validation reward after each evaluation, with its step.
    pub validation: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_validation_reward: f64,
    pub best_policy: TransformerLm<T>,
}

fn append(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn save_policy<T: Scalar>(policy: &TransformerLm<T>, path: Option<PathBuf>) -> Result<()> {
    let Some(path) = path else { return Ok(()) };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    policy.save(&path)
}

#[derive(Default)]
struct StepTotals {
    reward: f64,
    components: [f64; 6],
    loss: f64,
    kl: f64,
    clipped: usize,
    tokens: usize,
    completions: usize,
    groups: usize,
}

/// Runs GRPO on `policy`, whose LoRA adapters are its only trainable
/// parameters. `rewards.reference` must be the frozen step-0 policy.
/// The best policy by validation reward is kept; evaluation happens at
/// every epoch end and after the last step.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Scalar>(
    policy: &mut TransformerLm<T>,
    prompts: &[String],
    validation: &[String],
    rewards: &RewardModel<'_, T>,
    sampler: &SamplerConfig,
    cfg: &GrpoConfig,
    output: &TrainOutput,
    mut on_log: impl FnMut(&TrainLogRecord),
) -> Result<TrainReport<T>> {
    cfg.validate()?;
    sampler.validate()?;
    rewards.config.validate()?;
    if prompts.is_empty() {
        return Err(Error::Dataset("no training prompts".into()));
    }
    if policy.lora_config().is_none() {
        return Err(Error::Config("the policy has no LoRA adapters".into()));
    }
    if policy.config() != rewards.reference.config() {
        return Err(Error::Incompatible("policy and reference model shapes differ".into()));
    }
    policy
        .config()
        .check_lengths(cfg.max_prompt_len, sampler.max_new_tokens)?;

    let encoded: Vec<_> = prompts
        .iter()
        .map(|p| encode_prompt(p, rewards.vocab, cfg.max_prompt_len, false))
        .collect();
    let prompt_embeddings = prompts
        .iter()
        .map(|p| rewards.prompt_embedding(p))
        .collect::<Result<Vec<_>>>()?;

    if let Some(dir) = &output.dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let log_path = output.log_path();
    if let Some(p) = &log_path {
        crate::fsutil::write_atomic(p, format!("{CSV_HEADER}\n").as_bytes())?;
    }

    let total_steps = cfg.total_steps(prompts.len());
    let per_step = cfg.prompts_per_step();
    let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.learning_rate));
    let mut sampler = sampler.clone();
    sampler.group_size = cfg.group_size;

    let mut report = TrainReport {
        steps: 0,
        records: Vec::new(),
        csv: format!("{CSV_HEADER}\n"),
        validation: Vec::new(),
        best_step: 0,
        best_validation_reward: f64::NEG_INFINITY,
        best_policy: policy.clone(),
    };
    let mut running_best = f64::NEG_INFINITY;
    let mut below = 0usize;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut epoch = 0usize;
    let mut val_sampler = sampler.clone();
    val_sampler.group_size = 1;
    val_sampler.rng_seed = rng::derive_seed(cfg.seed, &[0x7a11]);
    let validate_now = |policy: &TransformerLm<T>, step: usize, report: &mut TrainReport<T>| -> Result<()> {
        // without a validation set the latest policy counts as the best
        if validation.is_empty() {
            report.best_step = step;
            report.best_policy = policy.clone();
            return save_policy(policy, output.best_path());
        }
        let m = eval::evaluate(policy, validation, rewards, &val_sampler, cfg.max_prompt_len, VALIDATION_T)?;
        log::info!("step {step}: validation reward {:.4}", m.mean_reward);
        report.validation.push((step, m.mean_reward));
        if m.mean_reward > report.best_validation_reward {
            report.best_validation_reward = m.mean_reward;
            report.best_step = step;
            report.best_policy = policy.clone();
            save_policy(policy, output.best_path())?;
        }
        Ok(())
    };

    for step in 0..total_steps {
        if cursor >= order.len() {
            if step > 0 {
                validate_now(policy, step, &mut report)?;
                epoch += 1;
            }
            order = (0..prompts.len()).collect();
            order.shuffle(&mut rng::substream(cfg.seed, &[0x6e90, epoch as u64]));
            cursor = 0;
        }
        let batch: Vec<usize> = order[cursor..(cursor + per_step).min(order.len())].to_vec();
        cursor += batch.len();

        let state = schedule(step as f64 / total_steps as f64);
        let mut step_sampler = sampler.clone();
        step_sampler.rng_seed = rng::derive_seed(cfg.seed, &[0x6a11, step as u64]);
        let mut totals = StepTotals::default();
        let weight = T::of(1.0 / batch.len() as f64);

        for (k, &pi) in batch.iter().enumerate() {
            let mut group = sample_group(policy, rewards.reference, &encoded[pi], k as u64, &step_sampler)?;
            let mut scores = Vec::with_capacity(group.len());
            for (j, completion) in group.completions.iter().enumerate() {
                let stats = crate::sampling::ReferenceStats {
                    logprobs: Vec::new(),
                    mean_nll: group.reference_nll[j],
                    final_entropy: group.reference_entropy[j],
                    mean_entropy: group.reference_mean_entropy[j],
                };
                let mut noise = rng::substream(cfg.seed, &[0x401e, step as u64, k as u64, j as u64]);
                let b = rewards.breakdown(
                    &prompts[pi],
                    &prompt_embeddings[pi],
                    completion.real_ids(),
                    &stats,
                    state.t,
                    Some(&mut noise),
                )?;
                totals.reward += b.final_reward;
                for (acc, v) in totals.components.iter_mut().zip([b.r_fair, b.r_sem, b.r_para, b.r_len, b.r_flu, b.r_rep]) {
                    *acc += v;
                }
                totals.completions += 1;
                scores.push(b.noisy_reward());
            }
            group.rewards = scores;
            group.advantages = compute_advantages(&group.rewards, cfg.advantage_std_epsilon);

            let mut tape = Tape::new();
            let mut dropout = rng::substream(cfg.seed, &[0xd0, step as u64, k as u64]);
            let (loss, stats) = grpo_loss(&mut tape, policy, &group, cfg, sampler.temperature, Some(&mut dropout))?;
            let grads = tape.backward(loss)?;
            policy.params_mut().accumulate(&grads, weight)?;
            totals.loss += stats.loss;
            totals.kl += stats.kl;
            totals.clipped += stats.clipped_tokens;
            totals.tokens += stats.tokens;
            totals.groups += 1;
        }
        opt.step(policy.params_mut())?;
        report.steps = step + 1;

        let n = totals.completions as f64;
        let g = totals.groups as f64;
        let c = totals.components.map(|x| x / n);
        let record = TrainLogRecord {
            step,
            t: state.t,
            w_form: state.w_form,
            w_fair: state.w_fair,
            mean_reward: totals.reward / n,
            r_fair: c[0],
            r_sem: c[1],
            r_para: c[2],
            r_len: c[3],
            r_flu: c[4],
            r_rep: c[5],
            loss: totals.loss / g,
            kl: totals.kl / g,
            clip_fraction: if totals.tokens == 0 { 0.0 } else { totals.clipped as f64 / totals.tokens as f64 },
        };
        if step % LOG_EVERY == 0 {
            let row = record.csv_row();
            if let Some(p) = &log_path {
                append(p, &row)?;
            }
            report.csv.push_str(&row);
            report.csv.push('\n');
            log::info!(
                "step {step}/{total_steps} t={:.3} reward={:.4} fair={:.4} loss={:.5} kl={:.5}",
                record.t,
                record.mean_reward,
                record.r_fair,
                record.loss,
                record.kl
            );
            on_log(&record);
            report.records.push(record.clone());
        }

        if (step + 1) % cfg.checkpoint_every == 0 {
            save_policy(policy, output.step_path(step + 1))?;
        }

        running_best = running_best.max(record.mean_reward);
        if record.mean_reward < cfg.divergence_ratio * running_best {
            below += 1;
        } else {
            below = 0;
        }
        if below >= cfg.divergence_patience {
            let dump = output.dir.as_ref().map(|d| d.join("diverged.ckpt"));
            save_policy(policy, dump)?;
            return Err(Error::Diverged {
                step,
                reason: format!(
                    "mean reward {:.4} stayed below {} x best {:.4} for {below} steps",
                    record.mean_reward, cfg.divergence_ratio, running_best
                ),
            });
        }
    }
    validate_now(policy, report.steps, &mut report)?;
    save_policy(policy, output.final_path())?;
    Ok(report)
}
