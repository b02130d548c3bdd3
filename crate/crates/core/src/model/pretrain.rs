//! Next-token cross-entropy training of the base language model.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::TransformerLm;
use crate::error::{Error, Result};
use crate::numerics::{AdamW, AdamWConfig, Scalar, Tape};
use crate::rng;
use crate::text::{encode_prompt, tokenize, Vocabulary, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 4,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

/// `BOS prompt response EOS`, with the prompt capped at `max_prompt`
/// tokens (BOS included) and the response plus EOS at `max_completion`.
pub fn training_sequence(prompt: &str, response: &str, vocab: &Vocabulary, max_prompt: usize, max_completion: usize) -> Vec<u32> {
    let mut ids = encode_prompt(prompt, vocab, max_prompt, false).ids().to_vec();
    if max_completion > 1 {
        ids.extend_from_slice(tokenize(response, vocab, max_completion - 1, false).ids());
    }
    ids.push(EOS);
    ids
}

/// Mean next-token negative log-likelihood of a batch, recorded on `tape`.
fn batch_loss<T: Scalar>(lm: &TransformerLm<T>, tape: &mut Tape<T>, batch: &[&Vec<u32>]) -> Result<crate::numerics::Var> {
    let mut total = None;
    let mut count = 0usize;
    for seq in batch {
        if seq.len() < 2 {
            continue;
        }
        let logits = lm.forward_tape(tape, &seq[..seq.len() - 1], None)?;
        let lp = tape.log_softmax_rows(logits)?;
        let targets: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
        let picked = tape.pick(lp, &targets)?;
        let s = tape.sum(picked);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
        count += targets.len();
    }
    let total = total.ok_or_else(|| Error::Dataset("no sequence has two or more tokens".into()))?;
    Ok(tape.scale(total, T::of(-1.0 / count as f64)))
}

/// Trains every trainable weight; returns the mean loss of each epoch.
pub fn pretrain<T: Scalar>(
    lm: &mut TransformerLm<T>,
    sequences: &[Vec<u32>],
    cfg: &PretrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if sequences.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Dataset("pretraining needs sequences and a positive batch size".into()));
    }
    let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.learning_rate));
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::substream(cfg.seed, &[0x9e7, epoch as u64]));
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Vec<u32>> = chunk.iter().map(|&i| &sequences[i]).collect();
            let mut tape = Tape::new();
            let loss = batch_loss(lm, &mut tape, &batch)?;
            sum += tape.value(loss).item()?.as_f64();
            batches += 1;
            let grads = tape.backward(loss)?;
            lm.params_mut().accumulate(&grads, T::one())?;
            opt.step(lm.params_mut())?;
        }
        let mean = sum / batches as f64;
        log::info!("pretrain epoch {epoch}: loss {mean:.4}");
        on_epoch(epoch, mean);
        losses.push(mean);
    }
    Ok(losses)
}

/// Mean next-token negative log-likelihood over `sequences`.
pub fn evaluate_loss<T: Scalar>(lm: &TransformerLm<T>, sequences: &[Vec<u32>]) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let batch: Vec<&Vec<u32>> = sequences.iter().collect();
    let loss = batch_loss(lm, &mut tape, &batch)?;
    Ok(tape.value(loss).item()?.as_f64())
}
