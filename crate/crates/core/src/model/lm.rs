use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Backbone, KvCache, LoraAdapter, LoraConfig, ModelConfig, Target};
use crate::error::{Error, Result};
use crate::numerics::{checkpoint, kernels, ParamStore, Scalar, Tape, Tensor, Var};
use crate::rng::{self, Rng};
use crate::text::TokenSequence;

const KIND: &str = "language_model";

#[derive(Serialize, Deserialize)]
struct StoredConfig {
    kind: String,
    model: ModelConfig,
    lora: Option<LoraConfig>,
}

/// Causal language model: a [`Backbone`] whose output head shares the
/// token embedding matrix.
#[derive(Clone, Debug)]
pub struct TransformerLm<T> {
    config: ModelConfig,
    lora: Option<LoraConfig>,
    store: ParamStore<T>,
    backbone: Backbone,
}

fn is_adapter(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

impl<T: Scalar> TransformerLm<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = rng::substream(seed, &[0x10de1]);
        let backbone = Backbone::new(&mut store, "", &config, true, &mut rng)?;
        Ok(TransformerLm {
            config,
            lora: None,
            store,
            backbone,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Adds zero-initialized adapters to every attention projection and
    /// freezes all other weights.
    pub fn attach_lora(&mut self, cfg: &LoraConfig, seed: u64) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::contract("adapters are already attached"));
        }
        let mut rng = rng::substream(seed, &[0x10fa]);
        self.backbone.attach_lora(&mut self.store, "", cfg, &mut rng)?;
        self.store.set_requires_grad(|n| !is_adapter(n), false);
        self.lora = Some(cfg.clone());
        Ok(())
    }

    pub fn adapter(&self, layer: usize, target: Target) -> Option<LoraAdapter<T>> {
        self.backbone.projection(layer, target).adapter(&self.store)
    }

    /// Weight matrix of an attention projection, without any adapter.
    pub fn base_weight(&self, layer: usize, target: Target) -> &Tensor<T> {
        self.store.value(self.backbone.projection(layer, target).weight_id())
    }

    /// Digest of every non-adapter weight.
    pub fn base_hash(&self) -> String {
        self.store.hash_where(|p| !is_adapter(&p.name))
    }

    /// Digest of the adapter weights only.
    pub fn adapter_hash(&self) -> String {
        self.store.hash_where(|p| is_adapter(&p.name))
    }

    /// A copy whose parameters never receive gradients.
    pub fn freeze(&self) -> Self {
        let mut out = self.clone();
        out.store.set_requires_grad(|_| true, false);
        out.store.zero_grad();
        out
    }

    /// Records logits `[ids.len(), vocab]` for one unpadded sequence.
    pub fn forward_tape(&self, tape: &mut Tape<T>, ids: &[u32], train: Option<&mut Rng>) -> Result<Var> {
        let h = self.backbone.forward(&self.store, tape, ids, train)?;
        let e = tape.param(&self.store, self.backbone.token_embedding());
        tape.matmul_nt(h, e)
    }

    /// Logits `[ids.len(), vocab]` for one unpadded sequence.
    pub fn logits(&self, ids: &[u32]) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let v = self.forward_tape(&mut tape, ids, None)?;
        Ok(tape.value(v).clone())
    }

    /// Logits `[batch, seq, vocab]` for equally long, left-padded
    /// sequences. Padding is removed before the forward pass, so real
    /// positions count from the first real token; pad rows are zero.
    pub fn forward(&self, batch: &[TokenSequence]) -> Result<Tensor<T>> {
        let seq = batch.first().map_or(0, TokenSequence::len);
        if batch.iter().any(|s| s.len() != seq) {
            return Err(Error::contract("batch sequences differ in length"));
        }
        if seq > self.config.max_position {
            return Err(Error::contract(format!(
                "sequence of {seq} tokens exceeds max_position {}",
                self.config.max_position
            )));
        }
        let vocab = self.config.vocab_size;
        let mut out = vec![T::zero(); batch.len() * seq * vocab];
        for (b, s) in batch.iter().enumerate() {
            let real = s.real_ids();
            if real.is_empty() {
                continue;
            }
            let logits = self.logits(real)?;
            let start = (b * seq + s.pad_count()) * vocab;
            out[start..start + logits.numel()].copy_from_slice(logits.data());
        }
        Tensor::new(vec![batch.len(), seq, vocab], out)
    }

    /// Records the log-probabilities `[completion.len()]` of each
    /// completion token given everything before it, under the
    /// distribution `softmax(logits / temperature)`.
    pub fn completion_logprobs_tape(
        &self,
        tape: &mut Tape<T>,
        prompt: &[u32],
        completion: &[u32],
        temperature: f64,
        train: Option<&mut Rng>,
    ) -> Result<Var> {
        if prompt.is_empty() || completion.is_empty() {
            return Err(Error::contract("prompt and completion must be non-empty"));
        }
        let mut ids = prompt.to_vec();
        ids.extend_from_slice(&completion[..completion.len() - 1]);
        let logits = self.forward_tape(tape, &ids, train)?;
        let rows = tape.slice_rows(logits, prompt.len() - 1, ids.len())?;
        let rows = if temperature == 1.0 {
            rows
        } else {
            tape.scale(rows, T::of(1.0 / temperature))
        };
        let lp = tape.log_softmax_rows(rows)?;
        let idx: Vec<usize> = completion.iter().map(|&c| c as usize).collect();
        tape.pick(lp, &idx)
    }

    /// Per-token log-probabilities of the real completion tokens given the
    /// real prompt tokens. An empty completion gives an empty list.
    pub fn log_prob_of_completion(&self, prompt: &TokenSequence, completion: &TokenSequence, temperature: f64) -> Result<Vec<T>> {
        let completion = completion.real_ids();
        if completion.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::no_grad();
        let v = self.completion_logprobs_tape(&mut tape, prompt.real_ids(), completion, temperature, None)?;
        Ok(tape.value(v).data().to_vec())
    }

    /// Runs the prompt through a fresh cache and returns the logits of its
    /// last position.
    pub fn prefill(&self, prompt: &[u32]) -> Result<(KvCache<T>, Vec<T>)> {
        let mut cache = self.backbone.empty_cache();
        let h = self.backbone.step(&self.store, &mut [(&mut cache, prompt)])?;
        let d = self.config.d_model;
        let last = &h[h.len() - d..];
        Ok((cache, self.head_rows(last, 1)))
    }

    /// Feeds one token to each cache; returns one logits row per cache.
    pub fn decode(&self, caches: &mut [&mut KvCache<T>], tokens: &[u32]) -> Result<Vec<Vec<T>>> {
        if caches.len() != tokens.len() {
            return Err(Error::contract("one token per cache required"));
        }
        let mut items: Vec<(&mut KvCache<T>, &[u32])> = caches
            .iter_mut()
            .map(|c| &mut **c)
            .zip(tokens.chunks(1))
            .collect();
        let h = self.backbone.step(&self.store, &mut items)?;
        let logits = self.head_rows(&h, tokens.len());
        Ok(logits.chunks_exact(self.config.vocab_size).map(<[T]>::to_vec).collect())
    }

    fn head_rows(&self, h: &[T], m: usize) -> Vec<T> {
        let (v, d) = (self.config.vocab_size, self.config.d_model);
        let mut out = vec![T::zero(); m * v];
        let e = self.store.value(self.backbone.token_embedding()).data();
        kernels::gemm(m, d, v, h, false, e, true, &mut out, false);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = StoredConfig {
            kind: KIND.into(),
            model: self.config.clone(),
            lora: self.lora.clone(),
        };
        checkpoint::save(path, &self.store, serde_json::to_value(cfg)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = checkpoint::load::<T>(path)?;
        let cfg: StoredConfig = serde_json::from_value(ckpt.manifest.config.clone())
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if cfg.kind != KIND {
            return Err(Error::Incompatible(format!("{} holds a {}, not a language model", path.display(), cfg.kind)));
        }
        let mut lm = Self::new(cfg.model, 0)?;
        if let Some(l) = &cfg.lora {
            lm.attach_lora(l, 0)?;
        }
        checkpoint::restore_into(&mut lm.store, &ckpt)?;
        for e in &ckpt.manifest.tensors {
            if let Some(id) = lm.store.find(&e.name) {
                lm.store.get_mut(id).requires_grad = e.trainable;
            }
        }
        Ok(lm)
    }
}
