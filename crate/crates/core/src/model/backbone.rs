use super::{LoraConfig, ModelConfig, Projection, Target};
use crate::error::{Error, Result};
use crate::numerics::{kernels, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::rng::Rng;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], T::one()), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d]), true),
        }
    }

    fn apply<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, T::of(LN_EPS))
    }

    fn apply_rows<T: Scalar>(&self, store: &ParamStore<T>, x: &[T], d: usize) -> Vec<T> {
        let m = x.len() / d;
        let mut out = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); m];
        kernels::layer_norm(
            x,
            d,
            store.value(self.gain).data(),
            store.value(self.bias).data(),
            T::of(LN_EPS),
            &mut out,
            &mut xhat,
            &mut rstd,
        );
        out
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    q: Projection,
    k: Projection,
    v: Projection,
    o: Projection,
    ln2: Norm,
    ff1: Projection,
    ff2: Projection,
}

impl Block {
    fn projection_mut(&mut self, t: Target) -> &mut Projection {
        match t {
            Target::Query => &mut self.q,
            Target::Key => &mut self.k,
            Target::Value => &mut self.v,
            Target::Output => &mut self.o,
        }
    }

    fn projection(&self, t: Target) -> &Projection {
        match t {
            Target::Query => &self.q,
            Target::Key => &self.k,
            Target::Value => &self.v,
            Target::Output => &self.o,
        }
    }
}

/// Key and value rows of every layer for the positions seen so far.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T> KvCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Token and position embeddings followed by pre-LN transformer blocks
/// and a final layer norm. Parameters live in a caller-owned store.
#[derive(Clone, Debug)]
pub struct Backbone {
    dims: ModelConfig,
    causal: bool,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: Norm,
}

fn projection_name(prefix: &str, layer: usize, part: &str) -> String {
    format!("{prefix}layers.{layer}.{part}")
}

impl Backbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dims: &ModelConfig, causal: bool, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let d = dims.d_model;
        let tok = store.add(format!("{prefix}tok_emb"), Tensor::randn(&[dims.vocab_size, d], 0.02, rng), true);
        let pos = store.add(format!("{prefix}pos_emb"), Tensor::randn(&[dims.max_position, d], 0.02, rng), true);
        let mut blocks = Vec::with_capacity(dims.n_layers);
        for i in 0..dims.n_layers {
            let name = |p: &str| projection_name(prefix, i, p);
            blocks.push(Block {
                ln1: Norm::new(store, &name("ln1"), d),
                q: Projection::new(store, &name("attn.q"), d, d, rng),
                k: Projection::new(store, &name("attn.k"), d, d, rng),
                v: Projection::new(store, &name("attn.v"), d, d, rng),
                o: Projection::new(store, &name("attn.o"), d, d, rng),
                ln2: Norm::new(store, &name("ln2"), d),
                ff1: Projection::new(store, &name("ff1"), d, dims.d_ff, rng),
                ff2: Projection::new(store, &name("ff2"), dims.d_ff, d, rng),
            });
        }
        let ln_f = Norm::new(store, &format!("{prefix}ln_f"), d);
        Ok(Backbone {
            dims: dims.clone(),
            causal,
            tok,
            pos,
            blocks,
            ln_f,
        })
    }

    pub fn dims(&self) -> &ModelConfig {
        &self.dims
    }

    pub fn token_embedding(&self) -> ParamId {
        self.tok
    }

    pub fn projection(&self, layer: usize, target: Target) -> &Projection {
        self.blocks[layer].projection(target)
    }

    /// Adds adapters to every attention projection, named after the
    /// projection they belong to.
    pub fn attach_lora<T: Scalar>(&mut self, store: &mut ParamStore<T>, prefix: &str, cfg: &LoraConfig, rng: &mut Rng) -> Result<()> {
        cfg.validate()?;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for t in Target::ALL {
                let name = projection_name(prefix, i, &format!("attn.{}", t.as_str()));
                block.projection_mut(t).attach(store, &name, cfg, rng);
            }
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[u32], start: usize) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::contract("forward needs at least one token"));
        }
        if start + ids.len() > self.dims.max_position {
            return Err(Error::contract(format!(
                "sequence of {} tokens exceeds max_position {}",
                start + ids.len(),
                self.dims.max_position
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.dims.vocab_size) {
            return Err(Error::contract(format!("token id {bad} outside vocabulary of {}", self.dims.vocab_size)));
        }
        Ok(())
    }

    /// Records the hidden states `[ids.len(), d_model]` for one unpadded
    /// sequence whose first token sits at position 0.
    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, ids: &[u32], mut train: Option<&mut Rng>) -> Result<Var> {
        self.check_ids(ids, 0)?;
        let heads = self.dims.n_heads;
        let tok_ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = tape.param(store, self.tok);
        let pos = tape.param(store, self.pos);
        let te = tape.embedding(tok, &tok_ids)?;
        let pe = tape.embedding(pos, &positions)?;
        let mut x = tape.add(te, pe)?;
        for b in &self.blocks {
            let h = b.ln1.apply(store, tape, x)?;
            let q = b.q.apply(store, tape, h, train.as_deref_mut())?;
            let k = b.k.apply(store, tape, h, train.as_deref_mut())?;
            let v = b.v.apply(store, tape, h, train.as_deref_mut())?;
            let a = tape.attention(q, k, v, heads, self.causal)?;
            let o = b.o.apply(store, tape, a, train.as_deref_mut())?;
            x = tape.add(x, o)?;
            let h = b.ln2.apply(store, tape, x)?;
            let f = b.ff1.apply(store, tape, h, None)?;
            let f = tape.gelu(f);
            let f = b.ff2.apply(store, tape, f, None)?;
            x = tape.add(x, f)?;
        }
        self.ln_f.apply(store, tape, x)
    }

    pub fn empty_cache<T: Scalar>(&self) -> KvCache<T> {
        KvCache {
            keys: vec![Vec::new(); self.dims.n_layers],
            values: vec![Vec::new(); self.dims.n_layers],
            len: 0,
        }
    }

    /// Extends each cache with its new tokens and returns the final hidden
    /// rows of all new tokens, stacked in item order. Produces the same
    /// values as [`Backbone::forward`] over the full sequences.
    pub fn step<T: Scalar>(&self, store: &ParamStore<T>, items: &mut [(&mut KvCache<T>, &[u32])]) -> Result<Vec<T>> {
        if !self.causal {
            return Err(Error::contract("cached decoding needs a causal backbone"));
        }
        let d = self.dims.d_model;
        let mut m = 0;
        for (cache, ids) in items.iter() {
            self.check_ids(ids, cache.len)?;
            m += ids.len();
        }
        let tok = store.value(self.tok).data();
        let pos = store.value(self.pos).data();
        let mut x = Vec::with_capacity(m * d);
        for (cache, ids) in items.iter() {
            for (j, &id) in ids.iter().enumerate() {
                let p = cache.len + j;
                let tr = &tok[id as usize * d..][..d];
                let pr = &pos[p * d..][..d];
                x.extend(tr.iter().zip(pr).map(|(&a, &b)| a + b));
            }
        }
        for (li, b) in self.blocks.iter().enumerate() {
            let h = b.ln1.apply_rows(store, &x, d);
            let q = b.q.apply_rows(store, &h, m);
            let k = b.k.apply_rows(store, &h, m);
            let v = b.v.apply_rows(store, &h, m);
            let mut att = vec![T::zero(); m * d];
            let mut row = 0;
            for (cache, ids) in items.iter_mut() {
                let n = ids.len();
                let rows = row * d..(row + n) * d;
                cache.keys[li].extend_from_slice(&k[rows.clone()]);
                cache.values[li].extend_from_slice(&v[rows.clone()]);
                let n_keys = cache.len + n;
                kernels::attention(
                    &q[rows.clone()],
                    &cache.keys[li],
                    &cache.values[li],
                    n,
                    n_keys,
                    d,
                    self.dims.n_heads,
                    cache.len,
                    true,
                    &mut att[rows],
                    None,
                );
                row += n;
            }
            let o = b.o.apply_rows(store, &att, m);
            x.iter_mut().zip(&o).for_each(|(a, &b)| *a += b);
            let h = b.ln2.apply_rows(store, &x, d);
            let f = b.ff1.apply_rows(store, &h, m).into_iter().map(kernels::gelu).collect::<Vec<T>>();
            let f = b.ff2.apply_rows(store, &f, m);
            x.iter_mut().zip(&f).for_each(|(a, &b)| *a += b);
        }
        for (cache, ids) in items.iter_mut() {
            cache.len += ids.len();
        }
        Ok(self.ln_f.apply_rows(store, &x, d))
    }
}
