use rand::Rng as _;

use super::LoraConfig;
use crate::error::{Error, Result};
use crate::numerics::{kernels, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::rng::Rng;

#[derive(Clone, Debug)]
struct LoraIds {
    a: ParamId,
    b: ParamId,
    rank: usize,
    scaling: f64,
    dropout: f64,
}

/// A dense projection `x W^T + b`, optionally with a low-rank adapter
/// `(alpha / r) * dropout(x) A^T B^T` added to its output.
#[derive(Clone, Debug)]
pub struct Projection {
    pub(crate) w: ParamId,
    pub(crate) b: ParamId,
    lora: Option<LoraIds>,
    d_in: usize,
    d_out: usize,
}

/// Detached copy of one adapter's matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// `[rank, d_in]`
    pub a: Tensor<T>,
    /// `[d_out, rank]`
    pub b: Tensor<T>,
}

/// `W + (alpha / r) * B A`; `base` is left untouched.
pub fn lora_merge_view<T: Scalar>(base: &Tensor<T>, adapter: &LoraAdapter<T>) -> Result<Tensor<T>> {
    let (d_out, d_in) = base.dims2()?;
    let (ar, ac) = adapter.a.dims2()?;
    let (br, bc) = adapter.b.dims2()?;
    if ar != adapter.rank || bc != adapter.rank {
        return Err(Error::contract(format!(
            "adapter rank {} does not match A {:?} / B {:?}",
            adapter.rank,
            adapter.a.shape(),
            adapter.b.shape()
        )));
    }
    if ac != d_in || br != d_out {
        return Err(Error::Shape {
            op: "lora_merge_view",
            lhs: base.shape().to_vec(),
            rhs: vec![br, ac],
        });
    }
    let delta = adapter.b.matmul(&adapter.a)?;
    base.add(&delta.scale(T::of(adapter.alpha / adapter.rank as f64)))
}

impl Projection {
    pub(crate) fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::randn(&[d_out, d_in], 0.02, rng), true);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), true);
        Projection {
            w,
            b,
            lora: None,
            d_in,
            d_out,
        }
    }

    /// Adds a fresh adapter: A gaussian with standard deviation `1 / r`,
    /// B zero.
    pub(crate) fn attach<T: Scalar>(&mut self, store: &mut ParamStore<T>, name: &str, cfg: &LoraConfig, rng: &mut Rng) {
        let a = Tensor::randn(&[cfg.rank, self.d_in], 1.0 / cfg.rank as f64, rng);
        let a = store.add(format!("{name}.lora_a"), a, true);
        let b = store.add(format!("{name}.lora_b"), Tensor::zeros(&[self.d_out, cfg.rank]), true);
        self.attach_ids(a, b, cfg);
    }

    pub(crate) fn attach_ids(&mut self, a: ParamId, b: ParamId, cfg: &LoraConfig) {
        self.lora = Some(LoraIds {
            a,
            b,
            rank: cfg.rank,
            scaling: cfg.scaling(),
            dropout: cfg.dropout,
        });
    }

    pub fn adapter<T: Scalar>(&self, store: &ParamStore<T>) -> Option<LoraAdapter<T>> {
        let l = self.lora.as_ref()?;
        Some(LoraAdapter {
            rank: l.rank,
            alpha: l.scaling * l.rank as f64,
            dropout: l.dropout,
            a: store.value(l.a).clone(),
            b: store.value(l.b).clone(),
        })
    }

    pub fn weight_id(&self) -> ParamId {
        self.w
    }

    /// Records the projection of `x: [m, d_in]`. Dropout on the adapter
    /// input is applied only when `train` supplies a random stream.
    pub(crate) fn apply<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        train: Option<&mut Rng>,
    ) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let base = tape.linear(x, w, Some(b))?;
        let Some(l) = &self.lora else { return Ok(base) };
        let mut xin = x;
        if let Some(rng) = train {
            if l.dropout > 0.0 {
                let keep = 1.0 - l.dropout;
                let n = tape.value(x).numel();
                let mask: Vec<T> = (0..n)
                    .map(|_| if rng.random_bool(keep) { T::of(1.0 / keep) } else { T::zero() })
                    .collect();
                let mask = tape.constant(Tensor::new(tape.value(x).shape().to_vec(), mask)?);
                xin = tape.mul(x, mask)?;
            }
        }
        let a = tape.param(store, l.a);
        let bm = tape.param(store, l.b);
        let down = tape.linear(xin, a, None)?;
        let up = tape.linear(down, bm, None)?;
        let up = tape.scale(up, T::of(l.scaling));
        tape.add(base, up)
    }

    /// Same arithmetic as [`Projection::apply`] (without dropout) on raw
    /// row buffers, so cached inference reproduces the recorded values.
    pub(crate) fn apply_rows<T: Scalar>(&self, store: &ParamStore<T>, x: &[T], m: usize) -> Vec<T> {
        let mut out = vec![T::zero(); m * self.d_out];
        kernels::gemm(m, self.d_in, self.d_out, x, false, store.value(self.w).data(), true, &mut out, false);
        let bias = store.value(self.b).data();
        for row in out.chunks_exact_mut(self.d_out) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        if let Some(l) = &self.lora {
            let mut down = vec![T::zero(); m * l.rank];
            kernels::gemm(m, self.d_in, l.rank, x, false, store.value(l.a).data(), true, &mut down, false);
            let mut up = vec![T::zero(); m * self.d_out];
            kernels::gemm(m, l.rank, self.d_out, &down, false, store.value(l.b).data(), true, &mut up, false);
            let s = T::of(l.scaling);
            for (o, u) in out.iter_mut().zip(up) {
                *o += u * s;
            }
        }
        out
    }
}
