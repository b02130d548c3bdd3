use sha2::{Digest, Sha256};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A named learnable tensor with its gradient buffer.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub requires_grad: bool,
    pub grad: Option<Tensor<T>>,
}

/// Flat, ordered collection of parameters. Order is insertion order and is
/// the order written to checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, requires_grad: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Parameter {
            name,
            value,
            requires_grad,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.requires_grad)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn set_requires_grad(&mut self, pred: impl Fn(&str) -> bool, flag: bool) {
        for p in self.params.iter_mut().filter(|p| pred(&p.name)) {
            p.requires_grad = flag;
            if !flag {
                p.grad = None;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `weight * grad` into each parameter's gradient buffer.
    pub fn accumulate(&mut self, grads: &super::Gradients<T>, weight: T) -> Result<()> {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if !p.requires_grad {
                continue;
            }
            if g.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "accumulate",
                    lhs: p.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let buf = p
                .grad
                .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            for (dst, &src) in buf.data_mut().iter_mut().zip(g.data()) {
                *dst += weight * src;
            }
        }
        Ok(())
    }

    /// SHA-256 over the names and raw bytes of the parameters selected by
    /// `pred`, in store order.
    pub fn hash_where(&self, pred: impl Fn(&Parameter<T>) -> bool) -> String {
        let mut hasher = Sha256::new();
        let mut bytes = Vec::new();
        for p in self.params.iter().filter(|p| pred(p)) {
            hasher.update(p.name.as_bytes());
            bytes.clear();
            for &v in p.value.data() {
                v.write_le(&mut bytes);
            }
            hasher.update(&bytes);
        }
        hex::encode(hasher.finalize())
    }
}
