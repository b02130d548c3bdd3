//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations append nodes to a [`Tape`] in evaluation order, so the node
//! list is already topologically sorted and the backward pass is a single
//! reverse sweep. [`Tape::backward`] consumes the tape.

use std::collections::{BTreeMap, HashMap};

use super::kernels;
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Clamp { x: Var, lo: T, hi: T },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    Pick { x: Var, idx: Vec<usize> },
    SliceRows { x: Var, start: usize },
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    recording: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: BTreeMap<Var, Tensor<T>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; zeros-shaped leaves unreachable from the loss
    /// report `None`.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&var)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.leaves.get(v).map(|g| (*id, g)))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records gradients.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates; no backward information is kept.
    pub fn no_grad() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: needs_grad && self.recording,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that is not differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A free input whose gradient is reported by [`Gradients::get`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Records a stored parameter. Repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.requires_grad);
        self.params.insert(id, v);
        v
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        let t = &self.nodes[v.0].value;
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::contract(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// `x * w^T + b` with `x: [m,in]`, `w: [out,in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, din) = self.dims(x)?;
        let (dout, din2) = self.dims(w)?;
        if din != din2 {
            return Err(shape_err("linear", self.value(x).shape(), self.value(w).shape()));
        }
        let mut out = vec![T::zero(); m * dout];
        kernels::gemm(m, din, dout, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.numel() != dout {
                return Err(shape_err("linear bias", bias.shape(), &[dout]));
            }
            for row in out.chunks_exact_mut(dout) {
                for (o, &bv) in row.iter_mut().zip(bias.data()) {
                    *o += bv;
                }
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::from_parts(vec![m, dout], out), Op::Linear { x, w, b }, &inputs))
    }

    /// `a * b` for `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T` for `[m,k] x [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (br, bc) = self.dims(b)?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), trans_b, &mut out, false);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("minimum", a, b, |x, y| if x <= y { x } else { y })?;
        Ok(self.push(t, Op::Minimum(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).scale(c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(T::exp);
        self.push(t, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(T::ln);
        self.push(t, Op::Log(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(kernels::gelu);
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let t = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(t, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(shape_err("layer_norm", self.value(x).shape(), self.value(gain).shape()));
        }
        let mut out = vec![T::zero(); m * n];
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        kernels::layer_norm(
            self.value(x).data(),
            n,
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
            &mut out,
            &mut xhat,
            &mut rstd,
        );
        let op = Op::LayerNorm { x, gain, bias, xhat, rstd };
        Ok(self.push(Tensor::from_parts(vec![m, n], out), op, &[x, gain, bias]))
    }

    /// Multi-head self-attention over `[seq, d]` projections; see
    /// [`kernels::attention`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (s, d) = self.dims(q)?;
        if self.value(k).shape() != [s, d] || self.value(v).shape() != [s, d] {
            return Err(shape_err("attention", self.value(q).shape(), self.value(k).shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!("{d} features not divisible into {heads} heads")));
        }
        let mut out = vec![T::zero(); s * d];
        let mut probs = vec![T::zero(); heads * s * s];
        kernels::attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            s,
            s,
            d,
            heads,
            0,
            causal,
            &mut out,
            Some(&mut probs),
        );
        let op = Op::Attention { q, k, v, heads, probs };
        Ok(self.push(Tensor::from_parts(vec![s, d], out), op, &[q, k, v]))
    }

    /// Row gather `table[ids]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims(table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!("embedding id {bad} out of range {rows}")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(Tensor::from_parts(vec![ids.len(), d], out), op, &[table]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.dims(x)?;
        let mut data = self.value(x).data().to_vec();
        data.chunks_exact_mut(n).for_each(kernels::softmax_in_place);
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Softmax(x), &[x]))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.dims(x)?;
        let mut data = self.value(x).data().to_vec();
        data.chunks_exact_mut(n).for_each(kernels::log_softmax_in_place);
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::LogSoftmax(x), &[x]))
    }

    /// `out[i] = x[i, idx[i]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if idx.len() != m || idx.iter().any(|&j| j >= n) {
            return Err(Error::contract(format!("pick indices do not fit [{m}, {n}]")));
        }
        let t = self.value(x);
        let data = idx.iter().enumerate().map(|(i, &j)| t.data()[i * n + j]).collect();
        let op = Op::Pick {
            x,
            idx: idx.to_vec(),
        };
        Ok(self.push(Tensor::from_parts(vec![m], data), op, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if start > end || end > m {
            return Err(Error::contract(format!("row slice {start}..{end} of {m} rows")));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        Ok(self.push(Tensor::from_parts(vec![end - start, n], data), Op::SliceRows { x, start }, &[x]))
    }

    /// Column means of a matrix, as a `[1, n]` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if m == 0 {
            return Err(Error::contract("mean over zero rows"));
        }
        let inv = T::one() / T::from_usize(m).unwrap();
        let mut out = vec![T::zero(); n];
        for row in self.value(x).data().chunks_exact(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(Tensor::from_parts(vec![1, n], out), Op::MeanRows(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = T::from_usize(t.numel().max(1)).unwrap();
        let s = t.data().iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let Tape { nodes, params, .. } = self;
        let root = &nodes[loss.0].value;
        if !root.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            propagate(&nodes, i, &g, &mut grads);
        }

        let mut leaves = BTreeMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if node.needs_grad && matches!(node.op, Op::Leaf) {
                let g = grads[i].take().unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                if g.iter().any(|x| !x.is_finite()) {
                    let name = params
                        .iter()
                        .find(|(_, v)| v.0 == i)
                        .map_or_else(|| format!("leaf {i}"), |(id, _)| format!("parameter #{}", id.0));
                    return Err(Error::NonFinite(format!("gradient of {name}")));
                }
                leaves.insert(Var(i), Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        let mut params: Vec<(ParamId, Var)> = params.into_iter().collect();
        params.sort();
        Ok(Gradients { leaves, params })
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, f: impl FnOnce(&mut [T])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
    f(buf);
}

fn dims<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    match t.shape() {
        [r, c] => (*r, *c),
        [c] => (1, *c),
        _ => (1, t.numel()),
    }
}

fn propagate<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Linear { x, w, b } => {
            let (m, din) = dims(val(*x));
            let dout = val(*w).shape()[0];
            acc(grads, nodes, *x, |dx| kernels::gemm(m, dout, din, g, false, val(*w).data(), false, dx, true));
            acc(grads, nodes, *w, |dw| kernels::gemm(dout, m, din, g, true, val(*x).data(), false, dw, true));
            if let Some(b) = b {
                acc(grads, nodes, *b, |db| {
                    for row in g.chunks_exact(dout) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                });
            }
        }
        Op::MatMul { a, b, trans_b } => {
            let (m, k) = dims(val(*a));
            let n = node.value.shape()[1];
            acc(grads, nodes, *a, |da| kernels::gemm(m, n, k, g, false, val(*b).data(), !*trans_b, da, true));
            if *trans_b {
                acc(grads, nodes, *b, |db| kernels::gemm(n, m, k, g, true, val(*a).data(), false, db, true));
            } else {
                acc(grads, nodes, *b, |db| kernels::gemm(k, m, n, val(*a).data(), true, g, false, db, true));
            }
        }
        Op::Add(a, b) => {
            acc(grads, nodes, *a, |d| d.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
            acc(grads, nodes, *b, |d| d.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, |d| d.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
            acc(grads, nodes, *b, |d| d.iter_mut().zip(g).for_each(|(d, &x)| *d -= x));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            acc(grads, nodes, *a, |d| {
                for ((d, &x), &y) in d.iter_mut().zip(g).zip(vb) {
                    *d += x * y;
                }
            });
            acc(grads, nodes, *b, |d| {
                for ((d, &x), &y) in d.iter_mut().zip(g).zip(va) {
                    *d += x * y;
                }
            });
        }
        Op::Minimum(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            acc(grads, nodes, *a, |d| {
                for (j, d) in d.iter_mut().enumerate() {
                    if va[j] <= vb[j] {
                        *d += g[j];
                    }
                }
            });
            acc(grads, nodes, *b, |d| {
                for (j, d) in d.iter_mut().enumerate() {
                    if va[j] > vb[j] {
                        *d += g[j];
                    }
                }
            });
        }
        Op::Scale(a, c) => acc(grads, nodes, *a, |d| d.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *c)),
        Op::AddScalar(a) => acc(grads, nodes, *a, |d| d.iter_mut().zip(g).for_each(|(d, &x)| *d += x)),
        Op::Exp(a) => {
            let y = node.value.data();
            acc(grads, nodes, *a, |d| {
                for ((d, &x), &yv) in d.iter_mut().zip(g).zip(y) {
                    *d += x * yv;
                }
            });
        }
        Op::Log(a) => {
            let xv = val(*a).data();
            acc(grads, nodes, *a, |d| {
                for ((d, &x), &v) in d.iter_mut().zip(g).zip(xv) {
                    *d += x / v;
                }
            });
        }
        Op::Gelu(a) => {
            let xv = val(*a).data();
            acc(grads, nodes, *a, |d| {
                for ((d, &x), &v) in d.iter_mut().zip(g).zip(xv) {
                    *d += x * kernels::gelu_grad(v);
                }
            });
        }
        Op::Clamp { x, lo, hi } => {
            let xv = val(*x).data();
            acc(grads, nodes, *x, |d| {
                for ((d, &gv), &v) in d.iter_mut().zip(g).zip(xv) {
                    if v >= *lo && v <= *hi {
                        *d += gv;
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let (m, n) = dims(val(*x));
            let gv = val(*gain).data();
            let nf = T::from_usize(n).unwrap();
            acc(grads, nodes, *x, |dx| {
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for c in 0..n {
                        let dh = gr[c] * gv[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[c];
                    }
                    mean_dh /= nf;
                    mean_dh_h /= nf;
                    for c in 0..n {
                        let dh = gr[c] * gv[c];
                        dx[r * n + c] += rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                    }
                }
            });
            acc(grads, nodes, *gain, |dg| {
                for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for c in 0..n {
                        dg[c] += gr[c] * hr[c];
                    }
                }
            });
            acc(grads, nodes, *bias, |db| {
                for gr in g.chunks_exact(n) {
                    for c in 0..n {
                        db[c] += gr[c];
                    }
                }
            });
        }
        Op::Attention { q, k, v, heads, probs } => {
            let (s, d) = dims(val(*q));
            let mut dq = vec![T::zero(); s * d];
            let mut dk = vec![T::zero(); s * d];
            let mut dv = vec![T::zero(); s * d];
            kernels::attention_backward(
                val(*q).data(),
                val(*k).data(),
                val(*v).data(),
                probs,
                g,
                s,
                s,
                d,
                *heads,
                &mut dq,
                &mut dk,
                &mut dv,
            );
            for (var, src) in [(*q, dq), (*k, dk), (*v, dv)] {
                acc(grads, nodes, var, |d| d.iter_mut().zip(&src).for_each(|(d, &x)| *d += x));
            }
        }
        Op::Embedding { table, ids } => {
            let d = val(*table).shape()[1];
            acc(grads, nodes, *table, |dt| {
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += g[r * d + c];
                    }
                }
            });
        }
        Op::Softmax(a) => {
            let (_, n) = dims(&node.value);
            let y = node.value.data();
            acc(grads, nodes, *a, |dx| {
                for ((dr, gr), yr) in dx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for c in 0..n {
                        dr[c] += yr[c] * (gr[c] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            let (_, n) = dims(&node.value);
            let y = node.value.data();
            acc(grads, nodes, *a, |dx| {
                for ((dr, gr), yr) in dx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                    let total: T = gr.iter().copied().sum();
                    for c in 0..n {
                        dr[c] += gr[c] - yr[c].exp() * total;
                    }
                }
            });
        }
        Op::Pick { x, idx } => {
            let (_, n) = dims(val(*x));
            acc(grads, nodes, *x, |dx| {
                for (i, &j) in idx.iter().enumerate() {
                    dx[i * n + j] += g[i];
                }
            });
        }
        Op::SliceRows { x, start } => {
            let (_, n) = dims(val(*x));
            acc(grads, nodes, *x, |dx| {
                for (d, &gv) in dx[start * n..].iter_mut().zip(g) {
                    *d += gv;
                }
            });
        }
        Op::MeanRows(x) => {
            let (m, n) = dims(val(*x));
            let inv = T::one() / T::from_usize(m).unwrap();
            acc(grads, nodes, *x, |dx| {
                for row in dx.chunks_exact_mut(n) {
                    for (d, &gv) in row.iter_mut().zip(g) {
                        *d += gv * inv;
                    }
                }
            });
        }
        Op::Sum(x) => acc(grads, nodes, *x, |dx| dx.iter_mut().for_each(|d| *d += g[0])),
        Op::Mean(x) => {
            let n = T::from_usize(val(*x).numel().max(1)).unwrap();
            acc(grads, nodes, *x, |dx| dx.iter_mut().for_each(|d| *d += g[0] / n));
        }
    }
}
