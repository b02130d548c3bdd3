//! Slice-level compute kernels shared by the recording tape and the
//! incremental (cached) inference path. Both paths call the same functions
//! so a row computed either way is bit-identical.

use super::Scalar;

/// `c (+)= op(a) * op(b)` for row-major contiguous buffers.
///
/// `a` is `[m,k]`, or `[k,m]` when `trans_a`; `b` is `[k,n]`, or `[n,k]`
/// when `trans_b`; `c` is `[m,n]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs buffer too small");
    assert!(b.len() >= k * n, "gemm: rhs buffer too small");
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &v in row.iter() {
        sum += (v - max).exp();
    }
    let log_z = max + sum.ln();
    for v in row.iter_mut() {
        *v -= log_z;
    }
}

/// Entropy in nats of the distribution `softmax(logits)`.
pub fn entropy_of_logits<T: Scalar>(logits: &[T]) -> f64 {
    let mut lp: Vec<f64> = logits.iter().map(|x| x.as_f64()).collect();
    log_softmax_in_place(&mut lp);
    -lp.iter().map(|&l| l.exp() * l).sum::<f64>()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

/// Row-wise layer norm. Writes normalized values to `xhat` and the
/// per-row reciprocal standard deviation to `rstd`.
pub fn layer_norm<T: Scalar>(
    x: &[T],
    cols: usize,
    gain: &[T],
    bias: &[T],
    eps: T,
    out: &mut [T],
    xhat: &mut [T],
    rstd: &mut [T],
) {
    let n = T::from_usize(cols).unwrap();
    for (r, row) in x.chunks_exact(cols).enumerate() {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        rstd[r] = inv;
        for c in 0..cols {
            let h = (row[c] - mean) * inv;
            xhat[r * cols + c] = h;
            out[r * cols + c] = gain[c] * h + bias[c];
        }
    }
}

/// Multi-head scaled dot-product attention for a block of query rows.
///
/// Query row `i` sits at absolute position `offset + i`; with `causal` it
/// attends to keys `0..=offset + i`, otherwise to every key. `probs` (if
/// given) receives the attention weights as `[heads, rows, keys]` with
/// zeros at masked positions.
#[allow(clippy::too_many_arguments)]
pub fn attention<T: Scalar>(
    q: &[T],
    keys: &[T],
    values: &[T],
    rows: usize,
    n_keys: usize,
    d_model: usize,
    n_heads: usize,
    offset: usize,
    causal: bool,
    out: &mut [T],
    mut probs: Option<&mut [T]>,
) {
    let dh = d_model / n_heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut scores = vec![T::zero(); n_keys];
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..rows {
            let visible = if causal {
                (offset + i + 1).min(n_keys)
            } else {
                n_keys
            };
            let qi = &q[i * d_model..][cols.clone()];
            for (j, s) in scores[..visible].iter_mut().enumerate() {
                let kj = &keys[j * d_model..][cols.clone()];
                let mut dot = T::zero();
                for (&a, &b) in qi.iter().zip(kj) {
                    dot += a * b;
                }
                *s = dot * scale;
            }
            softmax_in_place(&mut scores[..visible]);
            let oi = &mut out[i * d_model..][cols.clone()];
            oi.iter_mut().for_each(|v| *v = T::zero());
            for (j, &p) in scores[..visible].iter().enumerate() {
                let vj = &values[j * d_model..][cols.clone()];
                for (o, &v) in oi.iter_mut().zip(vj) {
                    *o += p * v;
                }
            }
            if let Some(pr) = probs.as_deref_mut() {
                let dst = &mut pr[(h * rows + i) * n_keys..][..n_keys];
                dst[..visible].copy_from_slice(&scores[..visible]);
                dst[visible..].iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}

/// Gradients of [`attention`] given the saved weights.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    keys: &[T],
    values: &[T],
    probs: &[T],
    grad_out: &[T],
    rows: usize,
    n_keys: usize,
    d_model: usize,
    n_heads: usize,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let dh = d_model / n_heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dp = vec![T::zero(); n_keys];
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..rows {
            let p = &probs[(h * rows + i) * n_keys..][..n_keys];
            let go = &grad_out[i * d_model..][cols.clone()];
            let mut weighted = T::zero();
            for j in 0..n_keys {
                if p[j] == T::zero() {
                    dp[j] = T::zero();
                    continue;
                }
                let vj = &values[j * d_model..][cols.clone()];
                let mut dot = T::zero();
                for (&g, &v) in go.iter().zip(vj) {
                    dot += g * v;
                }
                dp[j] = dot;
                weighted += dot * p[j];
                let dvj = &mut dv[j * d_model..][cols.clone()];
                for (d, &g) in dvj.iter_mut().zip(go) {
                    *d += p[j] * g;
                }
            }
            let qi = &q[i * d_model..][cols.clone()];
            for j in 0..n_keys {
                if p[j] == T::zero() {
                    continue;
                }
                let ds = p[j] * (dp[j] - weighted) * scale;
                let kj = &keys[j * d_model..][cols.clone()];
                let dqi = &mut dq[i * d_model..][cols.clone()];
                for (d, &k) in dqi.iter_mut().zip(kj) {
                    *d += ds * k;
                }
                let dkj = &mut dk[j * d_model..][cols.clone()];
                for (d, &qv) in dkj.iter_mut().zip(qi) {
                    *d += ds * qv;
                }
            }
        }
    }
}
