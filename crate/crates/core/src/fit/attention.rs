//! Multi-head attention and feed-forward sub-layers.
//!
//! Pre-layer-norm residual convention throughout: callers add the returned
//! value to their input. Attention is full (non-causal) with `1/sqrt(d_head)`
//! scaling; queries and keys/values may live in spaces of different widths
//! (latent vs patch vs conditioning channels).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamInit, ParamStore};
use crate::error::Result;
use crate::tensor::{Element, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Register the parameters of one attention sub-layer under `prefix`.
/// `zero_out` zero-initializes the output projection so the residual branch
/// starts as an identity.
pub fn init_attention<E: Element>(
    init: &mut ParamInit<E>,
    prefix: &str,
    q_dim: usize,
    kv_dim: usize,
    inner: usize,
    zero_out: bool,
) -> Result<()> {
    init.ones(&format!("{prefix}.norm_q.gain"), &[q_dim])?;
    init.zeros(&format!("{prefix}.norm_q.bias"), &[q_dim])?;
    init.ones(&format!("{prefix}.norm_kv.gain"), &[kv_dim])?;
    init.zeros(&format!("{prefix}.norm_kv.bias"), &[kv_dim])?;
    init.linear_weight(&format!("{prefix}.wq"), q_dim, inner)?;
    init.zeros(&format!("{prefix}.bq"), &[inner])?;
    // No key bias: a uniform key offset shifts every score in a row by the
    // same amount, which softmax cancels exactly, so the parameter would be
    // structurally gradient-free.
    init.linear_weight(&format!("{prefix}.wk"), kv_dim, inner)?;
    init.linear_weight(&format!("{prefix}.wv"), kv_dim, inner)?;
    init.zeros(&format!("{prefix}.bv"), &[inner])?;
    if zero_out {
        init.zeros(&format!("{prefix}.wo"), &[inner, q_dim])?;
    } else {
        init.linear_weight(&format!("{prefix}.wo"), inner, q_dim)?;
    }
    init.zeros(&format!("{prefix}.bo"), &[q_dim])?;
    Ok(())
}

pub fn attention_param_count(q_dim: usize, kv_dim: usize, inner: usize) -> usize {
    2 * q_dim + 2 * kv_dim                     // norms
        + q_dim * inner + inner                // q projection
        + kv_dim * inner                       // k projection (no bias)
        + kv_dim * inner + inner               // v projection
        + inner * q_dim + q_dim                // output projection
}

fn linear<E: Element>(
    x: &Tensor<E>,
    params: &ParamStore<E>,
    w: &str,
    b: &str,
) -> Result<Tensor<E>> {
    x.matmul(params.get(w)?)?.add(params.get(b)?)
}

/// Attention branch: `q [B, Lq, Dq]` attends to `kv [B, Lk, Dk]`, producing
/// `[B, Lq, Dq]` (residual not included).
pub fn attention<E: Element>(
    q_in: &Tensor<E>,
    kv_in: &Tensor<E>,
    params: &ParamStore<E>,
    prefix: &str,
    heads: usize,
) -> Result<Tensor<E>> {
    let (b, lq) = (q_in.shape()[0], q_in.shape()[1]);
    let lk = kv_in.shape()[1];

    let qn = q_in.layer_norm(
        params.get(&format!("{prefix}.norm_q.gain"))?,
        params.get(&format!("{prefix}.norm_q.bias"))?,
        LN_EPS,
    )?;
    let kvn = kv_in.layer_norm(
        params.get(&format!("{prefix}.norm_kv.gain"))?,
        params.get(&format!("{prefix}.norm_kv.bias"))?,
        LN_EPS,
    )?;

    let q = linear(&qn, params, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
    let k = kvn.matmul(params.get(&format!("{prefix}.wk"))?)?;
    let v = linear(&kvn, params, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
    let inner = q.shape()[2];
    let dh = inner / heads;

    // [B, L, inner] -> [B, heads, L, dh]
    let split = |t: &Tensor<E>, l: usize| -> Result<Tensor<E>> {
        t.reshape(&[b, l, heads, dh])?.permute(&[0, 2, 1, 3])
    };
    let qh = split(&q, lq)?;
    let kh = split(&k, lk)?;
    let vh = split(&v, lk)?;

    let scores = qh
        .matmul(&kh.transpose_last()?)?
        .scale(E::from_f64(1.0 / (dh as f64).sqrt()))?;
    let attn = scores.softmax(3)?;
    let ctx = attn
        .matmul(&vh)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, lq, inner])?;
    linear(&ctx, params, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
}

/// Register a feed-forward sub-layer (`dim -> mult*dim -> dim`, GELU).
/// `zero_out` zero-initializes the second linear layer.
pub fn init_feed_forward<E: Element>(
    init: &mut ParamInit<E>,
    prefix: &str,
    dim: usize,
    mult: usize,
    zero_out: bool,
) -> Result<()> {
    init.ones(&format!("{prefix}.norm.gain"), &[dim])?;
    init.zeros(&format!("{prefix}.norm.bias"), &[dim])?;
    init.linear_weight(&format!("{prefix}.w1"), dim, mult * dim)?;
    init.zeros(&format!("{prefix}.b1"), &[mult * dim])?;
    if zero_out {
        init.zeros(&format!("{prefix}.w2"), &[mult * dim, dim])?;
    } else {
        init.linear_weight(&format!("{prefix}.w2"), mult * dim, dim)?;
    }
    init.zeros(&format!("{prefix}.b2"), &[dim])?;
    Ok(())
}

pub fn feed_forward_param_count(dim: usize, mult: usize) -> usize {
    2 * dim + dim * (mult * dim) + mult * dim + (mult * dim) * dim + dim
}

/// Feed-forward branch (residual not included). Dropout, when enabled,
/// multiplies the hidden activation by an inverted-probability mask.
pub fn feed_forward<E: Element>(
    x: &Tensor<E>,
    params: &ParamStore<E>,
    prefix: &str,
    dropout: Option<(&mut ChaCha8Rng, f64)>,
) -> Result<Tensor<E>> {
    let normed = x.layer_norm(
        params.get(&format!("{prefix}.norm.gain"))?,
        params.get(&format!("{prefix}.norm.bias"))?,
        LN_EPS,
    )?;
    let mut hidden = linear(&normed, params, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?
        .gelu()?;
    if let Some((rng, p)) = dropout {
        if p > 0.0 {
            let keep = 1.0 / (1.0 - p);
            let mask: Vec<E> = (0..hidden.numel())
                .map(|_| {
                    if rng.gen::<f64>() < p {
                        E::zero()
                    } else {
                        E::from_f64(keep)
                    }
                })
                .collect();
            hidden = hidden.mul(&Tensor::new(mask, hidden.shape())?)?;
        }
    }
    linear(&hidden, params, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
}
