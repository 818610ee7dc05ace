//! Transformer building blocks on tape tensors: linear maps, multi-head
//! attention, feed-forward nets, pre-LN residual wiring, and sinusoidal
//! position codes. Callers bind their own weights (frozen constants or
//! trainable leaves) and assemble blocks from these pieces.

use crate::error::Result;
use crate::numcore::{GradSession, ParamId, ParamStore, Tensor};

/// `x [L, in] -> x·w + b`, with `w [in, out]`, `b [out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.matmul(w)?.add(b)
}

/// Two-layer GELU feed-forward net.
pub fn ffn(x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<Tensor> {
    linear(&linear(x, w1, b1)?.gelu(), w2, b2)
}

/// Standard transformer position code, row-major `[len, dim]`:
/// even channels `sin(pos/10000^(c/dim))`, odd channels the matching cosine.
pub fn sinusoidal_pos_enc(len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for pos in 0..len {
        for c in (0..dim).step_by(2) {
            let rate = 1.0 / 10000f64.powf(c as f64 / dim as f64);
            out[pos * dim + c] = (pos as f64 * rate).sin();
            if c + 1 < dim {
                out[pos * dim + c + 1] = (pos as f64 * rate).cos();
            }
        }
    }
    out
}

/// Projection weights for one attention operation, already bound to a tape.
pub struct AttentionTensors {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl AttentionTensors {
    /// Multi-head scaled dot-product attention. `q_in [Lq, C]` attends over
    /// `kv_in [Lk, C]`; self-attention when both are the same tensor.
    pub fn apply(&self, q_in: &Tensor, kv_in: &Tensor, heads: usize) -> Result<Tensor> {
        self.apply_kv(q_in, kv_in, kv_in, heads)
    }

    /// Attention with distinct key and value inputs, for cross-attention
    /// where position codes are added to keys but not values.
    pub fn apply_kv(
        &self,
        q_in: &Tensor,
        k_in: &Tensor,
        v_in: &Tensor,
        heads: usize,
    ) -> Result<Tensor> {
        let dim = q_in.shape()[1];
        assert!(
            heads > 0 && dim % heads == 0,
            "attention width {dim} not divisible into {heads} heads"
        );
        let head_dim = dim / heads;
        let q = linear(q_in, &self.wq, &self.bq)?;
        let k = linear(k_in, &self.wk, &self.bk)?;
        let v = linear(v_in, &self.wv, &self.bv)?;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut parts = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = q.slice(1, h * head_dim, head_dim)?;
            let kh = k.slice(1, h * head_dim, head_dim)?;
            let vh = v.slice(1, h * head_dim, head_dim)?;
            let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
            let attn = scores.softmax(1)?;
            parts.push(attn.matmul(&vh)?);
        }
        let merged = Tensor::concat(&parts, 1)?;
        linear(&merged, &self.wo, &self.bo)
    }
}

/// Store-side ids for one attention operation's eight parameter tensors.
#[derive(Debug, Clone, Copy)]
pub struct AttentionIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttentionIds {
    /// Register `{prefix}/wq` .. `{prefix}/bo`: Gaussian weight matrices,
    /// zero biases.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        seed: u64,
        sigma: f64,
    ) -> Result<Self> {
        let mut w = |n: &str| store.add_gaussian(&format!("{prefix}/{n}"), &[dim, dim], seed, sigma);
        let (wq, wk, wv, wo) = (w("wq")?, w("wk")?, w("wv")?, w("wo")?);
        let mut b = |n: &str| store.add_full(&format!("{prefix}/{n}"), &[dim], 0.0);
        let (bq, bk, bv, bo) = (b("bq")?, b("bk")?, b("bv")?, b("bo")?);
        Ok(Self {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        })
    }

    pub fn bind(&self, sess: &mut GradSession, store: &ParamStore) -> AttentionTensors {
        AttentionTensors {
            wq: sess.leaf(store, self.wq),
            bq: sess.leaf(store, self.bq),
            wk: sess.leaf(store, self.wk),
            bk: sess.leaf(store, self.bk),
            wv: sess.leaf(store, self.wv),
            bv: sess.leaf(store, self.bv),
            wo: sess.leaf(store, self.wo),
            bo: sess.leaf(store, self.bo),
        }
    }
}
