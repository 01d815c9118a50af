use rand::Rng;

use crate::error::{NnError, Result};
use crate::layers::Linear;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Lower-triangular `[len, len]` mask: query `i` may attend to keys `j ≤ i`.
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|e| e % len <= e / len).collect()
}

/// `softmax(Q·Kᵀ/√d_k [+ mask])·V` for `q: [.., Lq, d_k]`,
/// `k: [.., Lk, d_k]`, `v: [.., Lk, d_v]`. `allowed` is an optional
/// `[Lq, Lk]` mask shared across the leading axes. Returns the output and
/// the attention weights.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    allowed: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let dk = *tape.shape(q).last().unwrap_or(&0);
    if dk == 0 || tape.shape(k).last() != Some(&dk) {
        return Err(NnError::ShapeMismatch {
            op: "attention",
            lhs: tape.shape(q).to_vec(),
            rhs: tape.shape(k).to_vec(),
        });
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let weights = match allowed {
        Some(mask) => tape.masked_softmax(scores, mask)?,
        None => {
            let axis = tape.shape(scores).len() - 1;
            tape.softmax(scores, axis)?
        }
    };
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head attention over `[batch, len, d_model]` sequences.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub d_model: usize,
    pub n_heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(NnError::InvalidArgument(format!(
                "d_model {d_model} not divisible by {n_heads} heads"
            )));
        }
        Ok(Self {
            d_model,
            n_heads,
            query: Linear::new(store, &format!("{name}.query"), d_model, d_model, rng),
            key: Linear::new(store, &format!("{name}.key"), d_model, d_model, rng),
            value: Linear::new(store, &format!("{name}.value"), d_model, d_model, rng),
            output: Linear::new(store, &format!("{name}.output"), d_model, d_model, rng),
        })
    }

    /// Attention of `q_src` over `kv_src`; pass the same var for
    /// self-attention. Returns the projected output and per-head weights.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q_src: Var,
        kv_src: Var,
        allowed: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.query.forward(tape, store, q_src)?;
        let k = self.key.forward(tape, store, kv_src)?;
        let v = self.value.forward(tape, store, kv_src)?;
        let axis = tape.shape(q).len() - 1;
        let dh = self.d_model / self.n_heads;
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice(q, axis, h * dh, dh)?,
                    tape.slice(k, axis, h * dh, dh)?,
                    tape.slice(v, axis, h * dh, dh)?,
                )
            };
            let (o, w) = scaled_dot_attention(tape, qh, kh, vh, allowed)?;
            heads.push(o);
            weights.push(w);
        }
        let merged = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, axis)? };
        Ok((self.output.forward(tape, store, merged)?, weights))
    }
}
