use super::graph::{Graph, Var};
use crate::error::Result;

/// Projection weights of one attention block.
///
/// `wq`, `wk`, `wv` are `D × (heads·head_dim)` with head `i` in column block
/// `i`; `wo` is `(heads·head_dim) × D_out`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Scaled dot-product attention per head on already projected queries, keys
/// and values (`[..., T, heads·head_dim]` each); returns the concatenated head
/// outputs `[..., T_q, heads·head_dim]`.
pub fn attention_heads(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, head_dim: usize, causal: bool) -> Result<Var> {
    let scale = (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_last(q, h * head_dim, head_dim)?;
        let kh = g.slice_last(k, h * head_dim, head_dim)?;
        let vh = g.slice_last(v, h * head_dim, head_dim)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let probs = g.softmax_rows(scores, scale, causal)?;
        outs.push(g.matmul(probs, vh)?);
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    g.concat_last(&outs)
}

/// `Concat(softmax(Q_i·K_iᵀ/√d_k)·V_i)·W^O` with `Q = X_q·W^Q`,
/// `K = X_kv·W^K`, `V = X_kv·W^V`.
pub fn multi_head_attention(
    g: &mut Graph,
    x_q: Var,
    x_kv: Var,
    w: &AttentionWeights,
    heads: usize,
    head_dim: usize,
    causal: bool,
) -> Result<Var> {
    let q = g.matmul(x_q, w.wq)?;
    let k = g.matmul(x_kv, w.wk)?;
    let v = g.matmul(x_kv, w.wv)?;
    let z = attention_heads(g, q, k, v, heads, head_dim, causal)?;
    g.matmul(z, w.wo)
}
