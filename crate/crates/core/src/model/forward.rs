use super::params::{Bound, ModelParams};
use crate::autograd::{attention_heads, multi_head_attention, AttentionWeights, Graph, Tensor, Var};
use crate::error::{bail, Result};
use crate::numerics::ComplexVector;

const LN_EPS: f64 = 1e-5;

/// Stacks LS estimates into a `[B, √M, √M, 2]` grid: antenna `m` sits at
/// cell `(m / √M, m % √M)` with channels `[re, im]`.
pub fn to_grid(h: &[ComplexVector], side: usize) -> Result<Tensor> {
    let m = side * side;
    if h.is_empty() {
        bail!(InvalidArgument, "empty batch");
    }
    let mut data = Vec::with_capacity(h.len() * 2 * m);
    for v in h {
        if v.len() != m {
            bail!(Shape, "expected {} antennas, got {}", m, v.len());
        }
        data.extend(v.to_interleaved());
    }
    Tensor::new(&[h.len(), side, side, 2], data)
}

/// Inverse of [`to_grid`].
pub fn from_grid(t: &Tensor) -> Result<Vec<ComplexVector>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != s[2] || s[3] != 2 {
        bail!(Shape, "expected [B, S, S, 2] grid, got {:?}", s);
    }
    t.data().chunks_exact(2 * s[1] * s[2]).map(ComplexVector::from_interleaved).collect()
}

fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.var(&format!("{prefix}.w"))?)?;
    g.add_broadcast(y, p.var(&format!("{prefix}.b"))?)
}

fn layer_norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gamma = p.var(&format!("{prefix}.gamma"))?;
    let beta = p.var(&format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

fn conv(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    g.conv2d(x, p.var(&format!("{prefix}.k"))?, p.var(&format!("{prefix}.b"))?)
}

fn attn_weights(p: &Bound, prefix: &str) -> Result<AttentionWeights> {
    Ok(AttentionWeights {
        wq: p.var(&format!("{prefix}.wq"))?,
        wk: p.var(&format!("{prefix}.wk"))?,
        wv: p.var(&format!("{prefix}.wv"))?,
        wo: p.var(&format!("{prefix}.wo"))?,
    })
}

fn batch_of(g: &Graph, x: Var, trailing: usize) -> Result<usize> {
    let s = g.shape(x);
    if s.len() != trailing + 1 {
        bail!(Shape, "expected a batch of rank-{} tensors, got {:?}", trailing, s);
    }
    Ok(s[0])
}

/// `[B, √M, √M, 2]` LS grid → 3×3 convolution with `F` filters → `[B, M, F]`.
pub fn preprocess(g: &mut Graph, p: &Bound, grid: Var) -> Result<Var> {
    let cfg = p.config();
    let b = batch_of(g, grid, 3)?;
    let h1 = conv(g, p, "pre.conv", grid)?;
    g.reshape(h1, &[b, cfg.m, cfg.f])
}

/// Attention over the `M` antenna tokens of width `F`, head width `F`.
pub fn feature_attention(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let cfg = p.config();
    let w = attn_weights(p, prefix)?;
    multi_head_attention(g, x, x, &w, cfg.heads, cfg.f, false)
}

/// Attention over the `F` feature tokens of width `M`.
pub fn spatial_attention(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let cfg = p.config();
    let w = attn_weights(p, prefix)?;
    let xt = g.transpose(x)?;
    let z = multi_head_attention(g, xt, xt, &w, cfg.heads, cfg.spatial_head_dim(), false)?;
    g.transpose(z)
}

/// One parallel feature/spatial attention block, `[.., M, F]` → `[.., M, F]`.
pub fn pfsa_block(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let zf = feature_attention(g, p, &format!("{prefix}.feat_attn"), x)?;
    let zs = spatial_attention(g, p, &format!("{prefix}.spat_attn"), x)?;
    let co = g.concat_last(&[zf, zs])?;
    let fc = linear(g, p, &format!("{prefix}.fuse_fc"), co)?;
    let res = g.add(fc, x)?;
    let h_ln = layer_norm(g, p, &format!("{prefix}.ln1"), res)?;
    let a = g.matmul(h_ln, p.var(&format!("{prefix}.ffn.w1"))?)?;
    let a = g.add_broadcast(a, p.var(&format!("{prefix}.ffn.b1"))?)?;
    let a = g.gelu(a);
    let a = g.matmul(a, p.var(&format!("{prefix}.ffn.w2"))?)?;
    let a = g.add_broadcast(a, p.var(&format!("{prefix}.ffn.b2"))?)?;
    let res = g.add(a, h_ln)?;
    layer_norm(g, p, &format!("{prefix}.ln2"), res)
}

/// Two attention blocks, projection to width `d` and the positional
/// embedding: `[.., M, F]` → `[.., M, d]`.
pub fn embed(g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
    let h = pfsa_block(g, p, "embed.block1", x)?;
    let h = pfsa_block(g, p, "embed.block2", h)?;
    let h = linear(g, p, "embed.proj_fc", h)?;
    g.add_broadcast(h, p.var("pos_embed")?)
}

/// Pre-LN decoder stack followed by the final layer norm.
pub fn backbone_forward(g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
    let h = backbone_layers(g, p, x)?;
    layer_norm(g, p, "backbone.ln_f", h)
}

/// The decoder stack without the final layer norm.
pub fn backbone_layers(g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
    let cfg = p.config().clone();
    let head_dim = cfg.d / cfg.n_heads;
    let mut h = x;
    for k in 1..=cfg.n_layers {
        let pre = format!("backbone.layer{k}");
        let a = layer_norm(g, p, &format!("{pre}.ln1"), h)?;
        let qkv = g.matmul(a, p.var(&format!("{pre}.attn.w_qkv"))?)?;
        let qkv = g.add_broadcast(qkv, p.var(&format!("{pre}.attn.b_qkv"))?)?;
        let q = g.slice_last(qkv, 0, cfg.d)?;
        let kk = g.slice_last(qkv, cfg.d, cfg.d)?;
        let v = g.slice_last(qkv, 2 * cfg.d, cfg.d)?;
        let z = attention_heads(g, q, kk, v, cfg.n_heads, head_dim, cfg.causal)?;
        let z = g.matmul(z, p.var(&format!("{pre}.attn.w_o"))?)?;
        let z = g.add_broadcast(z, p.var(&format!("{pre}.attn.b_o"))?)?;
        h = g.add(h, z)?;

        let a = layer_norm(g, p, &format!("{pre}.ln2"), h)?;
        let a = g.matmul(a, p.var(&format!("{pre}.mlp.w1"))?)?;
        let a = g.add_broadcast(a, p.var(&format!("{pre}.mlp.b1"))?)?;
        let a = g.gelu(a);
        let a = g.matmul(a, p.var(&format!("{pre}.mlp.w2"))?)?;
        let a = g.add_broadcast(a, p.var(&format!("{pre}.mlp.b2"))?)?;
        h = g.add(h, a)?;
    }
    Ok(h)
}

/// Noise estimate from backbone features, `[B, M, d]` → `[B, √M, √M, 2]`.
pub fn noise_head(g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
    let cfg = p.config();
    let side = cfg.side();
    let b = batch_of(g, x, 2)?;
    let h7 = linear(g, p, "post.fc", x)?;
    let grid = g.reshape(h7, &[b, side, side, cfg.f])?;
    let a = conv(g, p, "post.conv1", grid)?;
    let a = g.gelu(a);
    let a = conv(g, p, "post.conv2", a)?;
    let a = g.gelu(a);
    conv(g, p, "post.conv3", a)
}

/// `Ĥ = Ĥ_LS − noise_head(H₆)`.
pub fn postprocess(g: &mut Graph, p: &Bound, h6: Var, grid: Var) -> Result<Var> {
    let noise = noise_head(g, p, h6)?;
    g.sub(grid, noise)
}

/// Full network on a `[B, √M, √M, 2]` LS grid.
pub fn forward_graph(g: &mut Graph, p: &Bound, grid: Var) -> Result<Var> {
    let h2 = preprocess(g, p, grid)?;
    let h5 = embed(g, p, h2)?;
    let h6 = backbone_forward(g, p, h5)?;
    postprocess(g, p, h6, grid)
}

/// Estimates for a batch of LS observations.
pub fn forward_batch(h_ls: &[ComplexVector], params: &ModelParams) -> Result<Vec<ComplexVector>> {
    let side = params.config().side();
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let grid = g.constant(to_grid(h_ls, side)?);
    let out = forward_graph(&mut g, &p, grid)?;
    from_grid(g.value(out))
}

pub fn forward(h_ls: &ComplexVector, params: &ModelParams) -> Result<ComplexVector> {
    Ok(forward_batch(std::slice::from_ref(h_ls), params)?.remove(0))
}
