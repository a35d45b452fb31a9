use super::*;
use crate::autograd::{grad_check, Graph, Tensor, Var};
use crate::error::Result;
use crate::numerics::{ComplexVector, Rng, C64};

fn cfg(m: usize, f: usize, heads: usize, d: usize, n_layers: usize) -> ModelConfig {
    ModelConfig { m, f, heads, d, n_layers, n_tuned: n_layers.min(2), n_heads: 2, ffn_mult: 4, causal: true, spatial_split_heads: false }
}

fn randomized(c: &ModelConfig, seed: u64, std: f64) -> ModelParams {
    let mut p = ModelParams::init(c, seed).unwrap();
    let mut rng = Rng::new(seed ^ 0x5eed);
    for q in p.params_mut() {
        for v in q.tensor.data_mut() {
            *v = if q.name.ends_with(".gamma") { 1.0 + 0.1 * rng.standard_normal() } else { std * rng.standard_normal() };
        }
    }
    p
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.standard_normal())
}

fn rand_h(rng: &mut Rng, m: usize) -> ComplexVector {
    ComplexVector::new((0..m).map(|_| rng.complex_gaussian(1.0)).collect()).unwrap()
}

fn zero(p: &mut ModelParams, name: &str) {
    let shape = p.get(name).unwrap().tensor.shape().to_vec();
    p.set(name, Tensor::zeros(&shape)).unwrap();
}

fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed);
    let w = g.constant(randn(&mut rng, g.shape(y)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Plain-loop attention for one sequence `x: [T, D]` with weight tensors laid
/// out as in the model.
fn naive_mha(x: &[f64], t: usize, d: usize, w: [&Tensor; 4], heads: usize, dk: usize) -> Vec<f64> {
    let [wq, wk, wv, wo] = w;
    let proj = |w: &Tensor, row: usize, col: usize| (0..d).map(|c| x[row * d + c] * w.data()[c * heads * dk + col]).sum::<f64>();
    let dout = wo.shape()[1];
    let mut out = vec![0.0; t * dout];
    for h in 0..heads {
        for i in 0..t {
            let s: Vec<f64> = (0..t)
                .map(|j| (0..dk).map(|c| proj(wq, i, h * dk + c) * proj(wk, j, h * dk + c)).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dk {
                let head_val: f64 = (0..t).map(|j| e[j] / z * proj(wv, j, h * dk + c)).sum();
                for o in 0..dout {
                    out[i * dout + o] += head_val * wo.data()[(h * dk + c) * dout + o];
                }
            }
        }
    }
    out
}

fn weights<'a>(p: &'a ModelParams, prefix: &str) -> [&'a Tensor; 4] {
    ["wq", "wk", "wv", "wo"].map(|w| &p.get(&format!("{prefix}.{w}")).unwrap().tensor)
}

fn run<F>(p: &ModelParams, x: Tensor, f: F) -> Tensor
where
    F: Fn(&mut Graph, &Bound, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let xv = g.constant(x);
    let y = f(&mut g, &b, xv).unwrap();
    g.value(y).clone()
}

#[test]
fn config_validation() {
    assert!(cfg(16, 4, 2, 16, 2).validate().is_ok());
    assert!(cfg(15, 4, 2, 16, 2).validate().is_err());
    assert!(ModelConfig { n_tuned: 3, ..cfg(16, 4, 2, 16, 2) }.validate().is_err());
    assert!(ModelConfig { n_heads: 3, ..cfg(16, 4, 2, 16, 2) }.validate().is_err());
    assert!(ModelConfig { f: 0, ..cfg(16, 4, 2, 16, 2) }.validate().is_err());
    assert!(ModelConfig { spatial_split_heads: true, heads: 3, ..cfg(16, 4, 2, 16, 2) }.validate().is_err());
    assert!(ModelParams::init(&cfg(15, 4, 2, 16, 2), 0).is_err());
}

#[test]
fn grid_round_trip_preserves_antenna_order() {
    let h = ComplexVector::new((0..16).map(|m| C64::new(m as f64, -(m as f64))).collect()).unwrap();
    let t = to_grid(std::slice::from_ref(&h), 4).unwrap();
    assert_eq!(t.shape(), &[1, 4, 4, 2]);
    // antenna 6 -> row 1, column 2
    assert_eq!(t.data()[((4 + 2) * 2)..((4 + 2) * 2 + 2)], [6.0, -6.0]);
    assert_eq!(from_grid(&t).unwrap()[0], h);
    assert!(to_grid(&[h], 3).is_err());
}

#[test]
fn preprocess_zero_input_gives_zero() {
    let p = ModelParams::init(&cfg(16, 8, 2, 16, 1), 1).unwrap();
    let y = run(&p, Tensor::zeros(&[1, 4, 4, 2]), preprocess);
    assert_eq!(y.shape(), &[1, 16, 8]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn preprocess_identity_kernel_copies_real_parts() {
    let mut p = ModelParams::init(&cfg(16, 8, 2, 16, 1), 1).unwrap();
    let mut k = Tensor::zeros(&[3, 3, 2, 8]);
    k.data_mut()[(4 * 2) * 8] = 1.0;
    p.set("pre.conv.k", k).unwrap();
    let mut rng = Rng::new(2);
    let h = ComplexVector::new((0..16).map(|_| C64::new(rng.standard_normal(), 0.0)).collect()).unwrap();
    let y = run(&p, to_grid(std::slice::from_ref(&h), 4).unwrap(), preprocess);
    for m in 0..16 {
        assert_eq!(y.data()[m * 8], h[m].re);
    }
}

#[test]
fn preprocess_matches_hand_pixel() {
    let p = ModelParams::init(&cfg(16, 8, 2, 16, 1), 3).unwrap();
    let mut rng = Rng::new(4);
    let h = rand_h(&mut rng, 16);
    let y = run(&p, to_grid(std::slice::from_ref(&h), 4).unwrap(), preprocess);
    assert_eq!(y.shape(), &[1, 16, 8]);
    // antenna 5 = cell (1,1), filter 3: full 3x3 neighbourhood over antennas 0..=10
    let k = &p.get("pre.conv.k").unwrap().tensor;
    let mut s = 0.0;
    for ky in 0..3 {
        for kx in 0..3 {
            let a = ky * 4 + kx;
            s += h[a].re * k.data()[((ky * 3 + kx) * 2) * 8 + 3] + h[a].im * k.data()[((ky * 3 + kx) * 2 + 1) * 8 + 3];
        }
    }
    assert!((y.data()[5 * 8 + 3] - s).abs() < 1e-14);
}

#[test]
fn feature_attention_matches_naive_oracle() {
    let c = cfg(9, 4, 2, 8, 1);
    let p = randomized(&c, 5, 0.5);
    let mut rng = Rng::new(6);
    let x = randn(&mut rng, &[1, 9, 4]);
    let y = run(&p, x.clone(), |g, b, x| feature_attention(g, b, "embed.block1.feat_attn", x));
    let oracle = naive_mha(x.data(), 9, 4, weights(&p, "embed.block1.feat_attn"), 2, 4);
    assert!(y.data().iter().zip(&oracle).all(|(a, b)| (a - b).abs() <= 1e-10));
}

#[test]
fn feature_attention_degenerate_cases() {
    // one token: attention weight 1, output is the value path
    let c = cfg(1, 3, 2, 4, 1);
    let p = randomized(&c, 7, 0.5);
    let mut rng = Rng::new(8);
    let x = randn(&mut rng, &[1, 1, 3]);
    let y = run(&p, x.clone(), |g, b, x| feature_attention(g, b, "embed.block1.feat_attn", x));
    let [_, _, wv, wo] = weights(&p, "embed.block1.feat_attn");
    let mut g = Graph::new();
    let (xv, wvv, wov) = (g.constant(x), g.constant(wv.clone()), g.constant(wo.clone()));
    let v = g.matmul(xv, wvv).unwrap();
    let e = g.matmul(v, wov).unwrap();
    assert!(y.data().iter().zip(g.value(e).data()).all(|(a, b)| (a - b).abs() < 1e-14));

    // zero Q/K: uniform attention, all rows equal
    let mut p = randomized(&cfg(9, 4, 2, 8, 1), 9, 0.5);
    zero(&mut p, "embed.block1.feat_attn.wq");
    zero(&mut p, "embed.block1.feat_attn.wk");
    let x = randn(&mut rng, &[1, 9, 4]);
    let y = run(&p, x, |g, b, x| feature_attention(g, b, "embed.block1.feat_attn", x));
    for row in y.data().chunks(4).skip(1) {
        assert!(row.iter().zip(&y.data()[..4]).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn spatial_attention_matches_transposed_oracle() {
    for split in [false, true] {
        let c = ModelConfig { spatial_split_heads: split, ..cfg(9, 4, 3, 8, 1) };
        let p = randomized(&c, 10, 0.3);
        let mut rng = Rng::new(11);
        let x = randn(&mut rng, &[1, 9, 4]);
        let y = run(&p, x.clone(), |g, b, x| spatial_attention(g, b, "embed.block2.spat_attn", x));
        let xt: Vec<f64> = (0..4).flat_map(|f| (0..9).map(move |m| (f, m))).map(|(f, m)| x.data()[m * 4 + f]).collect();
        let zt = naive_mha(&xt, 4, 9, weights(&p, "embed.block2.spat_attn"), 3, c.spatial_head_dim());
        for m in 0..9 {
            for f in 0..4 {
                assert!((y.data()[m * 4 + f] - zt[f * 9 + m]).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn spatial_attention_degenerate_cases() {
    // one feature token
    let p = randomized(&cfg(4, 1, 2, 4, 1), 12, 0.5);
    let mut rng = Rng::new(13);
    let x = randn(&mut rng, &[1, 4, 1]);
    let y = run(&p, x.clone(), |g, b, x| spatial_attention(g, b, "embed.block1.spat_attn", x));
    let [_, _, wv, wo] = weights(&p, "embed.block1.spat_attn");
    let xt = x.data();
    for m in 0..4 {
        let e: f64 = (0..wv.shape()[1]).map(|c| (0..4).map(|i| xt[i] * wv.data()[i * wv.shape()[1] + c]).sum::<f64>() * wo.data()[c * 4 + m]).sum();
        assert!((y.data()[m] - e).abs() < 1e-14);
    }

    // zero Q/K: every feature token receives the same output
    let mut p = randomized(&cfg(9, 4, 2, 8, 1), 14, 0.5);
    zero(&mut p, "embed.block1.spat_attn.wq");
    zero(&mut p, "embed.block1.spat_attn.wk");
    let y = run(&p, randn(&mut rng, &[1, 9, 4]), |g, b, x| spatial_attention(g, b, "embed.block1.spat_attn", x));
    for row in y.data().chunks(4) {
        assert!(row.iter().all(|v| (v - row[0]).abs() < 1e-12));
    }
}

#[test]
fn pfsa_block_residual_path() {
    let mut p = randomized(&cfg(9, 4, 2, 8, 1), 15, 0.5);
    let mut rng = Rng::new(16);
    let x = randn(&mut rng, &[2, 9, 4]);
    let y = run(&p, x.clone(), |g, b, x| pfsa_block(g, b, "embed.block1", x));
    assert_eq!(y.shape(), x.shape());

    for n in ["fuse_fc.w", "fuse_fc.b", "ffn.w2", "ffn.b2"] {
        zero(&mut p, &format!("embed.block1.{n}"));
    }
    let y = run(&p, x.clone(), |g, b, x| pfsa_block(g, b, "embed.block1", x));
    let e = run(&p, x, |g, b, x| {
        let a = g.layer_norm(x, b.var("embed.block1.ln1.gamma")?, b.var("embed.block1.ln1.beta")?, 1e-5)?;
        g.layer_norm(a, b.var("embed.block1.ln2.gamma")?, b.var("embed.block1.ln2.beta")?, 1e-5)
    });
    assert!(y.data().iter().zip(e.data()).all(|(a, b)| (a - b).abs() < 1e-12));
}

/// Gradient check of `f` with respect to the input and every parameter.
fn check_all<F>(p: &ModelParams, x: Tensor, f: F, coords: usize) -> f64
where
    F: Fn(&mut Graph, &Bound, Var) -> Result<Var>,
{
    let mut inputs = vec![(x, true)];
    inputs.extend(p.params().iter().map(|q| (q.tensor.clone(), true)));
    let r = grad_check(
        |g, v| {
            let b = p.bind_vars(v[1..].to_vec())?;
            let y = f(g, &b, v[0])?;
            probe(g, y, 77)
        },
        &inputs,
        1e-5,
        coords,
        3,
    )
    .unwrap();
    r.max_rel_error
}

#[test]
fn pfsa_block_gradients() {
    let p = randomized(&cfg(9, 4, 2, 8, 1), 17, 0.4);
    let mut rng = Rng::new(18);
    let err = check_all(&p, randn(&mut rng, &[1, 9, 4]), |g, b, x| pfsa_block(g, b, "embed.block1", x), 6);
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn embed_positional_terms() {
    let mut rng = Rng::new(19);
    let c = cfg(16, 8, 2, 32, 1);
    let mut p = randomized(&c, 20, 0.3);
    let x = randn(&mut rng, &[1, 16, 8]);
    let h5 = run(&p, x.clone(), embed);
    assert_eq!(h5.shape(), &[1, 16, 32]);

    let pos = p.get("pos_embed").unwrap().tensor.clone();
    zero(&mut p, "pos_embed");
    let h4 = run(&p, x.clone(), embed);
    assert!(h5.data().iter().zip(h4.data()).zip(pos.data().iter().cycle()).all(|((a, b), q)| (a - b - q).abs() < 1e-12));

    p.set("pos_embed", pos.clone()).unwrap();
    zero(&mut p, "embed.proj_fc.w");
    zero(&mut p, "embed.proj_fc.b");
    let only_p = run(&p, x, embed);
    assert_eq!(only_p.data(), pos.data());
}

#[test]
fn embed_gradient_reaches_positional_embedding() {
    let p = randomized(&cfg(16, 8, 2, 32, 1), 21, 0.3);
    let mut rng = Rng::new(22);
    let mut g = Graph::new();
    let b = p.bind(&mut g, true);
    let x = g.constant(randn(&mut rng, &[1, 16, 8]));
    let target = g.constant(randn(&mut rng, &[1, 16, 32]));
    let y = embed(&mut g, &b, x).unwrap();
    let d = g.sub(y, target).unwrap();
    let sq = g.mul(d, d).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    let grad = g.grad(b.var("pos_embed").unwrap()).unwrap();
    assert!(grad.data().iter().any(|&v| v.abs() > 1e-6));
}

#[test]
fn backbone_identities() {
    let mut rng = Rng::new(23);
    let x = randn(&mut rng, &[2, 9, 8]);
    let ln_f = |g: &mut Graph, b: &Bound, x: Var| g.layer_norm(x, b.var("backbone.ln_f.gamma")?, b.var("backbone.ln_f.beta")?, 1e-5);

    let p0 = randomized(&ModelConfig { n_tuned: 0, ..cfg(9, 4, 2, 8, 0) }, 24, 0.5);
    let y = run(&p0, x.clone(), backbone_forward);
    assert_eq!(y, run(&p0, x.clone(), ln_f));

    let mut p = randomized(&cfg(9, 4, 2, 8, 3), 25, 0.5);
    for k in 1..=3 {
        for n in ["attn.w_o", "attn.b_o", "mlp.w2", "mlp.b2"] {
            zero(&mut p, &format!("backbone.layer{k}.{n}"));
        }
    }
    let y = run(&p, x.clone(), backbone_forward);
    assert!(y.data().iter().zip(run(&p, x, ln_f).data()).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn backbone_causal_mask() {
    let p = randomized(&cfg(9, 4, 2, 8, 1), 26, 0.5);
    let mut rng = Rng::new(27);
    let x = randn(&mut rng, &[1, 9, 8]);
    let base = run(&p, x.clone(), backbone_layers);
    let j = 5;
    let mut xp = x.clone();
    for c in 0..8 {
        xp.data_mut()[j * 8 + c] += 1.0;
    }
    let pert = run(&p, xp.clone(), backbone_layers);
    assert_eq!(base.data()[..j * 8], pert.data()[..j * 8]);
    assert_ne!(base.data()[j * 8..], pert.data()[j * 8..]);

    let pn = ModelParams::from_parts(ModelConfig { causal: false, ..p.config().clone() }, p.params().to_vec()).unwrap();
    let a = run(&pn, x, backbone_layers);
    let c = run(&pn, xp, backbone_layers);
    assert_ne!(a.data()[..8], c.data()[..8]);
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let w = t.last_dim();
    let mut out = t.clone();
    for (i, &src) in perm.iter().enumerate() {
        out.data_mut()[i * w..(i + 1) * w].copy_from_slice(&t.data()[src * w..(src + 1) * w]);
    }
    out
}

#[test]
fn positional_embedding_breaks_permutation_equivariance() {
    let c = ModelConfig { causal: false, ..cfg(9, 4, 2, 8, 2) };
    let mut p = randomized(&c, 28, 0.5);
    let mut rng = Rng::new(29);
    let x = randn(&mut rng, &[1, 9, 8]);
    let perm = [3, 0, 8, 1, 5, 2, 7, 4, 6];
    let f = |g: &mut Graph, b: &Bound, x: Var| {
        let h = g.add_broadcast(x, b.var("pos_embed")?)?;
        backbone_forward(g, b, h)
    };
    let y = run(&p, x.clone(), f);
    let yp = run(&p, permute_rows(&x, &perm), f);
    let diff = permute_rows(&y, &perm).data().iter().zip(yp.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-6);

    zero(&mut p, "pos_embed");
    let y = run(&p, x.clone(), f);
    let yp = run(&p, permute_rows(&x, &perm), f);
    let diff = permute_rows(&y, &perm).data().iter().zip(yp.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12);

    let xf = randn(&mut rng, &[1, 9, 4]);
    let fa = |g: &mut Graph, b: &Bound, x: Var| feature_attention(g, b, "embed.block1.feat_attn", x);
    let y = run(&p, xf.clone(), fa);
    let yp = run(&p, permute_rows(&xf, &perm), fa);
    assert!(permute_rows(&y, &perm).data().iter().zip(yp.data()).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn postprocess_residual_identity() {
    let p = randomized(&cfg(16, 4, 2, 8, 1), 30, 0.5);
    let mut p = p;
    zero(&mut p, "post.conv3.k");
    zero(&mut p, "post.conv3.b");
    let mut rng = Rng::new(31);
    let grid = randn(&mut rng, &[2, 4, 4, 2]);
    let h6 = randn(&mut rng, &[2, 16, 8]);
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let (gv, hv) = (g.constant(grid.clone()), g.constant(h6));
    let y = postprocess(&mut g, &b, hv, gv).unwrap();
    assert_eq!(g.value(y), &grid);
}

#[test]
fn postprocess_can_cancel_its_input() {
    // H6 carries the grid in its first two features; fc and convs pass them
    // through, shifted by +100 so the GELUs act as identities.
    let c = cfg(16, 4, 2, 8, 1);
    let mut p = ModelParams::init(&c, 32).unwrap();
    let fc = Tensor::from_fn(&[8, 4], |i| if i == 0 || i == 5 { 1.0 } else { 0.0 });
    p.set("post.fc.w", fc).unwrap();
    let center = |cin: usize, cout: usize| {
        let mut k = Tensor::zeros(&[3, 3, cin, cout]);
        for ch in 0..2 {
            k.data_mut()[(4 * cin + ch) * cout + ch] = 1.0;
        }
        k
    };
    p.set("post.conv1.k", center(4, 64)).unwrap();
    p.set("post.conv1.b", Tensor::from_fn(&[64], |i| if i < 2 { 100.0 } else { 0.0 })).unwrap();
    p.set("post.conv2.k", center(64, 64)).unwrap();
    p.set("post.conv3.k", center(64, 2)).unwrap();
    p.set("post.conv3.b", Tensor::full(&[2], -100.0)).unwrap();

    let mut rng = Rng::new(33);
    let grid = randn(&mut rng, &[1, 4, 4, 2]);
    let mut h6 = Tensor::zeros(&[1, 16, 8]);
    for m in 0..16 {
        h6.data_mut()[m * 8] = grid.data()[2 * m];
        h6.data_mut()[m * 8 + 1] = grid.data()[2 * m + 1];
    }
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let (gv, hv) = (g.constant(grid), g.constant(h6));
    let y = postprocess(&mut g, &b, hv, gv).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 4, 4, 2]);
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn postprocess_gradients() {
    let p = randomized(&cfg(16, 4, 2, 8, 1), 34, 0.3);
    let mut rng = Rng::new(35);
    let grid = randn(&mut rng, &[1, 4, 4, 2]);
    let err = check_all(&p, randn(&mut rng, &[1, 16, 8]), |g, b, x| {
        let gv = g.constant(grid.clone());
        postprocess(g, b, x, gv)
    }, 5);
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn untrained_model_returns_ls_estimate() {
    let p = ModelParams::init(&cfg(16, 4, 2, 16, 2), 36).unwrap();
    let mut rng = Rng::new(37);
    let hs: Vec<ComplexVector> = (0..3).map(|_| rand_h(&mut rng, 16)).collect();
    let out = forward_batch(&hs, &p).unwrap();
    assert_eq!(out, hs);
    let one = forward(&hs[1], &p).unwrap();
    assert_eq!(one.len(), 16);
    assert_eq!(one, hs[1]);
}

#[test]
fn forward_is_deterministic_and_batch_consistent() {
    let p = randomized(&cfg(16, 4, 2, 16, 2), 38, 0.2);
    let mut rng = Rng::new(39);
    let hs: Vec<ComplexVector> = (0..3).map(|_| rand_h(&mut rng, 16)).collect();
    let a = forward_batch(&hs, &p).unwrap();
    let b = forward_batch(&hs, &p).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, hs);
    let single = forward(&hs[2], &p).unwrap();
    assert!(single.sub(&a[2]).unwrap().norm_inf() < 1e-12);
}

fn e2e_loss(g: &mut Graph, b: &Bound, grid: &Tensor, target: &Tensor) -> Result<Var> {
    let x = g.constant(grid.clone());
    let y = forward_graph(g, b, x)?;
    let t = g.constant(target.clone());
    let d = g.sub(y, t)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 0.5))
}

#[test]
fn end_to_end_mse_gradients() {
    let c = cfg(16, 4, 2, 16, 2);
    let p = randomized(&c, 40, 0.3);
    let mut rng = Rng::new(41);
    let grid = randn(&mut rng, &[2, 4, 4, 2]);
    let target = randn(&mut rng, &[2, 4, 4, 2]);
    // Key biases shift every score of a row equally, so their gradient is
    // exactly zero; they are checked separately below.
    let inputs: Vec<(Tensor, bool)> = p.params().iter().map(|q| (q.tensor.clone(), !q.name.ends_with("attn.b_qkv"))).collect();
    let r = grad_check(|g, v| e2e_loss(g, &p.bind_vars(v.to_vec())?, &grid, &target), &inputs, 1e-5, 3, 42).unwrap();
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
    assert!(r.checked > 100);

    let mut g = Graph::new();
    let b = p.bind(&mut g, true);
    let loss = e2e_loss(&mut g, &b, &grid, &target).unwrap();
    g.backward(loss).unwrap();
    let eval = |p: &ModelParams| {
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let l = e2e_loss(&mut g, &b, &grid, &target).unwrap();
        g.value(l).item()
    };
    for k in 1..=2 {
        let name = format!("backbone.layer{k}.attn.b_qkv");
        let analytic = g.grad(b.var(&name).unwrap()).unwrap();
        for j in 0..48 {
            let mut q = p.clone();
            q.get_mut(&name).unwrap().tensor.data_mut()[j] += 1e-5;
            let fp = eval(&q);
            q.get_mut(&name).unwrap().tensor.data_mut()[j] -= 2e-5;
            let fm = eval(&q);
            let (a, n) = (analytic.data()[j], (fp - fm) / 2e-5);
            if (16..32).contains(&j) {
                assert!(a.abs() < 1e-10 && n.abs() < 1e-5, "{name}[{j}]: {a} {n}");
            } else {
                assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-8) <= 1e-4, "{name}[{j}]: {a} {n}");
            }
        }
    }
}

#[test]
fn freeze_partition_follows_layer_index() {
    let c = ModelConfig { n_layers: 12, n_tuned: 2, ..cfg(16, 4, 2, 16, 12) };
    let mut p = ModelParams::init(&c, 43).unwrap();
    for q in p.params_mut() {
        q.trainable = true;
    }
    freeze_partition(&mut p);
    for q in p.params() {
        let frozen = (1..=10).any(|k| q.name.starts_with(&format!("backbone.layer{k}.")));
        assert_eq!(q.trainable, !frozen, "{}", q.name);
    }
    assert!(p.get("backbone.layer11.attn.w_qkv").unwrap().trainable);
    assert!(p.get("backbone.layer1.ln1.gamma").map(|q| !q.trainable).unwrap());
    assert!(p.get("backbone.ln_f.gamma").unwrap().trainable && p.get("pos_embed").unwrap().trainable);

    let p2 = ModelParams::init(&cfg(16, 4, 2, 16, 2), 44).unwrap();
    assert!(p2.params().iter().all(|q| q.trainable));
    assert_eq!(param_count(&p2).frozen, 0);
}

/// Hand-derived parameter count, written out independently of `layout`.
fn closed_form(m: usize, f: usize, i: usize, d: usize, n_layers: usize, n_tuned: usize, ds: usize) -> (usize, usize) {
    let block = 4 * i * f * f + 4 * i * m * ds + (2 * f * f + f) + 4 * f + (f * 4 * f + 4 * f + 4 * f * f + f);
    let layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
    let pre = 9 * 2 * f + f;
    let post = (d * f + f) + (9 * f * 64 + 64) + (9 * 64 * 64 + 64) + (9 * 64 * 2 + 2);
    let trainable = pre + 2 * block + (f * d + d) + m * d + n_tuned * layer + 2 * d + post;
    (trainable, (n_layers - n_tuned) * layer)
}

#[test]
fn param_count_matches_closed_form() {
    let c = ModelConfig { n_layers: 4, n_tuned: 2, ..cfg(16, 8, 2, 32, 4) };
    let p = ModelParams::init(&c, 45).unwrap();
    let r = param_count(&p);
    assert_eq!((r.trainable, r.frozen), closed_form(16, 8, 2, 32, 4, 2, 16));
    assert_eq!(r.total(), p.params().iter().map(|q| q.tensor.numel()).sum::<usize>());
    assert_eq!(r, ParamReport::for_config(&c).unwrap());
    assert_eq!(r.frozen_backbone_layers, r.frozen);
    assert_eq!(backbone_layer_params(32), closed_form(16, 8, 2, 32, 1, 0, 16).1);
}

#[test]
fn full_scale_counts() {
    let c = ModelConfig::full_scale();
    let r = ParamReport::for_config(&c).unwrap();
    assert_eq!((r.trainable, r.frozen), closed_form(256, 64, 4, 768, 12, 2, 256));
    assert_eq!(r.frozen_backbone_layers, 10 * 7_087_872);
    assert!((r.frozen_backbone_layers as f64 / 70.9e6 - 1.0).abs() < 0.02);
    assert!((r.frozen_incl_token_table() as f64 / 109e6 - 1.0).abs() < 0.01);
    assert!((r.trainable as f64 / 17e6 - 1.0).abs() < 0.02);
}

#[test]
fn weights_round_trip() {
    let c = cfg(16, 4, 2, 16, 3);
    let p = randomized(&c, 46, 1.0);
    let mut buf = Vec::new();
    write_weights(&p, &mut buf).unwrap();
    assert!(buf.starts_with(b"XCEW1\n"));
    let q = read_weights(&buf[..], &c).unwrap();
    for (a, b) in p.params().iter().zip(q.params()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.trainable, b.trainable);
        assert!(a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.xcew");
    save_weights(&p, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), buf);
    assert_eq!(load_weights(&path, &c).unwrap().params()[3].tensor, p.params()[3].tensor);
}

#[test]
fn weights_rejects_bad_files() {
    let c = cfg(16, 4, 2, 16, 1);
    let p = ModelParams::init(&c, 47).unwrap();
    let mut buf = Vec::new();
    write_weights(&p, &mut buf).unwrap();

    assert!(read_weights(&buf[..buf.len() - 3], &c).is_err());
    assert!(read_weights(&b"XCEW2\n{}\n"[..], &c).is_err());
    let mut extra = buf.clone();
    extra.push(0);
    assert!(read_weights(&extra[..], &c).is_err());

    let err = read_weights(&buf[..], &ModelConfig { f: 8, ..c.clone() }).unwrap_err().to_string();
    assert!(err.contains("pre.conv.k"), "{err}");

    let nl = 6 + buf[6..].iter().position(|&b| b == b'\n').unwrap();
    let manifest = std::str::from_utf8(&buf[6..nl]).unwrap().replacen("\"pos_embed\"", "\"pos_embedding\"", 1);
    let renamed = [&buf[..6], manifest.as_bytes(), &buf[nl..]].concat();
    let err = read_weights(&renamed[..], &c).unwrap_err().to_string();
    assert!(err.contains("pos_embed"), "{err}");

    let deeper = ModelConfig { n_layers: 2, n_tuned: 1, ..c.clone() };
    let err = read_weights(&buf[..], &deeper).unwrap_err().to_string();
    assert!(err.contains("backbone.layer2"), "{err}");
}

