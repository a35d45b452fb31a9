use super::*;
use crate::error::Result;
use crate::numerics::Rng;

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.standard_normal())
}

/// `Σ y ⊙ w` for a fixed random `w`: a well-scaled scalar probe.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed);
    let w = g.constant(randn(&mut rng, g.shape(y)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_identity_and_ones() {
    let mut g = Graph::new();
    let mut rng = Rng::new(1);
    let x = randn(&mut rng, &[3, 4]);
    let eye = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let xv = g.constant(x.clone());
    let y = g.matmul(eye, xv).unwrap();
    assert_eq!(g.value(y), &x);

    let a = g.constant(Tensor::full(&[2, 3], 1.0));
    let b = g.constant(Tensor::full(&[3, 2], 1.0));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0; 4]);
}

#[test]
fn matmul_shape_error_names_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn matmul_gradients() {
    let mut rng = Rng::new(2);
    let inputs = [(randn(&mut rng, &[4, 5]), true), (randn(&mut rng, &[5, 6]), true)];
    let r = grad_check(|g, v| { let y = g.matmul(v[0], v[1])?; probe(g, y, 3) }, &inputs, 1e-5, 40, 4).unwrap();
    assert!(r.max_rel_error <= 1e-5, "{r:?}");

    // shared weight over a batch, and fully batched operands
    let inputs = [(randn(&mut rng, &[3, 4, 5]), true), (randn(&mut rng, &[5, 2]), true)];
    let r = grad_check(|g, v| { let y = g.matmul(v[0], v[1])?; probe(g, y, 5) }, &inputs, 1e-5, 40, 6).unwrap();
    assert!(r.max_rel_error <= 1e-5, "{r:?}");
    let inputs = [(randn(&mut rng, &[3, 4, 5]), true), (randn(&mut rng, &[3, 5, 2]), true)];
    let r = grad_check(|g, v| { let y = g.matmul(v[0], v[1])?; probe(g, y, 7) }, &inputs, 1e-5, 40, 8).unwrap();
    assert!(r.max_rel_error <= 1e-5, "{r:?}");
}

#[test]
fn softmax_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[2, 2], vec![0.0, 0.0, 1000.0, 0.0]).unwrap());
    let y = g.softmax_rows(x, 1.0, false).unwrap();
    let v = g.value(y).data();
    assert!(close(&v[..2], &[0.5, 0.5], 1e-15));
    assert!(close(&v[2..], &[1.0, 0.0], 1e-12));
}

#[test]
fn softmax_rows_sum_to_one_and_gradients() {
    let mut rng = Rng::new(3);
    let x = randn(&mut rng, &[3, 4]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.softmax_rows(xv, 1.7, false).unwrap();
    for row in g.value(y).data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
    let r = grad_check(|g, v| { let y = g.softmax_rows(v[0], 1.7, false)?; probe(g, y, 9) }, &[(x, true)], 1e-5, 12, 1).unwrap();
    assert!(r.max_rel_error <= 1e-5, "{r:?}");
}

#[test]
fn causal_softmax_masks_future() {
    let mut rng = Rng::new(4);
    let x = randn(&mut rng, &[2, 5, 5]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.softmax_rows(xv, 1.0, true).unwrap();
    let v = g.value(y).data();
    for b in 0..2 {
        for i in 0..5 {
            let row = &v[(b * 5 + i) * 5..(b * 5 + i + 1) * 5];
            assert!(row[i + 1..].iter().all(|&w| w == 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
    let r = grad_check(|g, v| { let y = g.softmax_rows(v[0], 1.0, true)?; probe(g, y, 2) }, &[(x, true)], 1e-5, 50, 3).unwrap();
    assert!(r.max_rel_error <= 1e-5, "{r:?}");
}

fn ln_params(g: &mut Graph, d: usize) -> (Var, Var) {
    (g.constant(Tensor::full(&[d], 1.0)), g.constant(Tensor::zeros(&[d])))
}

#[test]
fn layer_norm_values() {
    let mut g = Graph::new();
    let (gamma, beta) = ln_params(&mut g, 2);
    let x = g.constant(Tensor::new(&[2, 2], vec![3.0, 3.0, 1.0, -1.0]).unwrap());
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    let v = g.value(y).data();
    assert!(close(&v[..2], &[0.0, 0.0], 1e-12));
    assert!(close(&v[2..], &[1.0, -1.0], 1e-5));
}

#[test]
fn layer_norm_standardises() {
    let mut rng = Rng::new(5);
    let mut g = Graph::new();
    let (gamma, beta) = ln_params(&mut g, 16);
    let x = g.constant(Tensor::from_fn(&[10, 16], |_| 3.0 + 5.0 * rng.standard_normal()));
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    for row in g.value(y).data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() <= 1e-6);
        assert!((var - 1.0).abs() <= 1e-3);
    }
}

#[test]
fn layer_norm_gradients() {
    let mut rng = Rng::new(6);
    let inputs = [(randn(&mut rng, &[4, 6]), true), (randn(&mut rng, &[6]), true), (randn(&mut rng, &[6]), true)];
    let r = grad_check(|g, v| { let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?; probe(g, y, 4) }, &inputs, 1e-5, 30, 5).unwrap();
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
}

#[test]
fn layer_norm_shape_error() {
    let mut g = Graph::new();
    let (gamma, beta) = ln_params(&mut g, 3);
    let x = g.constant(Tensor::zeros(&[2, 4]));
    assert!(g.layer_norm(x, gamma, beta, 1e-5).is_err());
}

fn kernel(cin: usize, cout: usize, f: impl Fn(usize, usize, usize, usize) -> f64) -> Tensor {
    let mut t = Tensor::zeros(&[3, 3, cin, cout]);
    for ky in 0..3 {
        for kx in 0..3 {
            for ci in 0..cin {
                for co in 0..cout {
                    t.data_mut()[((ky * 3 + kx) * cin + ci) * cout + co] = f(ky, kx, ci, co);
                }
            }
        }
    }
    t
}

#[test]
fn conv_identity_and_bias() {
    let mut rng = Rng::new(7);
    let x = randn(&mut rng, &[5, 4, 1]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let k = g.constant(kernel(1, 1, |ky, kx, _, _| if ky == 1 && kx == 1 { 1.0 } else { 0.0 }));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(xv, k, b).unwrap();
    assert_eq!(g.value(y).data(), x.data());

    let k0 = g.constant(Tensor::zeros(&[3, 3, 1, 2]));
    let bc = g.constant(Tensor::new(&[2], vec![0.7, 0.7]).unwrap());
    let y = g.conv2d(xv, k0, bc).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.7));
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = Rng::new(8);
    let x = randn(&mut rng, &[4, 5, 2]);
    let k = randn(&mut rng, &[3, 3, 2, 3]);
    let b = randn(&mut rng, &[3]);
    let mut g = Graph::new();
    let (xv, kv, bv) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(b.clone()));
    let y = g.conv2d(xv, kv, bv).unwrap();
    let out = g.value(y).data();
    for yy in 0..4 {
        for xx in 0..5 {
            for co in 0..3 {
                let mut s = b.data()[co];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (yy as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                        if !(0..4).contains(&sy) || !(0..5).contains(&sx) {
                            continue;
                        }
                        for ci in 0..2 {
                            s += x.data()[((sy as usize) * 5 + sx as usize) * 2 + ci] * k.data()[((ky * 3 + kx) * 2 + ci) * 3 + co];
                        }
                    }
                }
                assert!((out[(yy * 5 + xx) * 3 + co] - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv_gradients() {
    let mut rng = Rng::new(9);
    let inputs = [(randn(&mut rng, &[6, 6, 2]), true), (randn(&mut rng, &[3, 3, 2, 3]), true), (randn(&mut rng, &[3]), true)];
    let r = grad_check(|g, v| { let y = g.conv2d(v[0], v[1], v[2])?; probe(g, y, 6) }, &inputs, 1e-5, 30, 7).unwrap();
    assert!(r.max_rel_error <= 1e-4, "{r:?}");

    let inputs = [(randn(&mut rng, &[2, 4, 4, 2]), true), (randn(&mut rng, &[3, 3, 2, 2]), true), (randn(&mut rng, &[2]), true)];
    let r = grad_check(|g, v| { let y = g.conv2d(v[0], v[1], v[2])?; probe(g, y, 8) }, &inputs, 1e-5, 30, 9).unwrap();
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
}

#[test]
fn conv_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[4, 4, 2]));
    let k = g.constant(Tensor::zeros(&[3, 3, 3, 1]));
    let b = g.constant(Tensor::zeros(&[1]));
    assert!(g.conv2d(x, k, b).is_err());
}

#[test]
fn gelu_values_and_gradient() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[2], vec![0.0, 10.0]).unwrap());
    let y = g.gelu(x);
    assert_eq!(g.value(y).data()[0], 0.0);
    assert!((g.value(y).data()[1] - 10.0).abs() <= 1e-9);

    let mut rng = Rng::new(10);
    let r = grad_check(|g, v| { let y = g.gelu(v[0]); probe(g, y, 1) }, &[(randn(&mut rng, &[20]), true)], 1e-5, 20, 2).unwrap();
    assert!(r.max_rel_error <= 1e-6, "{r:?}");
}

#[test]
fn structural_op_gradients() {
    let mut rng = Rng::new(11);
    let inputs = [(randn(&mut rng, &[2, 3, 4]), true), (randn(&mut rng, &[2, 3, 2]), true), (randn(&mut rng, &[4]), true)];
    let r = grad_check(
        |g, v| {
            let t = g.transpose(v[0])?;
            let t = g.transpose(t)?;
            let c = g.concat_last(&[t, v[1]])?;
            let s = g.slice_last(c, 1, 4)?;
            let s = g.add_broadcast(s, v[2])?;
            let s = g.reshape(s, &[6, 4])?;
            let s2 = g.scale(s, -0.5);
            let m = g.mul(s, s2)?;
            let d = g.sub(m, s)?;
            probe(g, d, 3)
        },
        &inputs,
        1e-5,
        30,
        4,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-6, "{r:?}");
}

#[test]
fn backward_accumulates() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[2, 3], 0.3), true);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[2, 3], 0.3), true);
    let xx = g.add(x, x).unwrap();
    let s = g.sum(xx);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0; 6]);
}

#[test]
fn backward_needs_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[2], 1.0), true);
    assert!(g.backward(x).is_err());
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[2, 2], 1.0), true);
    let w = g.leaf(Tensor::full(&[2, 2], 2.0), false);
    let y = g.matmul(x, w).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(x).is_some());
    assert!(g.grad(w).is_none());
}

#[test]
fn grad_check_reference_cases() {
    let sum_sq = |g: &mut Graph, v: &[Var]| {
        let p = g.mul(v[0], v[0])?;
        Ok(g.sum(p))
    };
    let r = grad_check(sum_sq, &[(Tensor::full(&[3, 3], 1.0), true)], 1e-5, 9, 0).unwrap();
    assert!(r.max_rel_error <= 1e-8, "{r:?}");
    assert_eq!(r.checked, 9);

    let mut rng = Rng::new(12);
    let chain = |g: &mut Graph, v: &[Var]| {
        let a = g.matmul(v[0], v[1])?;
        let b = g.matmul(a, v[2])?;
        probe(g, b, 5)
    };
    let inputs = [(randn(&mut rng, &[3, 4]), true), (randn(&mut rng, &[4, 5]), false), (randn(&mut rng, &[5, 2]), true)];
    let r = grad_check(chain, &inputs, 1e-5, 20, 1).unwrap();
    assert!(r.max_rel_error <= 1e-5, "{r:?}");
    assert_eq!(r.skipped, vec![1]);
}

#[test]
fn fourth_order_stencil_is_exact_on_cubic() {
    let cube = |g: &mut Graph, v: &[Var]| {
        let sq = g.mul(v[0], v[0])?;
        let c = g.mul(sq, v[0])?;
        Ok(g.sum(c))
    };
    let x = [(Tensor::full(&[4], 2.0), true)];
    // two-point error on x³ is exactly h²
    let plain = grad_check_with(cube, &x, CheckOptions::central(1e-2), 4, 0).unwrap();
    assert!((plain.max_rel_error - 1e-4 / (12.0 + 1e-4)).abs() < 1e-9, "{plain:?}");
    assert_eq!(plain.worst.unwrap().analytic, 12.0);
    let fourth = grad_check_with(cube, &x, CheckOptions { h: 1e-2, fourth_order: true, floor: 1e-8 }, 4, 0).unwrap();
    assert!(fourth.max_rel_error < 1e-11, "{fourth:?}");
    assert!(grad_check_with(cube, &x, CheckOptions { h: 0.0, fourth_order: true, floor: 0.0 }, 4, 0).is_err());
}

/// Per-head loops over plain arrays.
fn naive_mha(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, wo: &Tensor, heads: usize, dk: usize, causal: bool) -> Vec<f64> {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let dout = wo.shape()[1];
    let proj = |w: &Tensor, row: usize, col: usize| (0..d).map(|c| x.data()[row * d + c] * w.data()[c * heads * dk + col]).sum::<f64>();
    let mut concat = vec![0.0; t * heads * dk];
    for h in 0..heads {
        for i in 0..t {
            let mut scores = vec![f64::NEG_INFINITY; t];
            for j in 0..t {
                if causal && j > i {
                    continue;
                }
                scores[j] = (0..dk).map(|c| proj(wq, i, h * dk + c) * proj(wk, j, h * dk + c)).sum::<f64>() / (dk as f64).sqrt();
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| if s.is_finite() { (s - mx).exp() } else { 0.0 }).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dk {
                concat[i * heads * dk + h * dk + c] = (0..t).map(|j| e[j] / z * proj(wv, j, h * dk + c)).sum();
            }
        }
    }
    let mut out = vec![0.0; t * dout];
    for i in 0..t {
        for o in 0..dout {
            out[i * dout + o] = (0..heads * dk).map(|c| concat[i * heads * dk + c] * wo.data()[c * dout + o]).sum();
        }
    }
    out
}

fn mha_graph(g: &mut Graph, v: &[Var], heads: usize, dk: usize, causal: bool) -> Result<Var> {
    let w = AttentionWeights { wq: v[1], wk: v[2], wv: v[3], wo: v[4] };
    multi_head_attention(g, v[0], v[0], &w, heads, dk, causal)
}

#[test]
fn attention_matches_naive_oracle() {
    let mut rng = Rng::new(13);
    let (t, d, heads, dk) = (5, 8, 2, 4);
    let ts = [
        randn(&mut rng, &[t, d]),
        randn(&mut rng, &[d, heads * dk]),
        randn(&mut rng, &[d, heads * dk]),
        randn(&mut rng, &[d, heads * dk]),
        randn(&mut rng, &[heads * dk, d]),
    ];
    for causal in [false, true] {
        let mut g = Graph::new();
        let v: Vec<Var> = ts.iter().map(|x| g.constant(x.clone())).collect();
        let y = mha_graph(&mut g, &v, heads, dk, causal).unwrap();
        let oracle = naive_mha(&ts[0], &ts[1], &ts[2], &ts[3], &ts[4], heads, dk, causal);
        assert!(close(g.value(y).data(), &oracle, 1e-10));
    }
    let inputs: Vec<(Tensor, bool)> = ts.iter().map(|x| (x.clone(), true)).collect();
    let r = grad_check(|g, v| { let y = mha_graph(g, v, heads, dk, false)?; probe(g, y, 3) }, &inputs, 1e-5, 20, 2).unwrap();
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
}

#[test]
fn zero_query_key_weights_average_values() {
    let mut rng = Rng::new(14);
    let (t, d) = (4, 3);
    let x = randn(&mut rng, &[t, d]);
    let eye = Tensor::from_fn(&[d, d], |i| if i % (d + 1) == 0 { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let z = g.constant(Tensor::zeros(&[d, d]));
    let e1 = g.constant(eye.clone());
    let e2 = g.constant(eye);
    let w = AttentionWeights { wq: z, wk: z, wv: e1, wo: e2 };
    let y = multi_head_attention(&mut g, xv, xv, &w, 1, d, false).unwrap();
    for c in 0..d {
        let mean = (0..t).map(|r| x.data()[r * d + c]).sum::<f64>() / t as f64;
        for r in 0..t {
            assert!((g.value(y).data()[r * d + c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn single_token_attention_is_value_path() {
    let mut rng = Rng::new(15);
    let ts = [randn(&mut rng, &[1, 4]), randn(&mut rng, &[4, 6]), randn(&mut rng, &[4, 6]), randn(&mut rng, &[4, 6]), randn(&mut rng, &[6, 4])];
    let mut g = Graph::new();
    let v: Vec<Var> = ts.iter().map(|x| g.constant(x.clone())).collect();
    let y = mha_graph(&mut g, &v, 2, 3, true).unwrap();
    let xv = g.matmul(v[0], v[3]).unwrap();
    let expect = g.matmul(xv, v[4]).unwrap();
    assert!(close(g.value(y).data(), g.value(expect).data(), 1e-12));
}
