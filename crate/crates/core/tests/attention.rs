use lasernv::attention::{mha, Attention, Mask, MhaParams};
use lasernv::nn::{jitter, Builder, Init, Linear};
use lasernv_tensor::gradcheck::{max_rel_err, numerical_gradient};
use lasernv_tensor::{ParamTree, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

/// Plain-loop linear map: rows of `x` (width `l.fan_in`) through `l`.
fn linear_ref(params: &ParamTree<f64>, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = params.value(l.w).data();
    let rows = x.len() / l.fan_in;
    let mut out = vec![0.0; rows * l.fan_out];
    for r in 0..rows {
        for o in 0..l.fan_out {
            let mut acc = l.b.map_or(0.0, |b| params.value(b).data()[o]);
            for i in 0..l.fan_in {
                acc += x[r * l.fan_in + i] * w[i * l.fan_out + o];
            }
            out[r * l.fan_out + o] = acc;
        }
    }
    out
}

/// Independent multi-head attention for one batch entry.
fn mha_ref(params: &ParamTree<f64>, p: &MhaParams, q_in: &[f64], kv_in: &[f64], allow: &dyn Fn(usize, usize) -> bool) -> Vec<f64> {
    let (q, k, v) = (linear_ref(params, &p.q, q_in), linear_ref(params, &p.k, kv_in), linear_ref(params, &p.v, kv_in));
    let (d, dh) = (p.dim, p.dim / p.heads);
    let (nq, nk) = (q.len() / d, k.len() / d);
    let mut heads_out = vec![0.0; nq * d];
    for h in 0..p.heads {
        for i in 0..nq {
            let logits: Vec<Option<f64>> = (0..nk)
                .map(|j| {
                    allow(i, j).then(|| (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                })
                .collect();
            let m = logits.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| l.map_or(0.0, |l| (l - m).exp())).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                heads_out[i * d + h * dh + c] = (0..nk).map(|j| e[j] / z * v[j * d + h * dh + c]).sum();
            }
        }
    }
    linear_ref(params, &p.o, &heads_out)
}

fn build_mha(dim: usize, ctx_dim: usize, heads: usize, seed: u64) -> (MhaParams, ParamTree<f64>) {
    let mut params = ParamTree::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = MhaParams::new(&mut Builder::new(&mut params, &mut rng), "mha", dim, ctx_dim, heads, Init::Fan(1.0));
    jitter(&mut params, 0.1, &mut rng);
    (p, params.cast())
}

#[test]
fn matches_loop_oracle_with_and_without_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (b, nk, dim, ctx_dim) = (3, 5, 8, 6);
    let (p, params) = build_mha(dim, ctx_dim, 2, 1);
    for nq in [1, 4] {
        let q = gaussian(&[b, nq, dim], &mut rng);
        let kv = gaussian(&[b, nk, ctx_dim], &mut rng);
        let allow: Vec<bool> = (0..b * nq * nk).map(|i| i % nk == 0 || rng.random_bool(0.6)).collect();
        let mask = Mask::new(b, nq, nk, allow.clone()).unwrap();
        for masked in [false, true] {
            let tape = Tape::inference(&params);
            let (qv, kvv) = (tape.constant(q.clone()), tape.constant(kv.clone()));
            let out = mha(qv, kvv, kvv, masked.then_some(&mask), &p).unwrap().value();
            for e in 0..b {
                let qs = &q.data()[e * nq * dim..(e + 1) * nq * dim];
                let ks = &kv.data()[e * nk * ctx_dim..(e + 1) * nk * ctx_dim];
                let rule = |i: usize, j: usize| !masked || allow[(e * nq + i) * nk + j];
                let expect = mha_ref(&params, &p, qs, ks, &rule);
                let got = &out.data()[e * nq * dim..(e + 1) * nq * dim];
                for (g, x) in got.iter().zip(&expect) {
                    assert!((g - x).abs() < 1e-12, "nq={nq} masked={masked}: {g} vs {x}");
                }
            }
        }
    }
}

#[test]
fn masked_keys_have_no_influence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (p, params) = build_mha(8, 8, 4, 3);
    let tape = Tape::inference(&params);
    let q = tape.constant(gaussian(&[2, 3, 8], &mut rng));
    let mut kv = gaussian(&[2, 4, 8], &mut rng);
    // Key 2 of every batch entry is hidden.
    let mask = Mask::new(2, 1, 4, vec![true, true, false, true, true, true, false, true]).unwrap();
    let before = mha(q, tape.constant(kv.clone()), tape.constant(kv.clone()), Some(&mask), &p).unwrap().value();
    for e in 0..2 {
        for c in 0..8 {
            kv.data_mut()[(e * 4 + 2) * 8 + c] = 1e3;
        }
    }
    let after = mha(q, tape.constant(kv.clone()), tape.constant(kv), Some(&mask), &p).unwrap().value();
    assert!(before.max_abs_diff(&after) < 1e-12);
}

#[test]
fn single_key_returns_its_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (p, params) = build_mha(8, 6, 2, 5);
    let kv = gaussian(&[1, 1, 6], &mut rng);
    let expect = linear_ref(&params, &p.o, &linear_ref(&params, &p.v, kv.data()));
    for _ in 0..3 {
        let tape = Tape::inference(&params);
        let q = tape.constant(gaussian(&[1, 2, 8], &mut rng));
        let c = tape.constant(kv.clone());
        let out = mha(q, c, c, None, &p).unwrap().value();
        for row in out.data().chunks(8) {
            for (a, b) in row.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn mask_hiding_a_whole_row_is_rejected() {
    assert!(Mask::new(1, 2, 2, vec![true, false, false, false]).is_err());
    assert!(Mask::new(1, 2, 2, vec![true, false]).is_err());
}

fn stack(ctx: bool, seed: u64) -> (Attention, ParamTree<f64>) {
    let mut params = ParamTree::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new(&mut params, &mut rng);
    let a = if ctx { Attention::cross_attn(&mut b, "a", 8, 4, 2, 2) } else { Attention::self_attn(&mut b, "a", 8, 2, 2) };
    jitter(&mut params, 0.1, &mut rng);
    (a, params.cast())
}

#[test]
fn input_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (att, params) = stack(true, 7);
    let x = gaussian(&[1, 3, 8], &mut rng);
    let c = gaussian(&[1, 4, 4], &mut rng);
    let w = gaussian(&[1, 3, 8], &mut rng);
    let mask = Mask::new(1, 3, 4, vec![true, false, true, true, true, true, false, true, false, false, true, true]).unwrap();
    let joint: Vec<f64> = x.data().iter().chain(c.data()).cloned().collect();
    let eval = |v: &[f64], want_grad: bool| {
        let tape = Tape::with_params(&params);
        let xv = tape.var(Tensor::new(vec![1, 3, 8], v[..24].to_vec()));
        let cv = tape.var(Tensor::new(vec![1, 4, 4], v[24..].to_vec()));
        let y = att.cross_forward(xv, cv, Some(&mask)).unwrap().mul(tape.constant(w.clone())).sum();
        let value = y.item();
        let mut grad = Vec::new();
        if want_grad {
            let g = y.backward();
            grad = g.wrt(xv).unwrap().to_f64_vec();
            grad.extend(g.wrt(cv).unwrap().to_f64_vec());
        }
        (value, grad)
    };
    let tape_vals = eval(&joint, true).1;
    let numeric = numerical_gradient(&mut |v| eval(v, false).0, &joint, 1e-6);
    assert!(max_rel_err(&tape_vals, &numeric, 1e-6) < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn self_attention_is_permutation_equivariant(n in 1usize..7, seed in 0u64..500) {
        let (att, params) = stack(false, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(&[1, n, 8], &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(seed as usize % n);
        perm.swap(0, n - 1);
        let tape = Tape::inference(&params);
        let y = att.self_forward(tape.constant(x.clone())).unwrap();
        let px = tape.constant(x.reshape(vec![n, 8])).index_select(perm.clone().into()).reshape(vec![1, n, 8]);
        let py = att.self_forward(px).unwrap();
        let expect = y.reshape(vec![n, 8]).index_select(perm.into()).reshape(vec![1, n, 8]);
        prop_assert!(py.value().max_abs_diff(&expect.value()) < 1e-12);
    }

    #[test]
    fn cross_attention_ignores_context_order(n in 1usize..7, seed in 0u64..500) {
        let (att, params) = stack(true, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::inference(&params);
        let x = tape.constant(gaussian(&[1, 2, 8], &mut rng));
        let c = gaussian(&[n, 4], &mut rng);
        let mut perm: Vec<usize> = (0..n).rev().collect();
        perm.rotate_left(seed as usize % n);
        let y = att.cross_forward(x, tape.constant(c.clone().reshape(vec![1, n, 4])), None).unwrap();
        let pc = tape.constant(c).index_select(perm.into()).reshape(vec![1, n, 4]);
        let py = att.cross_forward(x, pc, None).unwrap();
        prop_assert!(py.value().max_abs_diff(&y.value()) < 1e-12);
    }
}
