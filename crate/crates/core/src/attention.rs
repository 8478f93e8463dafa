//! Attention variants: scaled dot-product attention, multi-head attention,
//! self- and cross-attention wrappers, and link attention.
//!
//! Cross-attention is permutation invariant to its key/value set, which is
//! what makes it usable as a style extractor. Link attention gives queries,
//! keys, and values three distinct sources: content tokens query a set of
//! learnable linking keys that are paired index-wise with style tokens, so
//! each content token retrieves its own mixture of styles.

use crate::optim::{Binding, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{randn, Result, TensorError};

/// Scaled dot-product attention: softmax(Q Kᵀ / sqrt(d_q)) V.
///
/// Q is [n, d_q], K is [m, d_q], V is [m, d_v]; output is [n, d_v].
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    Ok(attention_with_weights(tape, q, k, v)?.0)
}

/// Attention that also returns the post-softmax weight matrix [n, m].
pub fn attention_with_weights(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (
        tape.shape(q).to_vec(),
        tape.shape(k).to_vec(),
        tape.shape(v).to_vec(),
    );
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(TensorError::ShapeMismatch {
            op: "attention(q,k)",
            lhs: sq,
            rhs: sk,
        });
    }
    if sv.len() != 2 || sv[0] != sk[0] {
        return Err(TensorError::ShapeMismatch {
            op: "attention(k,v)",
            lhs: sk,
            rhs: sv,
        });
    }
    if sk[0] == 0 {
        return Err(TensorError::InvalidShape {
            op: "attention",
            shape: sk,
            reason: "needs at least one key/value pair".into(),
        });
    }
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.mul_scalar(logits, 1.0 / (sq[1] as f64).sqrt())?;
    let weights = tape.softmax(scaled)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Projection weights for multi-head attention.
///
/// Heads are stored as column slices of the combined projection matrices, so
/// head i uses columns [i*d/h, (i+1)*d/h).
#[derive(Debug, Clone)]
pub struct MhaParams {
    pub heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl MhaParams {
    /// Registers projections mapping queries [.., q_in] and keys/values
    /// [.., kv_in] into a d_model-wide attention, fused back by W_O.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        q_in: usize,
        kv_in: usize,
        d_model: usize,
        heads: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(TensorError::BadArgument {
                op: "MhaParams::init",
                reason: format!("heads {heads} must divide d_model {d_model}"),
            });
        }
        let wq = store.add(
            format!("{prefix}.wq"),
            randn(&[q_in, d_model], 1.0 / (q_in as f64).sqrt(), rng),
        )?;
        let wk = store.add(
            format!("{prefix}.wk"),
            randn(&[kv_in, d_model], 1.0 / (kv_in as f64).sqrt(), rng),
        )?;
        let wv = store.add(
            format!("{prefix}.wv"),
            randn(&[kv_in, d_model], 1.0 / (kv_in as f64).sqrt(), rng),
        )?;
        let wo = store.add(
            format!("{prefix}.wo"),
            randn(&[d_model, d_model], 1.0 / (d_model as f64).sqrt(), rng),
        )?;
        Ok(MhaParams { heads, wq, wk, wv, wo })
    }
}

/// Multi-head attention; returns the fused output [n, d_model].
pub fn multi_head_attention(
    tape: &mut Tape,
    b: &Binding,
    p: &MhaParams,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Var> {
    Ok(multi_head_attention_with_weights(tape, b, p, q, k, v)?.0)
}

/// Multi-head attention exposing the per-head pre-W_O attention weights,
/// each [n, m].
pub fn multi_head_attention_with_weights(
    tape: &mut Tape,
    b: &Binding,
    p: &MhaParams,
    q: Var,
    k: Var,
    v: Var,
) -> Result<(Var, Vec<Var>)> {
    let qp = tape.matmul(q, b.var(p.wq))?;
    let kp = tape.matmul(k, b.var(p.wk))?;
    let vp = tape.matmul(v, b.var(p.wv))?;
    let d_model = tape.shape(qp)[1];
    let hd = d_model / p.heads;
    let mut outs = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = tape.slice_cols(qp, h * hd, hd)?;
        let kh = tape.slice_cols(kp, h * hd, hd)?;
        let vh = tape.slice_cols(vp, h * hd, hd)?;
        let (oh, wh) = attention_with_weights(tape, qh, kh, vh)?;
        outs.push(oh);
        weights.push(wh);
    }
    let cat = tape.concat_last(&outs)?;
    let out = tape.matmul(cat, b.var(p.wo))?;
    Ok((out, weights))
}

/// Self-attention: X attends to itself.
pub fn self_attention(tape: &mut Tape, b: &Binding, p: &MhaParams, x: Var) -> Result<Var> {
    multi_head_attention(tape, b, p, x, x, x)
}

/// Cross-attention: X queries the set Y. Permutation invariant to Y's rows.
pub fn cross_attention(
    tape: &mut Tape,
    b: &Binding,
    p: &MhaParams,
    x: Var,
    y: Var,
) -> Result<Var> {
    multi_head_attention(tape, b, p, x, y, y)
}

/// Link attention: content tokens query linking keys, retrieving style
/// tokens as values. Keys and styles must be index-paired sets of equal
/// size; jointly permuting the pairs leaves the output unchanged.
pub fn link_attention(
    tape: &mut Tape,
    b: &Binding,
    p: &MhaParams,
    content: Var,
    keys: Var,
    styles: Var,
) -> Result<(Var, Vec<Var>)> {
    let (skx, ssx) = (tape.shape(keys).to_vec(), tape.shape(styles).to_vec());
    if skx[0] != ssx[0] {
        return Err(TensorError::ShapeMismatch {
            op: "link_attention(keys,styles)",
            lhs: skx,
            rhs: ssx,
        });
    }
    multi_head_attention_with_weights(tape, b, p, content, keys, styles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::tensor::{random_permutation, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_key_returns_the_value_row() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[vec![3.0, -1.0], vec![0.0, 9.0]]).unwrap());
        let k = tape.constant(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
        let v = tape.constant(Tensor::from_rows(&[vec![7.0, 8.0, 9.0]]).unwrap());
        let out = attention(&mut tape, q, k, v).unwrap();
        assert_eq!(tape.data(out), &[7.0, 8.0, 9.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn orthogonal_query_averages_values() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0, 1.0]]).unwrap());
        let k = tape.constant(
            Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![-1.0, 0.0, 0.0]])
                .unwrap(),
        );
        let v = tape.constant(
            Tensor::from_rows(&[vec![3.0], vec![6.0], vec![9.0]]).unwrap(),
        );
        let out = attention(&mut tape, q, k, v).unwrap();
        assert!((tape.data(out)[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn two_key_scalar_case_matches_oracle() {
        // Independent straight-line oracle for
        // attention([1,0], [[1,0],[0,1]], [[1],[0]]).
        let logit0 = 1.0 / 2.0_f64.sqrt();
        let e0 = logit0.exp();
        let e1 = 0.0_f64.exp();
        let expect = e0 / (e0 + e1) * 1.0 + e1 / (e0 + e1) * 0.0;

        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let k = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let v = tape.constant(Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap());
        let out = attention(&mut tape, q, k, v).unwrap();
        assert!((tape.data(out)[0] - expect).abs() < 1e-15);
        // Frozen oracle value.
        assert!((tape.data(out)[0] - 0.6697615493).abs() < 1e-9);
    }

    #[test]
    fn zero_keys_rejected() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[2, 4]));
        let k = tape.constant(Tensor::zeros(&[0, 4]));
        let v = tape.constant(Tensor::zeros(&[0, 4]));
        assert!(attention(&mut tape, q, k, v).is_err());
    }

    #[test]
    fn dim_mismatch_rejected() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[2, 4]));
        let k = tape.constant(Tensor::zeros(&[3, 5]));
        let v = tape.constant(Tensor::zeros(&[3, 5]));
        assert!(matches!(
            attention(&mut tape, q, k, v),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn heads_must_divide_dims() {
        let mut store = ParamStore::new();
        let mut r = rng(0);
        assert!(MhaParams::init(&mut store, "t", 6, 6, 6, 4, &mut r).is_err());
        assert!(MhaParams::init(&mut store, "t2", 6, 6, 6, 3, &mut r).is_ok());
    }

    #[test]
    fn single_head_identity_projections_reduce_to_attention() {
        let d = 3;
        let mut store = ParamStore::new();
        let mut r = rng(1);
        let p = MhaParams::init(&mut store, "mha", d, d, d, 1, &mut r).unwrap();
        let eye = {
            let mut t = Tensor::zeros(&[d, d]);
            for i in 0..d {
                t.data_mut()[i * d + i] = 1.0;
            }
            t
        };
        for id in [p.wq, p.wk, p.wv, p.wo] {
            store.get_mut(id).value = eye.clone();
        }
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = crate::tensor::randn(&[4, d], 1.0, &mut r);
        let y = crate::tensor::randn(&[5, d], 1.0, &mut r);
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let mha_out = multi_head_attention(&mut tape, &b, &p, xv, yv, yv).unwrap();
        let plain = attention(&mut tape, xv, yv, yv).unwrap();
        let diff = tape.value(mha_out).max_abs_diff(tape.value(plain));
        assert!(diff < 1e-14, "diff {diff}");
    }

    #[test]
    fn zero_wo_kills_output_and_routes_gradient_to_wo_only() {
        let d = 4;
        let mut store = ParamStore::new();
        let mut r = rng(2);
        let p = MhaParams::init(&mut store, "mha", d, d, d, 2, &mut r).unwrap();
        store.get_mut(p.wo).value = Tensor::zeros(&[d, d]);

        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.constant(crate::tensor::randn(&[3, d], 1.0, &mut r));
        let out = self_attention(&mut tape, &b, &p, x).unwrap();
        assert!(tape.data(out).iter().all(|&v| v == 0.0));
        let l = tape.sum_all(out).unwrap();
        tape.backward(l).unwrap();
        let gwo = tape.grad(b.var(p.wo)).unwrap();
        assert!(gwo.iter().any(|&v| v != 0.0));
        for id in [p.wq, p.wk, p.wv] {
            let g = tape.grad(b.var(id)).unwrap();
            assert!(g.iter().all(|&v| v == 0.0), "grad should be cut by zero W_O");
        }
    }

    #[test]
    fn two_heads_match_straight_line_oracle() {
        // Brute-force composition: project, split columns, run each head with
        // plain scalar loops, concatenate, fuse. No tape code on this path.
        let (n, m, d, h) = (3, 4, 6, 2);
        let mut r = rng(5);
        let mut store = ParamStore::new();
        let p = MhaParams::init(&mut store, "mha", d, d, d, h, &mut r).unwrap();
        let q = crate::tensor::randn(&[n, d], 0.8, &mut r);
        let k = crate::tensor::randn(&[m, d], 0.8, &mut r);
        let v = crate::tensor::randn(&[m, d], 0.8, &mut r);

        let matmul = |a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize| {
            let mut out = vec![0.0; rows * cols];
            for i in 0..rows {
                for p2 in 0..inner {
                    for j in 0..cols {
                        out[i * cols + j] += a[i * inner + p2] * b[p2 * cols + j];
                    }
                }
            }
            out
        };
        let qp = matmul(q.data(), store.get(p.wq).value.data(), n, d, d);
        let kp = matmul(k.data(), store.get(p.wk).value.data(), m, d, d);
        let vp = matmul(v.data(), store.get(p.wv).value.data(), m, d, d);
        let hd = d / h;
        let mut cat = vec![0.0; n * d];
        for head in 0..h {
            for i in 0..n {
                // logits over keys
                let mut logits = vec![0.0; m];
                for (j, l) in logits.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for t in 0..hd {
                        acc += qp[i * d + head * hd + t] * kp[j * d + head * hd + t];
                    }
                    *l = acc / (hd as f64).sqrt();
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
                let s: f64 = exps.iter().sum();
                for t in 0..hd {
                    let mut acc = 0.0;
                    for (j, e) in exps.iter().enumerate() {
                        acc += e / s * vp[j * d + head * hd + t];
                    }
                    cat[i * d + head * hd + t] = acc;
                }
            }
        }
        let expect = matmul(&cat, store.get(p.wo).value.data(), n, d, d);

        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let qv = tape.constant(q);
        let kv = tape.constant(k);
        let vv = tape.constant(v);
        let out = multi_head_attention(&mut tape, &b, &p, qv, kv, vv).unwrap();
        for (a, e) in tape.data(out).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_attention_is_permutation_invariant() {
        let (n, m, d) = (5, 7, 8);
        let mut r = rng(7);
        let mut store = ParamStore::new();
        let p = MhaParams::init(&mut store, "ca", d, d, d, 2, &mut r).unwrap();
        let x = crate::tensor::randn(&[n, d], 1.0, &mut r);
        let y = crate::tensor::randn(&[m, d], 1.0, &mut r);

        let base = {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let yv = tape.constant(y.clone());
            let o = cross_attention(&mut tape, &b, &p, xv, yv).unwrap();
            tape.value(o).clone()
        };
        let mut max_dev: f64 = 0.0;
        for _ in 0..100 {
            let perm = random_permutation(m, &mut r);
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let yv = tape.constant(y.permuted_rows(&perm));
            let o = cross_attention(&mut tape, &b, &p, xv, yv).unwrap();
            max_dev = max_dev.max(tape.value(o).max_abs_diff(&base));
        }
        assert!(max_dev <= 1e-9, "deviation {max_dev}");
    }

    #[test]
    fn self_attention_is_not_permutation_invariant() {
        let (n, d) = (6, 8);
        let mut r = rng(9);
        let mut store = ParamStore::new();
        let p = MhaParams::init(&mut store, "sa", d, d, d, 2, &mut r).unwrap();
        let x = crate::tensor::randn(&[n, d], 1.0, &mut r);

        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let xv = tape.constant(input.clone());
            let o = self_attention(&mut tape, &b, &p, xv).unwrap();
            tape.value(o).clone()
        };
        let base = run(&x);
        // Swap two distinct rows: per-position output must change.
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(0, n - 1);
        let swapped = run(&x.permuted_rows(&perm));
        assert!(
            swapped.max_abs_diff(&base) > 1e-6,
            "self-attention should be order sensitive per position"
        );
    }

    #[test]
    fn link_attention_pair_permutation_invariance_and_weights() {
        let (n, m, d) = (4, 6, 8);
        let mut r = rng(11);
        let mut store = ParamStore::new();
        let p = MhaParams::init(&mut store, "link", d, d, d, 2, &mut r).unwrap();
        let c = crate::tensor::randn(&[n, d], 1.0, &mut r);
        let keys = crate::tensor::randn(&[m, d], 1.0, &mut r);
        let styles = crate::tensor::randn(&[m, d], 1.0, &mut r);

        let run = |k: &Tensor, s: &Tensor| {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let cv = tape.constant(c.clone());
            let kv = tape.constant(k.clone());
            let sv = tape.constant(s.clone());
            let (o, w) = link_attention(&mut tape, &b, &p, cv, kv, sv).unwrap();
            let weights: Vec<Tensor> = w.iter().map(|&wv| tape.value(wv).clone()).collect();
            (tape.value(o).clone(), weights)
        };
        let (base, weights) = run(&keys, &styles);
        for w in &weights {
            for row in w.data().chunks_exact(m) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        for _ in 0..50 {
            let perm = random_permutation(m, &mut r);
            let (out, _) = run(&keys.permuted_rows(&perm), &styles.permuted_rows(&perm));
            assert!(out.max_abs_diff(&base) <= 1e-9);
        }

        // Mismatched pair counts must error.
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let cv = tape.constant(c.clone());
        let kv = tape.constant(keys.clone());
        let sv = tape.constant(crate::tensor::randn(&[m + 1, d], 1.0, &mut r));
        assert!(link_attention(&mut tape, &b, &p, cv, kv, sv).is_err());
    }

    #[test]
    fn single_style_token_gives_global_style() {
        let (n, d) = (5, 4);
        let mut r = rng(13);
        let mut store = ParamStore::new();
        let p = MhaParams::init(&mut store, "link", d, d, d, 2, &mut r).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let c = tape.constant(crate::tensor::randn(&[n, d], 1.0, &mut r));
        let k = tape.constant(crate::tensor::randn(&[1, d], 1.0, &mut r));
        let s = tape.constant(crate::tensor::randn(&[1, d], 1.0, &mut r));
        let (_, weights) = link_attention(&mut tape, &b, &p, c, k, s).unwrap();
        // With m = 1 every content token attends to the single style token
        // with weight exactly 1.
        for &w in &weights {
            assert!(tape.data(w).iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn attention_output_in_convex_hull_of_values() {
        let mut r = rng(17);
        for _ in 0..10 {
            let (n, m, d, dv) = (4, 6, 5, 3);
            let q = crate::tensor::randn(&[n, d], 2.0, &mut r);
            let k = crate::tensor::randn(&[m, d], 2.0, &mut r);
            let v = crate::tensor::randn(&[m, dv], 2.0, &mut r);
            let mut tape = Tape::new();
            let qv = tape.constant(q);
            let kv = tape.constant(k);
            let vv = tape.constant(v.clone());
            let out = attention(&mut tape, qv, kv, vv).unwrap();
            for c in 0..dv {
                let lo = (0..m).map(|j| v.at2(j, c)).fold(f64::INFINITY, f64::min);
                let hi = (0..m).map(|j| v.at2(j, c)).fold(f64::NEG_INFINITY, f64::max);
                for i in 0..n {
                    let o = tape.value(out).at2(i, c);
                    assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_passes_gradient_check() {
        let mut r = rng(19);
        let q = crate::tensor::randn(&[3, 4], 0.5, &mut r);
        let kv = crate::tensor::randn(&[5, 4], 0.5, &mut r);
        // Differentiate w.r.t. queries.
        let kv2 = kv.clone();
        let err = grad_check(
            move |tape, x| {
                let k = tape.constant(kv2.clone());
                let v = tape.constant(kv2.clone());
                let o = attention(tape, x, k, v)?;
                let sq = tape.mul(o, o)?;
                tape.sum_all(sq)
            },
            &q,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "dq err {err}");
        // Differentiate w.r.t. keys/values (same tensor used for both).
        let q2 = q.clone();
        let err = grad_check(
            move |tape, x| {
                let qv = tape.constant(q2.clone());
                let o = attention(tape, qv, x, x)?;
                let sq = tape.mul(o, o)?;
                tape.sum_all(sq)
            },
            &kv,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "dkv err {err}");
    }

    #[test]
    fn multi_head_attention_passes_gradient_check_through_params() {
        let (n, m, d) = (3, 4, 6);
        let mut r = rng(23);
        let mut store = ParamStore::new();
        let p = MhaParams::init(&mut store, "mha", d, d, d, 2, &mut r).unwrap();
        let x = crate::tensor::randn(&[n, d], 0.7, &mut r);
        let y = crate::tensor::randn(&[m, d], 0.7, &mut r);
        let mut coords = Vec::new();
        for id in store.ids() {
            coords.push((id, 0));
            coords.push((id, d + 1));
        }
        let err = crate::gradcheck::grad_check_params(
            &mut store,
            |tape, b| {
                let xv = tape.constant(x.clone());
                let yv = tape.constant(y.clone());
                let o = multi_head_attention(tape, b, &p, xv, yv, yv)?;
                let sq = tape.mul(o, o)?;
                tape.sum_all(sq)
            },
            &coords,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "param grad err {err}");
    }
}
