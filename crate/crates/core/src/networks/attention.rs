//! Locality self-attention and the ViT encoder block built on it.
//!
//! LSA masks the diagonal of the score matrix to -inf (no token attends to
//! itself) and replaces the fixed softmax temperature with a learnable
//! scalar τ, initialized to sqrt(head_dim).

use super::{Graph, ParamId, ParamInit};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, VarId};

/// Projection and temperature parameters of one LSA layer.
#[derive(Debug, Clone)]
pub struct LsaParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub tau: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl LsaParams {
    pub fn build(init: &mut ParamInit, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "attention: {heads} heads do not divide dim {dim}"
            )));
        }
        let head_dim = dim / heads;
        Ok(LsaParams {
            wq: init.linear_weight(&format!("{name}.q.w"), [dim, dim]),
            bq: init.zeros(&format!("{name}.q.b"), &[dim]),
            wk: init.linear_weight(&format!("{name}.k.w"), [dim, dim]),
            bk: init.zeros(&format!("{name}.k.b"), &[dim]),
            wv: init.linear_weight(&format!("{name}.v.w"), [dim, dim]),
            bv: init.zeros(&format!("{name}.v.b"), &[dim]),
            wo: init.linear_weight(&format!("{name}.out.w"), [dim, dim]),
            bo: init.zeros(&format!("{name}.out.b"), &[dim]),
            tau: init.constant(&format!("{name}.tau"), &[1], (head_dim as f32).sqrt()),
            heads,
            dim,
        })
    }
}

/// One attention pass over a single token matrix \[n_tok, dim\].
///
/// Returns the projected output and, for inspection, the per-head attention
/// weight matrices (rows sum to 1, zero diagonal).
pub fn lsa_attention<T: Scalar>(
    g: &mut Graph<T>,
    x_tokens: VarId,
    p: &LsaParams,
) -> Result<(VarId, Vec<VarId>)> {
    let shape = g.tape.shape(x_tokens).to_vec();
    let [n_tok, dim] = shape[..] else {
        return Err(Error::shape(format!(
            "lsa_attention: expected 2-d tokens, got {shape:?}"
        )));
    };
    if n_tok < 2 {
        return Err(Error::shape(format!(
            "lsa_attention: needs at least 2 tokens, got {n_tok} (a single row would be fully masked)"
        )));
    }
    if dim != p.dim {
        return Err(Error::shape(format!(
            "lsa_attention: token dim {dim} vs parameter dim {}",
            p.dim
        )));
    }
    let head_dim = dim / p.heads;

    let (wq, bq) = (g.param(p.wq), g.param(p.bq));
    let (wk, bk) = (g.param(p.wk), g.param(p.bk));
    let (wv, bv) = (g.param(p.wv), g.param(p.bv));
    let q = g.tape.linear(x_tokens, wq, bq)?;
    let k = g.tape.linear(x_tokens, wk, bk)?;
    let v = g.tape.linear(x_tokens, wv, bv)?;
    let tau = g.param(p.tau);

    let mut head_outs = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = g.tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = g.tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = g.tape.slice_cols(v, h * head_dim, head_dim)?;
        // R = q kᵀ, temperature-scaled, diagonal masked to -inf
        let scores = g.tape.matmul_tb(qh, kh)?;
        let scaled = g.tape.div_scalar_var(scores, tau)?;
        let masked = g.tape.mask_diag_neg_inf(scaled)?;
        let attn = g.tape.softmax(masked, 1)?;
        weights.push(attn);
        head_outs.push(g.tape.matmul(attn, vh)?);
    }
    let merged = g.tape.concat(&head_outs, 1)?;
    let (wo, bo) = (g.param(p.wo), g.param(p.bo));
    let out = g.tape.linear(merged, wo, bo)?;
    Ok((out, weights))
}

/// Pre-norm transformer encoder applied to the spatial positions of an NCHW
/// feature map (each position is one token; positional information comes
/// from the surrounding convolutions).
#[derive(Debug, Clone)]
pub struct VitEncoder {
    layers: Vec<VitLayer>,
}

#[derive(Debug, Clone)]
struct VitLayer {
    ln1_g: ParamId,
    ln1_b: ParamId,
    attn: LsaParams,
    ln2_g: ParamId,
    ln2_b: ParamId,
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
    mlp_b2: ParamId,
}

impl VitEncoder {
    pub fn build(
        init: &mut ParamInit,
        name: &str,
        dim: usize,
        heads: usize,
        depth: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let hidden = dim * mlp_ratio.max(1);
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let ln = format!("{name}.layer{l}");
            layers.push(VitLayer {
                ln1_g: init.ones(&format!("{ln}.ln1.g"), &[dim]),
                ln1_b: init.zeros(&format!("{ln}.ln1.b"), &[dim]),
                attn: LsaParams::build(init, &format!("{ln}.attn"), dim, heads)?,
                ln2_g: init.ones(&format!("{ln}.ln2.g"), &[dim]),
                ln2_b: init.zeros(&format!("{ln}.ln2.b"), &[dim]),
                mlp_w1: init.linear_weight(&format!("{ln}.mlp.w1"), [dim, hidden]),
                mlp_b1: init.zeros(&format!("{ln}.mlp.b1"), &[hidden]),
                mlp_w2: init.linear_weight(&format!("{ln}.mlp.w2"), [hidden, dim]),
                mlp_b2: init.zeros(&format!("{ln}.mlp.b2"), &[dim]),
            });
        }
        Ok(VitEncoder { layers })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: VarId) -> Result<VarId> {
        let [n, _c, h, w] = g.tape.shape(x)[..] else {
            return Err(Error::shape("vit encoder expects NCHW input".to_string()));
        };
        let tokens_per_sample = h * w;
        let mut tok = g.tape.nchw_to_tokens(x)?;
        for layer in &self.layers {
            // attention sublayer
            let (g1, b1) = (g.param(layer.ln1_g), g.param(layer.ln1_b));
            let normed = g.tape.layer_norm_rows(tok, g1, b1, 1e-5)?;
            let mut per_sample = Vec::with_capacity(n);
            for ni in 0..n {
                let rows = g
                    .tape
                    .slice_rows(normed, ni * tokens_per_sample, tokens_per_sample)?;
                let (out, _) = lsa_attention(g, rows, &layer.attn)?;
                per_sample.push(out);
            }
            let attn_out = g.tape.concat(&per_sample, 0)?;
            tok = g.tape.add(tok, attn_out)?;

            // mlp sublayer
            let (g2, b2) = (g.param(layer.ln2_g), g.param(layer.ln2_b));
            let normed = g.tape.layer_norm_rows(tok, g2, b2, 1e-5)?;
            let (w1, b1m) = (g.param(layer.mlp_w1), g.param(layer.mlp_b1));
            let (w2, b2m) = (g.param(layer.mlp_w2), g.param(layer.mlp_b2));
            let hdn = g.tape.linear(normed, w1, b1m)?;
            let hdn = g.tape.gelu(hdn);
            let mlp_out = g.tape.linear(hdn, w2, b2m)?;
            tok = g.tape.add(tok, mlp_out)?;
        }
        g.tape.tokens_to_nchw(tok, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::ParamStore;
    use crate::numerics::Tensor;
    use crate::rng::Stream;

    fn build_params(dim: usize, heads: usize, seed: u64) -> (ParamStore, LsaParams) {
        let mut store = ParamStore::new();
        let mut init = ParamInit::new(&mut store, seed);
        let p = LsaParams::build(&mut init, "attn", dim, heads).unwrap();
        (store, p)
    }

    #[test]
    fn two_tokens_attend_fully_to_each_other() {
        let (store, p) = build_params(4, 2, 1);
        let mut g = Graph::<f64>::new(&store, false);
        let mut stream = Stream::derive(5, &[1]);
        let x = Tensor::<f64>::randn(&[2, 4], &mut stream);
        let xid = g.input(&x);
        let (_, weights) = lsa_attention(&mut g, xid, &p).unwrap();
        for &w in &weights {
            let vals = g.tape.value(w);
            // diagonal exactly 0, off-diagonal exactly 1
            assert_eq!(vals, &[0.0, 1.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn huge_temperature_flattens_off_diagonal() {
        let (mut store, p) = build_params(8, 2, 2);
        let tau = store.by_name("attn.tau").unwrap();
        *store.get_mut(tau) = Tensor::scalar(1e9);
        let mut g = Graph::<f64>::new(&store, false);
        let mut stream = Stream::derive(6, &[1]);
        let x = Tensor::<f64>::randn(&[5, 8], &mut stream);
        let xid = g.input(&x);
        let (_, weights) = lsa_attention(&mut g, xid, &p).unwrap();
        for &w in &weights {
            for (i, row) in g.tape.value(w).chunks(5).enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    if i == j {
                        assert_eq!(v, 0.0);
                    } else {
                        assert!((v - 0.25).abs() < 1e-6, "weight {v} not uniform");
                    }
                }
            }
        }
    }

    #[test]
    fn single_token_rejected() {
        let (store, p) = build_params(4, 1, 3);
        let mut g = Graph::<f64>::new(&store, false);
        let x = Tensor::<f64>::ones(&[1, 4]);
        let xid = g.input(&x);
        assert!(lsa_attention(&mut g, xid, &p).is_err());
    }

    #[test]
    fn weights_match_dense_mask_then_softmax_oracle() {
        let (store, p) = build_params(6, 2, 7);
        let mut g = Graph::<f64>::new(&store, false);
        let mut stream = Stream::derive(8, &[2]);
        let x = Tensor::<f64>::randn(&[5, 6], &mut stream);
        let xid = g.input(&x);
        let (_, weights) = lsa_attention(&mut g, xid, &p).unwrap();

        // direct dense computation: q kᵀ / tau, diagonal -> -inf, softmax rows
        let lin = |x: &Tensor<f64>, w: &Tensor<f32>, b: &Tensor<f32>| -> Vec<f64> {
            let (m, k) = (x.shape()[0], x.shape()[1]);
            let n = w.shape()[1];
            let mut out = vec![0.0f64; m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = b.data()[j] as f64;
                    for q in 0..k {
                        acc += x.data()[i * k + q] * w.data()[q * n + j] as f64;
                    }
                    out[i * n + j] = acc;
                }
            }
            out
        };
        let qv = lin(&x, store.get(p.wq), store.get(p.bq));
        let kv = lin(&x, store.get(p.wk), store.get(p.bk));
        let tau = store.get(p.tau).data()[0] as f64;
        let head_dim = 3;
        for h in 0..2 {
            let mut expect = vec![0.0f64; 25];
            for i in 0..5 {
                for j in 0..5 {
                    if i == j {
                        expect[i * 5 + j] = f64::NEG_INFINITY;
                        continue;
                    }
                    let mut dot = 0.0;
                    for d in 0..head_dim {
                        dot += qv[i * 6 + h * head_dim + d] * kv[j * 6 + h * head_dim + d];
                    }
                    expect[i * 5 + j] = dot / tau;
                }
            }
            for i in 0..5 {
                let row = &mut expect[i * 5..(i + 1) * 5];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            let got = g.tape.value(weights[h]);
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_with_zero_diag() {
        let (store, p) = build_params(8, 4, 11);
        let mut g = Graph::<f64>::new(&store, false);
        let mut stream = Stream::derive(12, &[3]);
        let x = Tensor::<f64>::randn(&[7, 8], &mut stream);
        let xid = g.input(&x);
        let (_, weights) = lsa_attention(&mut g, xid, &p).unwrap();
        for &w in &weights {
            let vals = g.tape.value(w);
            for i in 0..7 {
                let row = &vals[i * 7..(i + 1) * 7];
                assert_eq!(row[i], 0.0, "diagonal must be exactly zero");
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn lsa_pipeline_grad_check() {
        let (store, p) = build_params(6, 2, 21);
        let mut stream = Stream::derive(22, &[0]);
        let x = Tensor::<f64>::randn(&[4, 6], &mut stream);
        let err = crate::networks::grad_check_with_params(
            &store,
            |g, xid| {
                let (out, _) = lsa_attention(g, xid, &p)?;
                let sq = g.tape.square(out);
                Ok(g.tape.mean_all(sq))
            },
            &x,
        )
        .unwrap();
        assert!(err <= 1e-4, "err = {err}");
    }

    #[test]
    fn vit_encoder_preserves_shape_and_grad_checks() {
        let mut store = ParamStore::new();
        let mut init = ParamInit::new(&mut store, 31);
        let enc = VitEncoder::build(&mut init, "vit", 4, 2, 2, 2).unwrap();
        let mut stream = Stream::derive(32, &[0]);
        let x = Tensor::<f64>::randn(&[2, 4, 3, 3], &mut stream);
        {
            let mut g = Graph::<f64>::new(&store, false);
            let xid = g.input(&x);
            let y = enc.forward(&mut g, xid).unwrap();
            assert_eq!(g.tape.shape(y), &[2, 4, 3, 3]);
        }
        let err = crate::networks::grad_check_with_params(
            &store,
            |g, xid| {
                let y = enc.forward(g, xid)?;
                let sq = g.tape.square(y);
                Ok(g.tape.mean_all(sq))
            },
            &x,
        )
        .unwrap();
        assert!(err <= 1e-4, "err = {err}");
    }
}
