//! Shared oracles: a loop-only reference forward pass, brute-force
//! log-probabilities and finite differences.

#![allow(dead_code)]

use clinforge_core::model::{ModelConfig, ModelState};
use clinforge_core::tokenizer::TokenId;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const FD_STEP: f64 = 1e-3;

/// A model with every parameter perturbed, so no path is structurally zero.
pub fn random_model(cfg: ModelConfig, seed: u64, noise: f64) -> ModelState {
    let mut m = ModelState::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let n = Normal::new(0.0, noise).unwrap();
    for p in m.params_mut() {
        *p += n.sample(&mut rng);
    }
    m
}

fn p<'a>(m: &'a ModelState, name: &str) -> &'a [f64] {
    m.param(name).unwrap_or_else(|| panic!("missing {name}"))
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().enumerate().map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j]).collect()
}

/// `x · W` for a row vector and a row-major `rows × cols` matrix.
fn vec_mat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i * cols + j];
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Straight-line forward pass: one position at a time, no shared kernels.
pub fn naive_logits(m: &ModelState, ids: &[TokenId]) -> Vec<Vec<f64>> {
    let c = *m.config();
    let (d, v, h) = (c.d_model, c.vocab, c.n_heads);
    let dh = d / h;
    let emb = p(m, "tok_emb");
    let mut xs: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            (0..d)
                .map(|j| {
                    let i = j - j % 2;
                    let angle = t as f64 / 10_000f64.powf(i as f64 / d as f64);
                    let pe = if j % 2 == 0 { angle.sin() } else { angle.cos() };
                    emb[id as usize * d + j] + pe
                })
                .collect()
        })
        .collect();
    for l in 0..c.n_layers {
        let n = |s: &str| format!("blocks.{l}.{s}");
        let a: Vec<Vec<f64>> = xs.iter().map(|x| layer_norm(x, p(m, &n("ln1.g")), p(m, &n("ln1.b")))).collect();
        let q: Vec<Vec<f64>> = a.iter().map(|r| vec_mat(r, p(m, &n("attn.wq")), d)).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|r| vec_mat(r, p(m, &n("attn.wk")), d)).collect();
        let vv: Vec<Vec<f64>> = a.iter().map(|r| vec_mat(r, p(m, &n("attn.wv")), d)).collect();
        let mut attn_out = vec![vec![0.0; d]; xs.len()];
        for t in 0..xs.len() {
            for head in 0..h {
                let r = head * dh..(head + 1) * dh;
                let scores: Vec<f64> = (0..=t)
                    .map(|s| {
                        q[t][r.clone()].iter().zip(&k[s][r.clone()]).map(|(x, y)| x * y).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for (s, sc) in scores.iter().enumerate() {
                    let w = (sc - mx).exp() / z;
                    for j in r.clone() {
                        attn_out[t][j] += w * vv[s][j];
                    }
                }
            }
        }
        for (x, o) in xs.iter_mut().zip(&attn_out) {
            for (xi, oi) in x.iter_mut().zip(vec_mat(o, p(m, &n("attn.wo")), d)) {
                *xi += oi;
            }
            let cc = layer_norm(x, p(m, &n("ln2.g")), p(m, &n("ln2.b")));
            let hidden: Vec<f64> = vec_mat(&cc, p(m, &n("mlp.w1")), 4 * d)
                .iter()
                .zip(p(m, &n("mlp.b1")))
                .map(|(u, b)| gelu(u + b))
                .collect();
            for ((xi, y), b) in x.iter_mut().zip(vec_mat(&hidden, p(m, &n("mlp.w2")), d)).zip(p(m, &n("mlp.b2"))) {
                *xi += y + b;
            }
        }
    }
    xs.iter()
        .map(|x| {
            let f = layer_norm(x, p(m, "lnf.g"), p(m, "lnf.b"));
            vec_mat(&f, p(m, "head.w"), v).iter().zip(p(m, "head.b")).map(|(a, b)| a + b).collect()
        })
        .collect()
}

/// `log P(tok | row)` by explicit enumeration of the full vocabulary.
pub fn brute_log_prob(row: &[f64], tok: TokenId) -> f64 {
    let z: f64 = row.iter().map(|l| l.exp()).sum();
    (row[tok as usize].exp() / z).ln()
}

/// Per-token log-probabilities of `target` after `prefix` under the naive
/// forward pass.
pub fn brute_sequence_logprob(m: &ModelState, prefix: &[TokenId], target: &[TokenId]) -> Vec<f64> {
    let mut ids = prefix.to_vec();
    ids.extend_from_slice(target);
    let rows = naive_logits(m, &ids[..ids.len() - 1]);
    target.iter().enumerate().map(|(i, &t)| brute_log_prob(&rows[prefix.len() - 1 + i], t)).collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

/// Central difference of `f` at parameter `i`.
pub fn central_difference(m: &ModelState, i: usize, f: impl Fn(&ModelState) -> f64) -> f64 {
    let mut plus = m.clone();
    plus.params_mut()[i] += FD_STEP;
    let mut minus = m.clone();
    minus.params_mut()[i] -= FD_STEP;
    (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
}
