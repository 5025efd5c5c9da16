//! Forward pass with a recorded tape, and the matching reverse pass.

use super::ops::{
    add_col_sums, add_row_bias, gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, positional, View, ViewMut,
};
use super::{ModelError, ModelState};
use crate::tokenizer::TokenId;

struct LnTape {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct BlockTape {
    ln1: LnTape,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads × T × T`, zero above the diagonal.
    probs: Vec<f64>,
    o: Vec<f64>,
    ln2: LnTape,
    c: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

/// Activations recorded by [`ModelState::forward`], consumed by
/// [`ModelState::backward`].
pub struct Tape {
    ids: Vec<TokenId>,
    blocks: Vec<BlockTape>,
    lnf: LnTape,
    f: Vec<f64>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl ModelState {
    /// Logits (`T × vocab`, row-major) for every position, plus the tape.
    pub fn forward(&self, ids: &[TokenId]) -> Result<(Vec<f64>, Tape), ModelError> {
        self.check_ids(ids)?;
        let cfg = self.config();
        let lay = self.layout();
        let p = self.params();
        let (t, d, ff, v, nh, dh) = (ids.len(), cfg.d_model, cfg.d_ff(), cfg.vocab, cfg.n_heads, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = vec![0.0; t * d];
        for (pos, &id) in ids.iter().enumerate() {
            let row = &mut x[pos * d..(pos + 1) * d];
            positional(pos, row);
            let emb = &p[lay.tok_emb + id as usize * d..lay.tok_emb + (id as usize + 1) * d];
            for (r, e) in row.iter_mut().zip(emb) {
                *r += e;
            }
        }

        let w = |off: usize, len: usize| &p[off..off + len];
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for b in &lay.blocks {
            let (a, xhat1, rstd1) = layer_norm(&x, d, w(b.ln1_g, d), w(b.ln1_b, d));
            let mut q = vec![0.0; t * d];
            let mut k = vec![0.0; t * d];
            let mut vv = vec![0.0; t * d];
            gemm(View::new(&a, t, d), View::new(w(b.wq, d * d), d, d), 0.0, ViewMut::new(&mut q, t, d));
            gemm(View::new(&a, t, d), View::new(w(b.wk, d * d), d, d), 0.0, ViewMut::new(&mut k, t, d));
            gemm(View::new(&a, t, d), View::new(w(b.wv, d * d), d, d), 0.0, ViewMut::new(&mut vv, t, d));

            let mut probs = vec![0.0; nh * t * t];
            let mut o = vec![0.0; t * d];
            for h in 0..nh {
                let pr = &mut probs[h * t * t..(h + 1) * t * t];
                gemm(
                    View::cols_of(&q, t, d, h * dh, dh),
                    View::cols_of(&k, t, d, h * dh, dh).t(),
                    0.0,
                    ViewMut::new(pr, t, t),
                );
                for i in 0..t {
                    let row = &mut pr[i * t..(i + 1) * t];
                    let max = row[..=i].iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s * scale));
                    let mut sum = 0.0;
                    for s in &mut row[..=i] {
                        *s = (*s * scale - max).exp();
                        sum += *s;
                    }
                    for s in &mut row[..=i] {
                        *s /= sum;
                    }
                    row[i + 1..].fill(0.0);
                }
                gemm(
                    View::new(pr, t, t),
                    View::cols_of(&vv, t, d, h * dh, dh),
                    0.0,
                    ViewMut::cols_of(&mut o, t, d, h * dh, dh),
                );
            }
            gemm(View::new(&o, t, d), View::new(w(b.wo, d * d), d, d), 1.0, ViewMut::new(&mut x, t, d));

            let (c, xhat2, rstd2) = layer_norm(&x, d, w(b.ln2_g, d), w(b.ln2_b, d));
            let mut u = vec![0.0; t * ff];
            gemm(View::new(&c, t, d), View::new(w(b.w1, d * ff), d, ff), 0.0, ViewMut::new(&mut u, t, ff));
            add_row_bias(&mut u, w(b.b1, ff));
            let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            gemm(View::new(&g, t, ff), View::new(w(b.w2, ff * d), ff, d), 1.0, ViewMut::new(&mut x, t, d));
            add_row_bias(&mut x, w(b.b2, d));

            blocks.push(BlockTape {
                ln1: LnTape { xhat: xhat1, rstd: rstd1 },
                a,
                q,
                k,
                v: vv,
                probs,
                o,
                ln2: LnTape { xhat: xhat2, rstd: rstd2 },
                c,
                u,
                g,
            });
        }

        let (f, xhatf, rstdf) = layer_norm(&x, d, w(lay.lnf_g, d), w(lay.lnf_b, d));
        let mut logits = vec![0.0; t * v];
        gemm(View::new(&f, t, d), View::new(w(lay.head_w, d * v), d, v), 0.0, ViewMut::new(&mut logits, t, v));
        add_row_bias(&mut logits, w(lay.head_b, v));

        let tape = Tape { ids: ids.to_vec(), blocks, lnf: LnTape { xhat: xhatf, rstd: rstdf }, f };
        Ok((logits, tape))
    }

    /// Logits only.
    pub fn logits(&self, ids: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        self.forward(ids).map(|(logits, _)| logits)
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient with respect to the logits. Gradients are added into
    /// `grads` (flat, same layout as the parameters).
    pub fn backward(&self, tape: &Tape, dlogits: &[f64], grads: &mut [f64]) {
        let cfg = self.config();
        let lay = self.layout();
        let p = self.params();
        let (t, d, ff, v, nh, dh) = (tape.ids.len(), cfg.d_model, cfg.d_ff(), cfg.vocab, cfg.n_heads, cfg.head_dim());
        assert_eq!(dlogits.len(), t * v, "dlogits shape");
        assert_eq!(grads.len(), p.len(), "gradient buffer shape");
        let scale = 1.0 / (dh as f64).sqrt();
        let w = |off: usize, len: usize| &p[off..off + len];

        // Output head.
        {
            let (gw, rest) = grads[lay.head_w..].split_at_mut(d * v);
            gemm(View::new(&tape.f, t, d).t(), View::new(dlogits, t, v), 1.0, ViewMut::new(gw, d, v));
            let gb_off = lay.head_b - lay.head_w - d * v;
            add_col_sums(dlogits, v, &mut rest[gb_off..gb_off + v]);
        }
        let mut df = vec![0.0; t * d];
        gemm(View::new(dlogits, t, v), View::new(w(lay.head_w, d * v), d, v).t(), 0.0, ViewMut::new(&mut df, t, d));

        let mut dx = vec![0.0; t * d];
        {
            let (dg, db) = two_slices(grads, lay.lnf_g, lay.lnf_b, d);
            layer_norm_backward(&df, &tape.lnf.xhat, &tape.lnf.rstd, w(lay.lnf_g, d), dg, db, &mut dx);
        }

        for (b, bt) in lay.blocks.iter().zip(&tape.blocks).rev() {
            // MLP: x += gelu(c·W1 + b1)·W2 + b2
            add_col_sums(&dx, d, &mut grads[b.b2..b.b2 + d]);
            gemm(
                View::new(&bt.g, t, ff).t(),
                View::new(&dx, t, d),
                1.0,
                ViewMut::new(&mut grads[b.w2..b.w2 + ff * d], ff, d),
            );
            let mut du = vec![0.0; t * ff];
            gemm(View::new(&dx, t, d), View::new(w(b.w2, ff * d), ff, d).t(), 0.0, ViewMut::new(&mut du, t, ff));
            for (g, &z) in du.iter_mut().zip(&bt.u) {
                *g *= gelu_grad(z);
            }
            add_col_sums(&du, ff, &mut grads[b.b1..b.b1 + ff]);
            gemm(
                View::new(&bt.c, t, d).t(),
                View::new(&du, t, ff),
                1.0,
                ViewMut::new(&mut grads[b.w1..b.w1 + d * ff], d, ff),
            );
            let mut dc = vec![0.0; t * d];
            gemm(View::new(&du, t, ff), View::new(w(b.w1, d * ff), d, ff).t(), 0.0, ViewMut::new(&mut dc, t, d));
            {
                let (dg, db) = two_slices(grads, b.ln2_g, b.ln2_b, d);
                layer_norm_backward(&dc, &bt.ln2.xhat, &bt.ln2.rstd, w(b.ln2_g, d), dg, db, &mut dx);
            }

            // Attention: x += concat_h(softmax(q_h k_hᵀ·scale) v_h)·Wo
            gemm(
                View::new(&bt.o, t, d).t(),
                View::new(&dx, t, d),
                1.0,
                ViewMut::new(&mut grads[b.wo..b.wo + d * d], d, d),
            );
            let mut d_o = vec![0.0; t * d];
            gemm(View::new(&dx, t, d), View::new(w(b.wo, d * d), d, d).t(), 0.0, ViewMut::new(&mut d_o, t, d));
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            let mut dp = vec![0.0; t * t];
            for h in 0..nh {
                let pr = &bt.probs[h * t * t..(h + 1) * t * t];
                gemm(
                    View::cols_of(&d_o, t, d, h * dh, dh),
                    View::cols_of(&bt.v, t, d, h * dh, dh).t(),
                    0.0,
                    ViewMut::new(&mut dp, t, t),
                );
                gemm(
                    View::new(pr, t, t).t(),
                    View::cols_of(&d_o, t, d, h * dh, dh),
                    0.0,
                    ViewMut::cols_of(&mut dv, t, d, h * dh, dh),
                );
                // softmax backward, folded with the score scale
                for i in 0..t {
                    let prow = &pr[i * t..(i + 1) * t];
                    let drow = &mut dp[i * t..(i + 1) * t];
                    let dot: f64 = prow[..=i].iter().zip(&drow[..=i]).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        drow[j] = prow[j] * (drow[j] - dot) * scale;
                    }
                    drow[i + 1..].fill(0.0);
                }
                gemm(
                    View::new(&dp, t, t),
                    View::cols_of(&bt.k, t, d, h * dh, dh),
                    0.0,
                    ViewMut::cols_of(&mut dq, t, d, h * dh, dh),
                );
                gemm(
                    View::new(&dp, t, t).t(),
                    View::cols_of(&bt.q, t, d, h * dh, dh),
                    0.0,
                    ViewMut::cols_of(&mut dk, t, d, h * dh, dh),
                );
            }
            let a = View::new(&bt.a, t, d).t();
            gemm(a, View::new(&dq, t, d), 1.0, ViewMut::new(&mut grads[b.wq..b.wq + d * d], d, d));
            gemm(a, View::new(&dk, t, d), 1.0, ViewMut::new(&mut grads[b.wk..b.wk + d * d], d, d));
            gemm(a, View::new(&dv, t, d), 1.0, ViewMut::new(&mut grads[b.wv..b.wv + d * d], d, d));
            let mut da = vec![0.0; t * d];
            gemm(View::new(&dq, t, d), View::new(w(b.wq, d * d), d, d).t(), 0.0, ViewMut::new(&mut da, t, d));
            gemm(View::new(&dk, t, d), View::new(w(b.wk, d * d), d, d).t(), 1.0, ViewMut::new(&mut da, t, d));
            gemm(View::new(&dv, t, d), View::new(w(b.wv, d * d), d, d).t(), 1.0, ViewMut::new(&mut da, t, d));
            {
                let (dg, db) = two_slices(grads, b.ln1_g, b.ln1_b, d);
                layer_norm_backward(&da, &bt.ln1.xhat, &bt.ln1.rstd, w(b.ln1_g, d), dg, db, &mut dx);
            }
        }

        for (pos, &id) in tape.ids.iter().enumerate() {
            let off = lay.tok_emb + id as usize * d;
            for (g, dxv) in grads[off..off + d].iter_mut().zip(&dx[pos * d..(pos + 1) * d]) {
                *g += dxv;
            }
        }
    }
}

/// Two disjoint `len`-long mutable windows at `a < b`.
fn two_slices(buf: &mut [f64], a: usize, b: usize, len: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a + len <= b);
    let (lo, hi) = buf.split_at_mut(b);
    (&mut lo[a..a + len], &mut hi[..len])
}
