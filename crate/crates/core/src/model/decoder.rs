//! Incremental token-by-token decoding with cached keys and values.
//!
//! Ancestral sampling needs only the newest position's logits; recomputing
//! the whole prefix per token would make sampling quadratic and dominate
//! every training run on CPU. This decoder appends one position at a time.
//!
//! Every row operation reproduces the tape forward's accumulation order
//! (`mm_nn`/`mm_nt` with ascending inner index, layer-norm expression
//! order, score-then-scale), so its logits are bit-identical to the last
//! row of [`forward_on_tape`] — asserted by test, not assumed.

use crate::microworld::TokenId;
use crate::model::transformer::LN_EPS;
use crate::model::{Model, ModelError};
use crate::Real;

pub struct IncrementalDecoder<'a> {
    model: &'a Model,
    pos: usize,
    /// Per layer: cached key rows, `pos * d_model` long.
    k_cache: Vec<Vec<Real>>,
    v_cache: Vec<Vec<Real>>,
}

impl<'a> IncrementalDecoder<'a> {
    pub fn new(model: &'a Model) -> Self {
        Self {
            model,
            pos: 0,
            k_cache: vec![Vec::new(); model.config.n_layers],
            v_cache: vec![Vec::new(); model.config.n_layers],
        }
    }

    /// Number of tokens consumed so far.
    pub fn pos(&self) -> usize {
        self.pos
    }

    /// Consumes one token and returns the logits row predicting the next.
    pub fn feed(&mut self, token: TokenId) -> Result<Vec<Real>, ModelError> {
        let cfg = &self.model.config;
        if self.pos >= cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: self.pos + 1,
                max: cfg.max_seq_len,
            });
        }
        if token >= cfg.vocab_size {
            return Err(ModelError::Invalid(format!(
                "token {token} outside vocabulary of size {}",
                cfg.vocab_size
            )));
        }
        let d = cfg.d_model;
        let head_dim = cfg.head_dim();
        let scale = 1.0 / (head_dim as Real).sqrt();
        let p = |name: &str| self.model.params.get(name).expect("layout fixed").data();

        // x = tok_emb[token] + pos_emb[pos]
        let tok_emb = p("tok_emb");
        let pos_emb = p("pos_emb");
        let mut x: Vec<Real> = (0..d)
            .map(|j| tok_emb[token * d + j] + pos_emb[self.pos * d + j])
            .collect();

        for l in 0..cfg.n_layers {
            let name = |suffix: &str| format!("l{l}.{suffix}");

            let h = ln_row(&x, p(&name("ln1.g")), p(&name("ln1.b")));
            let q = affine_row(&h, p(&name("attn.wq")), p(&name("attn.bq")), d);
            let k = linear_row(&h, p(&name("attn.wk")), d);
            let v = affine_row(&h, p(&name("attn.wv")), p(&name("attn.bv")), d);
            self.k_cache[l].extend_from_slice(&k);
            self.v_cache[l].extend_from_slice(&v);

            let rows = self.pos + 1;
            let mut ctx = vec![0.0; d];
            for head in 0..cfg.n_heads {
                let off = head * head_dim;
                // Scores over all cached positions, dot first then scale,
                // matching the tape's matmul_nt + scale ordering.
                let mut scores = Vec::with_capacity(rows);
                for j in 0..rows {
                    let kj = &self.k_cache[l][j * d + off..j * d + off + head_dim];
                    let mut acc = 0.0;
                    for (a, b) in q[off..off + head_dim].iter().zip(kj) {
                        acc += a * b;
                    }
                    scores.push(acc * scale);
                }
                crate::tensor::softmax_slice(&mut scores);
                // ctx_head = sum_j probs[j] * v_j, ascending j like mm_nn.
                for (j, &prob) in scores.iter().enumerate() {
                    let vj = &self.v_cache[l][j * d + off..j * d + off + head_dim];
                    for (c, &vv) in ctx[off..off + head_dim].iter_mut().zip(vj) {
                        *c += prob * vv;
                    }
                }
            }
            let attn_out = affine_row(&ctx, p(&name("attn.wo")), p(&name("attn.bo")), d);
            for (xe, ae) in x.iter_mut().zip(&attn_out) {
                *xe += ae;
            }

            let h2 = ln_row(&x, p(&name("ln2.g")), p(&name("ln2.b")));
            let mut f = affine_row(&h2, p(&name("ffn.w1")), p(&name("ffn.b1")), cfg.d_ff);
            for fe in f.iter_mut() {
                *fe = gelu(*fe);
            }
            let f2 = affine_row(&f, p(&name("ffn.w2")), p(&name("ffn.b2")), d);
            for (xe, fe) in x.iter_mut().zip(&f2) {
                *xe += fe;
            }
        }

        let xf = ln_row(&x, p("final_ln.g"), p("final_ln.b"));
        let head_table = if cfg.tie_embeddings {
            p("tok_emb")
        } else {
            p("lm_head")
        };
        // logits[j] = xf . head_table[j], like matmul_nt.
        let logits = (0..cfg.vocab_size)
            .map(|j| {
                let row = &head_table[j * d..(j + 1) * d];
                let mut acc = 0.0;
                for (a, b) in xf.iter().zip(row) {
                    acc += a * b;
                }
                acc
            })
            .collect();

        self.pos += 1;
        Ok(logits)
    }
}

/// `x * w + b` for a single row, accumulating over the inner dimension in
/// ascending order (same as `mm_nn` with one row, then the bias add).
fn affine_row(x: &[Real], w: &[Real], b: &[Real], out_dim: usize) -> Vec<Real> {
    let mut out = linear_row(x, w, out_dim);
    for (o, &bv) in out.iter_mut().zip(b) {
        *o += bv;
    }
    out
}

fn linear_row(x: &[Real], w: &[Real], out_dim: usize) -> Vec<Real> {
    let mut out = vec![0.0; out_dim];
    for (p, &xv) in x.iter().enumerate() {
        let w_row = &w[p * out_dim..(p + 1) * out_dim];
        for (o, &wv) in out.iter_mut().zip(w_row) {
            *o += xv * wv;
        }
    }
    out
}

fn ln_row(x: &[Real], gain: &[Real], bias: &[Real]) -> Vec<Real> {
    let n = x.len();
    let inv_n = 1.0 / n as Real;
    let mean = x.iter().copied().sum::<Real>() * inv_n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<Real>() * inv_n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(gain)
        .zip(bias)
        .map(|((&v, &g), &b)| (v - mean) * inv_std * g + b)
        .collect()
}

fn gelu(x: Real) -> Real {
    let c = 0.7978845608028654; // sqrt(2/pi)
    let a = 0.044715;
    0.5 * x * (1.0 + (c * (x + a * x * x * x)).tanh())
}
