//! Forward pass on the tape, and conditional log-likelihoods.
//!
//! Pre-norm blocks, learned positional embeddings, causal attention, GELU
//! feed-forward, final layer norm, tied input/output embeddings. Logits at
//! position `t` predict token `t + 1`.

use crate::microworld::TokenId;
use crate::model::{BoundParams, Model, ModelConfig, ModelError, TaskSequence};
use crate::{Real, Tape, Tensor, Var};

/// Layer-norm epsilon, fixed across the lab.
pub const LN_EPS: Real = 1e-5;

/// Builds the full `[T, V]` logits computation for `tokens` on `tape`.
pub fn forward_on_tape(
    tape: &Tape,
    bound: &BoundParams<'_>,
    cfg: &ModelConfig,
    tokens: &[TokenId],
) -> Result<Var, ModelError> {
    if tokens.len() > cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    let t_len = tokens.len();
    let head_dim = cfg.head_dim();
    let scale = 1.0 / (head_dim as Real).sqrt();

    let tok = tape.embed(bound.var("tok_emb"), tokens)?;
    let pos = tape.slice_rows(bound.var("pos_emb"), 0, t_len)?;
    let mut x = tape.add(tok, pos)?;

    for l in 0..cfg.n_layers {
        let p = |suffix: &str| bound.var(&format!("l{l}.{suffix}"));

        let h = tape.layer_norm(x, p("ln1.g"), p("ln1.b"), LN_EPS)?;
        let q = tape.add_row(tape.matmul(h, p("attn.wq"))?, p("attn.bq"))?;
        let k = tape.matmul(h, p("attn.wk"))?;
        let v = tape.add_row(tape.matmul(h, p("attn.wv"))?, p("attn.bv"))?;

        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let qs = tape.slice_cols(q, head * head_dim, head_dim)?;
            let ks = tape.slice_cols(k, head * head_dim, head_dim)?;
            let vs = tape.slice_cols(v, head * head_dim, head_dim)?;
            let scores = tape.scale(tape.matmul_nt(qs, ks)?, scale);
            let masked = tape.causal_mask(scores)?;
            let probs = tape.softmax_rows(masked)?;
            heads.push(tape.matmul(probs, vs)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        let attn_out = tape.add_row(tape.matmul(ctx, p("attn.wo"))?, p("attn.bo"))?;
        x = tape.add(x, attn_out)?;

        let h2 = tape.layer_norm(x, p("ln2.g"), p("ln2.b"), LN_EPS)?;
        let f = tape.gelu(tape.add_row(tape.matmul(h2, p("ffn.w1"))?, p("ffn.b1"))?);
        let f2 = tape.add_row(tape.matmul(f, p("ffn.w2"))?, p("ffn.b2"))?;
        x = tape.add(x, f2)?;
    }

    let xf = tape.layer_norm(x, bound.var("final_ln.g"), bound.var("final_ln.b"), LN_EPS)?;
    let head = if cfg.tie_embeddings {
        bound.var("tok_emb")
    } else {
        bound.var("lm_head")
    };
    Ok(tape.matmul_nt(xf, head)?)
}

/// Convenience forward pass returning the logits as a plain tensor.
pub fn forward_logits(model: &Model, tokens: &[TokenId]) -> Result<Tensor, ModelError> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let logits = forward_on_tape(&tape, &bound, &model.config, tokens)?;
    let out = tape.value(logits).clone();
    Ok(out)
}

/// Per-token negative log-probabilities of the sequence's target tokens.
///
/// Returns the `[T-1]` cost vector (zero at condition positions) and the
/// target token count. `sum(costs) / count` is the mean teacher-forced NLL.
pub fn target_nll_on_tape(
    tape: &Tape,
    bound: &BoundParams<'_>,
    cfg: &ModelConfig,
    seq: &TaskSequence,
) -> Result<(Var, usize), ModelError> {
    if seq.target_len() == 0 {
        return Err(ModelError::EmptyTarget);
    }
    let t_len = seq.len();
    let logits = forward_on_tape(tape, bound, cfg, &seq.tokens)?;
    let pred_rows = tape.slice_rows(logits, 0, t_len - 1)?;
    // Row t predicts token t+1.
    let targets: Vec<TokenId> = seq.tokens[1..].to_vec();
    let mask: Vec<bool> = seq.target_mask[1..].to_vec();
    let count = mask.iter().filter(|&&m| m).count();
    debug_assert_eq!(count, seq.target_len());
    let ce = tape.cross_entropy_per_token(pred_rows, &targets, &mask)?;
    Ok((ce, count))
}

/// Mean log-likelihood of the target segment as a scalar tape node:
/// `(1/||Y||) * sum_t log pi(y_t | context)`, always <= 0.
pub fn avg_ll_on_tape(
    tape: &Tape,
    bound: &BoundParams<'_>,
    cfg: &ModelConfig,
    seq: &TaskSequence,
) -> Result<Var, ModelError> {
    let (ce, count) = target_nll_on_tape(tape, bound, cfg, seq)?;
    let total = tape.sum_all(ce);
    Ok(tape.scale(total, -1.0 / count as Real))
}

/// Mean log-likelihood of the target segment, as a value.
pub fn avg_log_likelihood(model: &Model, seq: &TaskSequence) -> Result<Real, ModelError> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let ll = avg_ll_on_tape(&tape, &bound, &model.config, seq)?;
    let v = tape.value(ll).data()[0];
    Ok(v)
}
