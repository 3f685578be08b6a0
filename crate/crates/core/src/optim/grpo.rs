//! GRPO: group-relative advantages, clipped token-level importance
//! weighting, and a k3 KL penalty to a frozen reference policy.
//!
//! The surrogate for token `t` of candidate `i` is
//!
//! ```text
//! min(r_it * A_i, clip(r_it, 1 - eps_low, 1 + eps_high) * A_i) - beta * k3_it
//! ```
//!
//! summed over all tokens of all candidates in a group and divided by the
//! group's total target length (token-level normalization, the DAPO-style
//! aggregation with an asymmetric upper clip). The returned loss is the
//! negated objective, averaged over groups; only the policy
//! differentiates — the reference per-token log-probs enter as constants,
//! and advantages are treated as constants.

use serde::{Deserialize, Serialize};

use crate::model::{target_nll_on_tape, BoundParams, Model, ModelError, TaskSequence};
use crate::rewards::CandidateGroup;
use crate::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GRPOConfig {
    /// Lower clip threshold (ratio floor is `1 - eps_low`).
    pub eps_low: Real,
    /// Upper clip threshold (ratio ceiling is `1 + eps_high`).
    pub eps_high: Real,
    /// KL penalty coefficient toward the reference policy.
    pub kl_beta: Real,
}

impl Default for GRPOConfig {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.28,
            kl_beta: 0.04,
        }
    }
}

impl GRPOConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.eps_low > 0.0 && self.eps_low <= self.eps_high) {
            return Err(format!(
                "need 0 < eps_low <= eps_high, got {} and {}",
                self.eps_low, self.eps_high
            ));
        }
        if self.kl_beta < 0.0 {
            return Err(format!("kl_beta must be >= 0, got {}", self.kl_beta));
        }
        Ok(())
    }
}

/// Advantages below this reward spread collapse to zero.
const STD_EPS: Real = 1e-9;

/// Group-normalized advantages: `(R_i - mean) / std` with population std.
/// A spread below 1e-9 yields all zeros — a degenerate group contributes no
/// gradient rather than NaN.
pub fn grpo_advantages(rewards: &[Real]) -> Vec<Real> {
    assert!(rewards.len() >= 2, "a group needs at least 2 rewards");
    let n = rewards.len() as Real;
    let mean = rewards.iter().sum::<Real>() / n;
    let var = rewards.iter().map(|&r| (r - mean) * (r - mean)).sum::<Real>() / n;
    let std = var.sqrt();
    if std < STD_EPS {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|&r| (r - mean) / std).collect()
}

/// Per-target-token importance ratios `pi(y_t) / pi_ref(y_t)`, computed as
/// `exp(logp - logp_ref)`.
pub fn importance_ratios(
    policy: &Model,
    reference: &Model,
    seq: &TaskSequence,
) -> Result<Vec<Real>, ModelError> {
    let lp = target_logps(policy, seq)?;
    let lp_ref = target_logps(reference, seq)?;
    Ok(lp
        .iter()
        .zip(&lp_ref)
        .map(|(&a, &b)| (a - b).exp())
        .collect())
}

/// Per-target-token log-probabilities (masked positions only, in order).
fn target_logps(model: &Model, seq: &TaskSequence) -> Result<Vec<Real>, ModelError> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let (ce, _) = target_nll_on_tape(&tape, &bound, &model.config, seq)?;
    let v = tape.value(ce);
    Ok(seq.target_mask[1..]
        .iter()
        .zip(v.data())
        .filter(|(&m, _)| m)
        .map(|(_, &c)| -c)
        .collect())
}

/// Builds the GRPO loss over candidate groups on `tape`.
///
/// `ref_model` is the frozen reference: its per-token log-probs are
/// computed outside the tape and enter as constants.
pub fn grpo_loss_on_tape(
    tape: &Tape,
    bound: &BoundParams<'_>,
    policy: &Model,
    ref_model: &Model,
    groups: &[CandidateGroup],
    cfg: &GRPOConfig,
) -> Result<Var, ModelError> {
    if groups.is_empty() {
        return Err(ModelError::Invalid("grpo_loss over no groups".to_string()));
    }
    let mut group_objectives = Vec::with_capacity(groups.len());
    for group in groups {
        let advantages = grpo_advantages(&group.rewards);
        let total_target: usize = group.candidates.iter().map(TaskSequence::target_len).sum();
        let mut sum_terms: Option<Var> = None;
        for (cand, &adv) in group.candidates.iter().zip(&advantages) {
            let term = candidate_token_terms(tape, bound, policy, ref_model, cand, adv, cfg)?;
            sum_terms = Some(match sum_terms {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let sum = sum_terms.expect("group is non-empty");
        group_objectives.push(tape.scale(sum, 1.0 / total_target as Real));
    }
    // Mean objective over groups, negated into a loss.
    let mut acc = group_objectives[0];
    for &g in &group_objectives[1..] {
        acc = tape.add(acc, g)?;
    }
    Ok(tape.scale(acc, -1.0 / groups.len() as Real))
}

/// `sum_t min(r A, clip(r) A) - beta * k3_t` for one candidate, as a
/// scalar node.
fn candidate_token_terms(
    tape: &Tape,
    bound: &BoundParams<'_>,
    policy: &Model,
    ref_model: &Model,
    cand: &TaskSequence,
    advantage: Real,
    cfg: &GRPOConfig,
) -> Result<Var, ModelError> {
    // Policy per-token log-probs, differentiable: -ce at masked positions.
    let (ce, _count) = target_nll_on_tape(tape, bound, &policy.config, cand)?;
    let logp = tape.scale(ce, -1.0);

    // Reference log-probs as constants, aligned with the ce vector layout
    // ([T-1], zeros at unmasked positions).
    let ref_lp_masked = target_logps(ref_model, cand)?;
    let mut ref_full = vec![0.0; cand.len() - 1];
    let mut it = ref_lp_masked.iter();
    let shifted_mask: Vec<bool> = cand.target_mask[1..].to_vec();
    for (slot, &m) in ref_full.iter_mut().zip(&shifted_mask) {
        if m {
            *slot = *it.next().expect("one ref logp per masked position");
        }
    }
    let ref_lp = tape.constant(Tensor::new(vec![ref_full.len()], ref_full)?);

    // Importance ratios r_t = exp(logp - logp_ref). Unmasked slots hold
    // exp(0) = 1 and are neutralized by the mask filter below.
    let delta = tape.sub(logp, ref_lp)?;
    let ratios = tape.exp(delta);

    // Zero out the unmasked slots (their "ratio" of 1 must not leak into
    // the sum). A 0/1 mask constant works for every term below because
    // min(0,0) = 0 and the k3 penalty is also masked.
    let mask_vec: Vec<Real> = shifted_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let mask = tape.constant(Tensor::new(vec![mask_vec.len()], mask_vec)?);

    let unclipped = tape.scale(ratios, advantage);
    let clipped = tape.scale(
        tape.clip(ratios, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high),
        advantage,
    );
    let surrogate = tape.min(unclipped, clipped)?;

    // k3 estimator: rho - log rho - 1 with rho = pi_ref / pi = exp(-delta).
    let rho = tape.exp(tape.scale(delta, -1.0));
    let k3 = tape.add_scalar(tape.add(rho, delta)?, -1.0);

    let per_token = tape.sub(surrogate, tape.scale(k3, cfg.kl_beta))?;
    let masked_terms = tape.mul(per_token, mask)?;
    Ok(tape.sum_all(masked_terms))
}

/// GRPO loss value over groups.
pub fn grpo_loss(
    policy: &Model,
    ref_model: &Model,
    groups: &[CandidateGroup],
    cfg: &GRPOConfig,
) -> Result<Real, ModelError> {
    let tape = Tape::new();
    let bound = policy.bind(&tape);
    let loss = grpo_loss_on_tape(&tape, &bound, policy, ref_model, groups, cfg)?;
    let v = tape.value(loss).data()[0];
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microworld::{
        generate_scene, oracle_caption, render_caption, tokenize_image, Vocabulary,
    };
    use crate::model::{t2i_sequence, ModelConfig, Task};
    use crate::rewards::{sample_group, GroupInput};
    use crate::rng::rng_from;
    use rand::Rng;

    #[test]
    fn advantages_match_hand_computation() {
        let a = grpo_advantages(&[1.0, 2.0, 3.0]);
        assert!((a[0] + 1.224745).abs() < 1e-6);
        assert!(a[1].abs() < 1e-12);
        assert!((a[2] - 1.224745).abs() < 1e-6);
    }

    #[test]
    fn degenerate_group_gets_zero_advantages() {
        assert_eq!(grpo_advantages(&[-1.5, -1.5, -1.5, -1.5]), vec![0.0; 4]);
    }

    #[test]
    fn advantages_are_standardized() {
        let mut rng = rng_from(&[81]);
        for _ in 0..50 {
            let rewards: Vec<Real> = (0..8).map(|_| rng.gen_range(-5.0..0.0)).collect();
            let a = grpo_advantages(&rewards);
            let mean: Real = a.iter().sum::<Real>() / a.len() as Real;
            let var: Real = a.iter().map(|&x| (x - mean) * (x - mean)).sum::<Real>() / a.len() as Real;
            if rewards.iter().any(|&r| (r - rewards[0]).abs() > 1e-9) {
                assert!(mean.abs() < 1e-12);
                assert!((var.sqrt() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn advantages_invariant_to_positive_affine_rewards() {
        let mut rng = rng_from(&[82]);
        for _ in 0..20 {
            let rewards: Vec<Real> = (0..6).map(|_| rng.gen_range(-4.0..0.0)).collect();
            let a = grpo_advantages(&rewards);
            let scale = rng.gen_range(0.1..10.0);
            let shift = rng.gen_range(-3.0..3.0);
            let transformed: Vec<Real> = rewards.iter().map(|&r| scale * r + shift).collect();
            let b = grpo_advantages(&transformed);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9, "affine invariance broken: {x} vs {y}");
            }
        }
    }

    #[test]
    fn clip_arithmetic_spot_values() {
        // Single token, A = +1, r = 1.5, eps_high = 0.28:
        // min(1.5, 1.28) = 1.28 — the clip binds.
        let cfg = GRPOConfig::default();
        let r: Real = 1.5;
        let a: Real = 1.0;
        let clipped = r.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
        assert_eq!((r * a).min(clipped * a), 1.28);

        // A = -1, r = 0.5, eps_low = 0.2: min(-0.5, -0.8) = -0.8 — the
        // clip binds on the favorable side.
        let r: Real = 0.5;
        let a: Real = -1.0;
        let clipped = r.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
        assert_eq!((r * a).min(clipped * a), -0.8);
    }

    fn toy_model(seed: u64) -> Model {
        Model::init(
            ModelConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 16,
                max_seq_len: 40,
                vocab_size: 35,
                tie_embeddings: true,
                init_std: 0.1,
            },
            seed,
        )
        .unwrap()
    }

    fn toy_groups(model: &Model, n: usize) -> Vec<CandidateGroup> {
        let vocab = Vocabulary::standard();
        (0..n)
            .map(|k| {
                let scene = generate_scene(90 + k as u64);
                let prompt = render_caption(&vocab, &oracle_caption(&scene));
                let input = GroupInput {
                    id: k as u64,
                    task: Task::T2I,
                    tokens: prompt,
                };
                sample_group(model, model, &vocab, &input, 4, 1.0, 91).unwrap()
            })
            .collect()
    }

    #[test]
    fn ratios_are_one_when_policy_equals_reference() {
        let model = toy_model(83);
        let vocab = Vocabulary::standard();
        let scene = generate_scene(84);
        let prompt = render_caption(&vocab, &oracle_caption(&scene));
        let seq = t2i_sequence(&vocab, &prompt, &tokenize_image(&vocab, &scene)).unwrap();
        let ratios = importance_ratios(&model, &model, &seq).unwrap();
        assert_eq!(ratios.len(), seq.target_len());
        assert!(ratios.iter().all(|&r| r == 1.0));
    }

    #[test]
    fn ratios_positive_finite_for_different_models() {
        let a = toy_model(85);
        let b = toy_model(86);
        let vocab = Vocabulary::standard();
        let scene = generate_scene(87);
        let prompt = render_caption(&vocab, &oracle_caption(&scene));
        let seq = t2i_sequence(&vocab, &prompt, &tokenize_image(&vocab, &scene)).unwrap();
        let ratios = importance_ratios(&a, &b, &seq).unwrap();
        assert!(ratios.iter().all(|&r| r.is_finite() && r > 0.0));
    }

    #[test]
    fn two_token_ratio_matches_direct_softmax() {
        // Hand-check exp(delta logp) against probabilities computed from
        // the raw logits.
        let policy = toy_model(88);
        let reference = toy_model(89);
        let seq = TaskSequence::new(vec![0, 3, 5], 1).unwrap();
        let ratios = importance_ratios(&policy, &reference, &seq).unwrap();

        let prob = |model: &Model, prefix: &[usize], target: usize| -> Real {
            let logits = crate::model::forward_logits(model, prefix).unwrap();
            let v = model.config.vocab_size;
            let row = &logits.data()[(prefix.len() - 1) * v..prefix.len() * v];
            let mut p = row.to_vec();
            crate::tensor::softmax_slice(&mut p);
            p[target]
        };
        let expect0 = prob(&policy, &[0], 3) / prob(&reference, &[0], 3);
        let expect1 = prob(&policy, &[0, 3], 5) / prob(&reference, &[0, 3], 5);
        assert!((ratios[0] - expect0).abs() < 1e-12);
        assert!((ratios[1] - expect1).abs() < 1e-12);
    }

    #[test]
    fn on_policy_loss_is_near_zero_for_equal_lengths() {
        // policy == ref: ratios 1, kl 0, so the loss reduces to
        // -sum_i A_i * ||Y_i|| / sum ||Y_i||; T2I candidates all have 10
        // target tokens, and standardized advantages sum to 0.
        let model = toy_model(92);
        let groups = toy_groups(&model, 1);
        let cfg = GRPOConfig::default();
        let loss = grpo_loss(&model, &model, &groups, &cfg).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn at_reference_gradient_equals_reinforce_with_advantage() {
        // With r = 1 everywhere the clipped surrogate's gradient must equal
        // the plain policy-gradient sum A_i * grad logp / sum ||Y||.
        let model = toy_model(93);
        let groups = toy_groups(&model, 2);
        let cfg = GRPOConfig::default();

        // Clipped-surrogate gradient.
        let tape_a = Tape::new();
        let bound_a = model.bind(&tape_a);
        let loss_a =
            grpo_loss_on_tape(&tape_a, &bound_a, &model, &model, &groups, &cfg).unwrap();
        tape_a.backward(loss_a).unwrap();

        // Direct REINFORCE objective on a fresh tape.
        let tape_b = Tape::new();
        let bound_b = model.bind(&tape_b);
        let mut per_group = Vec::new();
        for group in &groups {
            let advantages = grpo_advantages(&group.rewards);
            let total: usize = group.candidates.iter().map(TaskSequence::target_len).sum();
            let mut acc: Option<Var> = None;
            for (cand, &adv) in group.candidates.iter().zip(&advantages) {
                let (ce, _) = target_nll_on_tape(&tape_b, &bound_b, &model.config, cand).unwrap();
                let logp_sum = tape_b.scale(tape_b.sum_all(ce), -1.0);
                let term = tape_b.scale(logp_sum, adv);
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape_b.add(a, term).unwrap(),
                });
            }
            per_group.push(tape_b.scale(acc.unwrap(), 1.0 / total as Real));
        }
        let mut acc = per_group[0];
        for &g in &per_group[1..] {
            acc = tape_b.add(acc, g).unwrap();
        }
        let loss_b = tape_b.scale(acc, -1.0 / groups.len() as Real);
        tape_b.backward(loss_b).unwrap();

        for (i, (va, vb)) in bound_a.vars().iter().zip(bound_b.vars()).enumerate() {
            let ga = tape_a.grad(*va).unwrap_or_default();
            let gb = tape_b.grad(*vb).unwrap_or_default();
            for (x, y) in ga.iter().zip(&gb) {
                assert!(
                    (x - y).abs() < 1e-10,
                    "param {i}: clipped {x} vs reinforce {y}"
                );
            }
        }
    }

    #[test]
    fn k3_penalty_is_nonnegative_and_zero_at_equality() {
        // k3(rho) = rho - ln rho - 1 >= 0 with equality iff rho = 1.
        let mut rng = rng_from(&[94]);
        for _ in 0..100 {
            let delta: Real = rng.gen_range(-3.0..3.0);
            let rho = (-delta).exp();
            let k3 = rho + delta - 1.0;
            assert!(k3 >= 0.0);
        }
        assert_eq!(1.0f64 + 0.0 - 1.0, 0.0);
    }

    #[test]
    fn grpo_gradient_matches_finite_differences() {
        let policy = toy_model(95);
        let reference = toy_model(96); // distinct reference, ratios near 1
        let groups = toy_groups(&policy, 1);
        let cfg = GRPOConfig::default();
        let mut rng = rng_from(&[97]);
        let err = crate::tensor::finite_difference_check(
            |tape, vars| {
                let bound = BoundParams::from_vars(&policy.params, vars.to_vec());
                grpo_loss_on_tape(tape, &bound, &policy, &reference, &groups, &cfg).map_err(|e| {
                    match e {
                        ModelError::Tensor(t) => t,
                        other => panic!("unexpected model error {other}"),
                    }
                })
            },
            &policy.params,
            1e-5,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-4, "grpo fd error {err}");
    }

    #[test]
    fn empty_group_list_is_an_error() {
        let model = toy_model(98);
        assert!(grpo_loss(&model, &model, &[], &GRPOConfig::default()).is_err());
    }
}
