//! Dual self-rewards: scoring an output by the likelihood of regenerating
//! the original input from it.
//!
//! A sampled caption is rewarded by how well the scorer reconstructs the
//! image conditioned on that caption; a sampled image by how well it
//! reconstructs the prompt. Both are single teacher-forced passes over the
//! reversed task sequence, normalized per target token so sequence length
//! carries no bias. The scorer is the policy itself in unified mode and a
//! frozen partner model in separate mode — same code path either way.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::microworld::{TokenId, Vocabulary, SCENE_CELLS};
use crate::model::{
    avg_log_likelihood, i2t_sequence, sample_target, t2i_sequence, Model, ModelError, Task,
    TaskSequence,
};
use crate::rng::{rng_from, seed_hash};
use crate::Real;

/// Which capability the reward grades.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardDirection {
    Understanding,
    Generation,
}

/// Average reversed log-likelihood in nats per token; finite and <= 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualReward {
    pub value: Real,
    pub direction: RewardDirection,
}

/// Reward for a caption of an image: mean log-likelihood of the original
/// image tokens conditioned on the caption (the reversed T2I sequence),
/// under the scorer.
pub fn dual_reward_understanding(
    scorer: &Model,
    vocab: &Vocabulary,
    image: &[TokenId],
    caption: &[TokenId],
) -> Result<DualReward, ModelError> {
    if caption.is_empty() {
        return Err(ModelError::EmptyTarget);
    }
    let reversed = t2i_sequence(vocab, caption, image)?;
    Ok(DualReward {
        value: avg_log_likelihood(scorer, &reversed)?,
        direction: RewardDirection::Understanding,
    })
}

/// Reward for an image generated from a prompt: mean log-likelihood of the
/// original prompt tokens conditioned on the image (the reversed I2T
/// sequence), under the scorer.
pub fn dual_reward_generation(
    scorer: &Model,
    vocab: &Vocabulary,
    prompt: &[TokenId],
    image: &[TokenId],
) -> Result<DualReward, ModelError> {
    if image.len() != SCENE_CELLS {
        return Err(ModelError::Invalid(format!(
            "image must have {SCENE_CELLS} tokens, got {}",
            image.len()
        )));
    }
    let reversed = i2t_sequence(vocab, image, prompt, true)?;
    Ok(DualReward {
        value: avg_log_likelihood(scorer, &reversed)?,
        direction: RewardDirection::Generation,
    })
}

/// One training input with a stable identity for seed derivation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupInput {
    /// Stable identity (dataset index) hashed into per-candidate seeds.
    pub id: u64,
    pub task: Task,
    /// Prompt tokens for T2I, 9 image tokens for I2T.
    pub tokens: Vec<TokenId>,
}

/// G sampled outputs for one input, each with its dual self-reward.
#[derive(Debug, Clone)]
pub struct CandidateGroup {
    pub input: GroupInput,
    pub candidates: Vec<TaskSequence>,
    pub rewards: Vec<Real>,
}

impl CandidateGroup {
    pub fn size(&self) -> usize {
        self.candidates.len()
    }
}

/// Rewards below this spread are considered indistinguishable.
pub const DEGENERATE_EPS: Real = 1e-9;

/// Outcome of best/worst selection over a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairSelection {
    /// Indices of (highest-reward, lowest-reward) candidates.
    Pair { better: usize, worse: usize },
    /// All rewards numerically indistinguishable: no preference signal.
    Degenerate,
}

/// Samples G candidates from the policy and scores each with the scorer.
///
/// Candidate `i` uses the RNG seeded by `hash(group_seed, input.id, i)`, so
/// groups are reproducible and may be sampled in parallel; results are
/// merged in candidate-index order.
pub fn sample_group(
    policy: &Model,
    scorer: &Model,
    vocab: &Vocabulary,
    input: &GroupInput,
    group_size: usize,
    temperature: Real,
    group_seed: u64,
) -> Result<CandidateGroup, ModelError> {
    assert!(group_size >= 2, "a group needs at least 2 candidates");
    let candidates: Vec<Result<(TaskSequence, Real), ModelError>> = (0..group_size)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from(&[seed_hash(&[group_seed, input.id, i as u64])]);
            let seq = sample_target(policy, vocab, input.task, &input.tokens, temperature, &mut rng)?;
            let reward = score_candidate(scorer, vocab, input, &seq)?;
            Ok((seq, reward))
        })
        .collect();

    let mut seqs = Vec::with_capacity(group_size);
    let mut rewards = Vec::with_capacity(group_size);
    for c in candidates {
        let (seq, reward) = c?;
        seqs.push(seq);
        rewards.push(reward);
    }
    Ok(CandidateGroup {
        input: input.clone(),
        candidates: seqs,
        rewards,
    })
}

/// Scores one already-sampled candidate with the appropriate dual reward.
pub fn score_candidate(
    scorer: &Model,
    vocab: &Vocabulary,
    input: &GroupInput,
    candidate: &TaskSequence,
) -> Result<Real, ModelError> {
    match input.task {
        Task::T2I => {
            // Candidate target is 9 vision tokens + EOI.
            let image = &candidate.target_tokens()[..SCENE_CELLS];
            Ok(dual_reward_generation(scorer, vocab, &input.tokens, image)?.value)
        }
        Task::I2T => {
            let caption = caption_of_candidate(vocab, candidate);
            if caption.is_empty() {
                // A bare-EOS caption cannot condition the reversed pass;
                // give it the worst possible standing instead of erroring.
                return Ok(-1e9);
            }
            Ok(dual_reward_understanding(scorer, vocab, &image_of_input(input), &caption)?.value)
        }
    }
}

fn image_of_input(input: &GroupInput) -> Vec<TokenId> {
    debug_assert_eq!(input.task, Task::I2T);
    input.tokens.clone()
}

/// Target tokens of an I2T candidate without the trailing EOS.
pub fn caption_of_candidate(vocab: &Vocabulary, candidate: &TaskSequence) -> Vec<TokenId> {
    let mut toks = candidate.target_tokens().to_vec();
    if toks.last() == Some(&vocab.eos()) {
        toks.pop();
    }
    toks
}

/// Picks (argmax, argmin) by reward, ties broken toward the lowest index;
/// a spread below [`DEGENERATE_EPS`] is degenerate and skipped by callers.
pub fn select_preference_pair(group: &CandidateGroup) -> PairSelection {
    let mut best = 0usize;
    let mut worst = 0usize;
    for (i, &r) in group.rewards.iter().enumerate() {
        if r > group.rewards[best] {
            best = i;
        }
        if r < group.rewards[worst] {
            worst = i;
        }
    }
    if group.rewards[best] - group.rewards[worst] < DEGENERATE_EPS {
        PairSelection::Degenerate
    } else {
        PairSelection::Pair {
            better: best,
            worse: worst,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microworld::{
        generate_scene, oracle_caption, render_caption, tokenize_image, Vocabulary,
    };
    use crate::model::ModelConfig;

    fn vocab() -> Vocabulary {
        Vocabulary::standard()
    }

    #[test]
    fn uniform_scorer_rewards_are_neg_ln_v() {
        let v = vocab();
        let scorer = Model::zeroed(ModelConfig::default()).unwrap();
        let ln_v = 35f64.ln();
        for seed in [1u64, 2, 3] {
            let scene = generate_scene(seed);
            let image = tokenize_image(&v, &scene);
            let caption = render_caption(&v, &oracle_caption(&scene));
            let ru = dual_reward_understanding(&scorer, &v, &image, &caption).unwrap();
            let rg = dual_reward_generation(&scorer, &v, &caption, &image).unwrap();
            assert!((ru.value + ln_v).abs() < 1e-9);
            assert!((rg.value + ln_v).abs() < 1e-9);
            assert_eq!(ru.direction, RewardDirection::Understanding);
            assert_eq!(rg.direction, RewardDirection::Generation);
        }
    }

    #[test]
    fn uniform_scorer_reward_is_length_independent() {
        // Prompts of different lengths score identically under a uniform
        // model: the 1/||X|| normalization removes length bias.
        let v = vocab();
        let scorer = Model::zeroed(ModelConfig::default()).unwrap();
        let image = tokenize_image(&v, &generate_scene(5));
        let short = vec![v.word_id("red"), v.word_id("circle"), v.word_id("at"), v.word_id("center")];
        let long: Vec<_> = {
            let scene = generate_scene(77); // any multi-clause scene text
            render_caption(&v, &oracle_caption(&scene))
        };
        let a = dual_reward_generation(&scorer, &v, &short, &image).unwrap();
        let b = dual_reward_generation(&scorer, &v, &long, &image).unwrap();
        assert!((a.value - b.value).abs() < 1e-9);
    }

    #[test]
    fn reward_reversal_equals_avg_log_likelihood_of_reversed_sequence() {
        let v = vocab();
        let model = Model::init(ModelConfig::default(), 61).unwrap();
        let scene = generate_scene(6);
        let image = tokenize_image(&v, &scene);
        let caption = render_caption(&v, &oracle_caption(&scene));

        let ru = dual_reward_understanding(&model, &v, &image, &caption).unwrap();
        let t2i = t2i_sequence(&v, &caption, &image).unwrap();
        assert_eq!(ru.value.to_bits(), avg_log_likelihood(&model, &t2i).unwrap().to_bits());

        let rg = dual_reward_generation(&model, &v, &caption, &image).unwrap();
        let i2t = i2t_sequence(&v, &image, &caption, true).unwrap();
        assert_eq!(rg.value.to_bits(), avg_log_likelihood(&model, &i2t).unwrap().to_bits());
    }

    #[test]
    fn reward_is_a_function_of_tokens_only() {
        let v = vocab();
        let model = Model::init(ModelConfig::default(), 62).unwrap();
        let scene = generate_scene(7);
        let image = tokenize_image(&v, &scene);
        let caption = render_caption(&v, &oracle_caption(&scene));
        let a = dual_reward_understanding(&model, &v, &image, &caption).unwrap();
        let b = dual_reward_understanding(&model, &v, &image, &caption.clone()).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }

    #[test]
    fn group_sampling_is_reproducible_and_finite() {
        let v = vocab();
        let model = Model::init(ModelConfig::default(), 63).unwrap();
        let scene = generate_scene(8);
        let input = GroupInput {
            id: 17,
            task: Task::I2T,
            tokens: tokenize_image(&v, &scene),
        };
        let g1 = sample_group(&model, &model, &v, &input, 8, 1.0, 1234).unwrap();
        let g2 = sample_group(&model, &model, &v, &input, 8, 1.0, 1234).unwrap();
        assert_eq!(g1.candidates, g2.candidates);
        assert_eq!(g1.rewards, g2.rewards);
        assert_eq!(g1.size(), 8);
        assert!(g1.rewards.iter().all(|r| r.is_finite()));
    }

    #[test]
    fn candidates_scored_independently() {
        // Scoring is per-candidate: recomputing any candidate's reward in
        // isolation reproduces the group's entry.
        let v = vocab();
        let model = Model::init(ModelConfig::default(), 64).unwrap();
        let scene = generate_scene(9);
        let caption = render_caption(&v, &oracle_caption(&scene));
        let input = GroupInput {
            id: 3,
            task: Task::T2I,
            tokens: caption,
        };
        let group = sample_group(&model, &model, &v, &input, 4, 1.0, 99).unwrap();
        for (i, cand) in group.candidates.iter().enumerate() {
            let r = score_candidate(&model, &v, &input, cand).unwrap();
            assert_eq!(r.to_bits(), group.rewards[i].to_bits());
        }
    }

    #[test]
    fn preference_pair_selection_rules() {
        let mk = |rewards: Vec<Real>| CandidateGroup {
            input: GroupInput {
                id: 0,
                task: Task::T2I,
                tokens: vec![],
            },
            candidates: vec![],
            rewards,
        };
        assert_eq!(
            select_preference_pair(&mk(vec![-2.0, -1.5, -3.0])),
            PairSelection::Pair {
                better: 1,
                worse: 2
            }
        );
        assert_eq!(
            select_preference_pair(&mk(vec![-1.0, -1.0, -1.0])),
            PairSelection::Degenerate
        );
        assert_eq!(
            select_preference_pair(&mk(vec![-1.0, -1.0, -2.0])),
            PairSelection::Pair {
                better: 0,
                worse: 2
            }
        );
    }
}
