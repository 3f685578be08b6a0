//! Ancestral sampling of task targets.
//!
//! Decoding is segment-constrained: during the image segment only vision
//! tokens are reachable, during the caption segment only text words and
//! EOS. That is a decoding-time constraint only — likelihoods elsewhere
//! always use the full unmasked softmax.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::microworld::{TokenId, Vocabulary, SCENE_CELLS};
use crate::model::{i2t_sequence, t2i_sequence, IncrementalDecoder, Model, ModelError, Task, TaskSequence};
use crate::Real;

/// Caption sampling stops after this many tokens if EOS never arrives.
pub const CAPTION_TOKEN_CAP: usize = 20;

/// Draws one token from `softmax(row[legal] / temperature)`.
///
/// As `temperature -> 0+` this reduces to greedy argmax over the legal set.
pub fn sample_from_logits(
    row: &[Real],
    legal: &[TokenId],
    temperature: Real,
    rng: &mut ChaCha8Rng,
) -> TokenId {
    assert!(temperature > 0.0, "temperature must be positive");
    assert!(!legal.is_empty(), "legal token set must be non-empty");
    let mut probs: Vec<Real> = legal.iter().map(|&id| row[id] / temperature).collect();
    crate::tensor::softmax_slice(&mut probs);
    let u: Real = rng.gen();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return legal[i];
        }
    }
    *legal.last().expect("non-empty")
}

/// Samples a task target by ancestral decoding from the condition.
///
/// - T2I: condition = raw prompt tokens; samples exactly 9 vision tokens,
///   then EOI is appended structurally.
/// - I2T: condition = 9 image tokens; samples text tokens until EOS or the
///   20-token cap.
pub fn sample_target(
    model: &Model,
    vocab: &Vocabulary,
    task: Task,
    condition: &[TokenId],
    temperature: Real,
    rng: &mut ChaCha8Rng,
) -> Result<TaskSequence, ModelError> {
    let mut decoder = IncrementalDecoder::new(model);
    match task {
        Task::T2I => {
            let mut logits = feed_condition(
                &mut decoder,
                std::iter::once(vocab.bos_t2i())
                    .chain(condition.iter().copied())
                    .chain(std::iter::once(vocab.boi())),
            )?;
            let legal: Vec<TokenId> = vocab.vision_range().collect();
            let mut image = Vec::with_capacity(SCENE_CELLS);
            while image.len() < SCENE_CELLS {
                let tok = sample_from_logits(&logits, &legal, temperature, rng);
                image.push(tok);
                if image.len() == SCENE_CELLS {
                    break;
                }
                logits = decoder.feed(tok)?;
            }
            t2i_sequence(vocab, condition, &image)
        }
        Task::I2T => {
            if condition.len() != SCENE_CELLS {
                return Err(ModelError::Invalid(format!(
                    "I2T condition must be {SCENE_CELLS} image tokens, got {}",
                    condition.len()
                )));
            }
            let mut logits = feed_condition(
                &mut decoder,
                std::iter::once(vocab.bos_i2t())
                    .chain(condition.iter().copied())
                    .chain(std::iter::once(vocab.bot())),
            )?;
            let mut legal: Vec<TokenId> = vocab.text_range().collect();
            legal.push(vocab.eos());
            let mut caption = Vec::new();
            let mut terminated = false;
            while caption.len() < CAPTION_TOKEN_CAP {
                let tok = sample_from_logits(&logits, &legal, temperature, rng);
                if tok == vocab.eos() {
                    terminated = true;
                    break;
                }
                caption.push(tok);
                if caption.len() < CAPTION_TOKEN_CAP {
                    logits = decoder.feed(tok)?;
                }
            }
            if caption.is_empty() {
                // An immediate EOS carries no content; represent it as the
                // sequence [EOS] alone so the target stays non-empty.
                return i2t_sequence(vocab, condition, &[], true);
            }
            i2t_sequence(vocab, condition, &caption, terminated)
        }
    }
}

fn feed_condition(
    decoder: &mut IncrementalDecoder<'_>,
    tokens: impl Iterator<Item = TokenId>,
) -> Result<Vec<Real>, ModelError> {
    let mut logits = None;
    for tok in tokens {
        logits = Some(decoder.feed(tok)?);
    }
    logits.ok_or_else(|| ModelError::Invalid("empty condition".to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microworld::{generate_scene, oracle_caption, render_caption, tokenize_image};
    use crate::model::ModelConfig;
    use crate::rng::rng_from;

    fn fixture() -> (Model, Vocabulary) {
        (
            Model::init(ModelConfig::default(), 41).unwrap(),
            Vocabulary::standard(),
        )
    }

    #[test]
    fn t2i_sample_has_exactly_nine_vision_tokens() {
        let (model, vocab) = fixture();
        let scene = generate_scene(42);
        let prompt = render_caption(&vocab, &oracle_caption(&scene));
        for seed in 0..10u64 {
            let mut rng = rng_from(&[seed]);
            let seq = sample_target(&model, &vocab, Task::T2I, &prompt, 1.0, &mut rng).unwrap();
            let target = seq.target_tokens();
            assert_eq!(target.len(), 10);
            assert!(target[..9].iter().all(|t| vocab.vision_range().contains(t)));
            assert_eq!(target[9], vocab.eoi());
        }
    }

    #[test]
    fn i2t_sample_respects_segment_legality_and_cap() {
        let (model, vocab) = fixture();
        let scene = generate_scene(43);
        let image = tokenize_image(&vocab, &scene);
        for seed in 0..20u64 {
            let mut rng = rng_from(&[seed, 1]);
            let seq = sample_target(&model, &vocab, Task::I2T, &image, 1.0, &mut rng).unwrap();
            let target = seq.target_tokens();
            assert!(target.len() <= CAPTION_TOKEN_CAP + 1);
            for (i, &tok) in target.iter().enumerate() {
                let last = i + 1 == target.len();
                assert!(
                    vocab.text_range().contains(&tok) || (last && tok == vocab.eos()),
                    "illegal token {tok} at target position {i}"
                );
            }
        }
    }

    #[test]
    fn fixed_seed_reproduces_sample() {
        let (model, vocab) = fixture();
        let scene = generate_scene(44);
        let prompt = render_caption(&vocab, &oracle_caption(&scene));
        let image = tokenize_image(&vocab, &scene);
        for task in [Task::T2I, Task::I2T] {
            let cond: &[TokenId] = match task {
                Task::T2I => &prompt,
                Task::I2T => &image,
            };
            let a = sample_target(&model, &vocab, task, cond, 1.0, &mut rng_from(&[7, 7])).unwrap();
            let b = sample_target(&model, &vocab, task, cond, 1.0, &mut rng_from(&[7, 7])).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn tiny_temperature_is_greedy() {
        let (model, vocab) = fixture();
        let scene = generate_scene(45);
        let prompt = render_caption(&vocab, &oracle_caption(&scene));

        // Greedy reference: argmax over legal logits at each step.
        let mut decoder = IncrementalDecoder::new(&model);
        decoder.feed(vocab.bos_t2i()).unwrap();
        for &t in &prompt {
            decoder.feed(t).unwrap();
        }
        let mut logits = decoder.feed(vocab.boi()).unwrap();
        let legal: Vec<TokenId> = vocab.vision_range().collect();
        let mut greedy = Vec::new();
        while greedy.len() < SCENE_CELLS {
            let best = legal
                .iter()
                .copied()
                .max_by(|&a, &b| logits[a].partial_cmp(&logits[b]).unwrap())
                .unwrap();
            greedy.push(best);
            if greedy.len() == SCENE_CELLS {
                break;
            }
            logits = decoder.feed(best).unwrap();
        }

        let mut rng = rng_from(&[9, 9]);
        let seq = sample_target(&model, &vocab, Task::T2I, &prompt, 1e-9, &mut rng).unwrap();
        assert_eq!(&seq.target_tokens()[..9], greedy.as_slice());
    }

    #[test]
    fn sampling_rejects_nonpositive_temperature() {
        let result = std::panic::catch_unwind(|| {
            let mut rng = rng_from(&[0]);
            sample_from_logits(&[0.0, 1.0], &[0, 1], 0.0, &mut rng)
        });
        assert!(result.is_err());
    }
}
