//! Task sequences: full token streams with condition/target segmentation.
//!
//! Layouts:
//! - T2I: `[BOS_T2I] prompt [BOI] image(9) [EOI]`, target = image + EOI
//! - I2T: `[BOS_I2T] image(9) [BOT] caption [EOS]`, target = caption + EOS
//!   (the EOS is absent when sampling hit the length cap before emitting it)
//!
//! The reversal at the heart of the dual self-reward is just swapping which
//! builder is called: scoring a caption against its image re-encodes the
//! pair as a T2I sequence, and vice versa.

use serde::{Deserialize, Serialize};

use crate::microworld::{TokenId, Vocabulary, SCENE_CELLS};
use crate::model::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Text condition, image target (generation).
    T2I,
    /// Image condition, text target (understanding / captioning).
    I2T,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Task::T2I => write!(f, "t2i"),
            Task::I2T => write!(f, "i2t"),
        }
    }
}

/// A full token stream plus its condition/target split. The mask is true
/// exactly on positions at or beyond `condition_len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub tokens: Vec<TokenId>,
    pub condition_len: usize,
    pub target_mask: Vec<bool>,
}

impl TaskSequence {
    pub fn new(tokens: Vec<TokenId>, condition_len: usize) -> Result<Self, ModelError> {
        if condition_len == 0 || condition_len >= tokens.len() {
            return Err(ModelError::EmptyTarget);
        }
        let target_mask = (0..tokens.len()).map(|i| i >= condition_len).collect();
        Ok(Self {
            tokens,
            condition_len,
            target_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of target tokens (the `||Y||` in per-token normalizations).
    pub fn target_len(&self) -> usize {
        self.tokens.len() - self.condition_len
    }

    pub fn target_tokens(&self) -> &[TokenId] {
        &self.tokens[self.condition_len..]
    }
}

/// Builds the generation-direction sequence: prompt conditions, image is
/// the target.
pub fn t2i_sequence(
    vocab: &Vocabulary,
    prompt: &[TokenId],
    image: &[TokenId],
) -> Result<TaskSequence, ModelError> {
    if image.len() != SCENE_CELLS {
        return Err(ModelError::Invalid(format!(
            "image must have {SCENE_CELLS} tokens, got {}",
            image.len()
        )));
    }
    let mut tokens = Vec::with_capacity(prompt.len() + SCENE_CELLS + 3);
    tokens.push(vocab.bos_t2i());
    tokens.extend_from_slice(prompt);
    tokens.push(vocab.boi());
    let condition_len = tokens.len();
    tokens.extend_from_slice(image);
    tokens.push(vocab.eoi());
    TaskSequence::new(tokens, condition_len)
}

/// Builds the understanding-direction sequence: image conditions, caption
/// is the target. `terminated` appends EOS (always true for complete
/// captions; false only for samples that hit the length cap).
pub fn i2t_sequence(
    vocab: &Vocabulary,
    image: &[TokenId],
    caption: &[TokenId],
    terminated: bool,
) -> Result<TaskSequence, ModelError> {
    if image.len() != SCENE_CELLS {
        return Err(ModelError::Invalid(format!(
            "image must have {SCENE_CELLS} tokens, got {}",
            image.len()
        )));
    }
    let mut tokens = Vec::with_capacity(image.len() + caption.len() + 3);
    tokens.push(vocab.bos_i2t());
    tokens.extend_from_slice(image);
    tokens.push(vocab.bot());
    let condition_len = tokens.len();
    tokens.extend_from_slice(caption);
    if terminated {
        tokens.push(vocab.eos());
    }
    TaskSequence::new(tokens, condition_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microworld::{generate_scene, oracle_caption, render_caption, tokenize_image};

    #[test]
    fn t2i_layout_and_mask() {
        let vocab = Vocabulary::standard();
        let scene = generate_scene(3);
        let prompt = render_caption(&vocab, &oracle_caption(&scene));
        let image = tokenize_image(&vocab, &scene);
        let seq = t2i_sequence(&vocab, &prompt, &image).unwrap();
        assert_eq!(seq.tokens[0], vocab.bos_t2i());
        assert_eq!(seq.tokens[1 + prompt.len()], vocab.boi());
        assert_eq!(*seq.tokens.last().unwrap(), vocab.eoi());
        assert_eq!(seq.condition_len, prompt.len() + 2);
        assert_eq!(seq.target_len(), 10); // 9 vision tokens + EOI
        for (i, &m) in seq.target_mask.iter().enumerate() {
            assert_eq!(m, i >= seq.condition_len);
        }
    }

    #[test]
    fn i2t_layout_and_mask() {
        let vocab = Vocabulary::standard();
        let scene = generate_scene(4);
        let caption = render_caption(&vocab, &oracle_caption(&scene));
        let image = tokenize_image(&vocab, &scene);
        let seq = i2t_sequence(&vocab, &image, &caption, true).unwrap();
        assert_eq!(seq.tokens[0], vocab.bos_i2t());
        assert_eq!(seq.tokens[10], vocab.bot());
        assert_eq!(*seq.tokens.last().unwrap(), vocab.eos());
        assert_eq!(seq.condition_len, 11);
        assert_eq!(seq.target_len(), caption.len() + 1);
    }

    #[test]
    fn empty_target_rejected() {
        let vocab = Vocabulary::standard();
        let scene = generate_scene(5);
        let image = tokenize_image(&vocab, &scene);
        assert!(matches!(
            i2t_sequence(&vocab, &image, &[], false),
            Err(ModelError::EmptyTarget)
        ));
    }

    #[test]
    fn wrong_image_length_rejected() {
        let vocab = Vocabulary::standard();
        assert!(t2i_sequence(&vocab, &[0], &[vocab.empty_token(); 5]).is_err());
    }
}
