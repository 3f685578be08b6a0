//! Caption grammar: rendering to tokens and strict parsing back.
//!
//! ```text
//! caption  := clause ("and" clause)*
//! clause   := color shape "at" position
//! position := "center"
//!           | ("top" | "bottom") ("left" | "center" | "right")
//!           | "middle" ("left" | "right")
//! ```
//!
//! The parser is the left inverse of the renderer and rejects any deviation
//! at the first offending token; an unparseable caption scores zero
//! downstream, which keeps degenerate text from gaming the reward.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::microworld::vocab::{Color, Position, Shape, TokenId, Vocabulary, COLORS, SHAPES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Clause {
    pub color: Color,
    pub shape: Shape,
    pub position: Position,
}

/// Ordered clauses; rendered text joins them with "and".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub clauses: Vec<Clause>,
}

/// Strict-parse rejection, carrying the first offending token index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("caption unparseable at token index {index}")]
pub struct ParseFailure {
    pub index: usize,
}

/// Renders a caption to text tokens: `<color> <shape> at <position>`,
/// clauses joined by "and".
pub fn render_caption(vocab: &Vocabulary, caption: &Caption) -> Vec<TokenId> {
    let mut tokens = Vec::new();
    for (i, clause) in caption.clauses.iter().enumerate() {
        if i > 0 {
            tokens.push(vocab.word_id("and"));
        }
        tokens.push(vocab.word_id(clause.color.word()));
        tokens.push(vocab.word_id(clause.shape.word()));
        tokens.push(vocab.word_id("at"));
        for word in clause.position.words() {
            tokens.push(vocab.word_id(word));
        }
    }
    tokens
}

/// Parses caption tokens. Left inverse of [`render_caption`] on its valid
/// domain.
pub fn parse_caption(vocab: &Vocabulary, tokens: &[TokenId]) -> Result<Caption, ParseFailure> {
    let mut cursor = Cursor {
        vocab,
        tokens,
        pos: 0,
    };
    let mut clauses = vec![cursor.clause()?];
    while cursor.pos < tokens.len() {
        cursor.expect_word("and")?;
        clauses.push(cursor.clause()?);
    }
    Ok(Caption { clauses })
}

struct Cursor<'a> {
    vocab: &'a Vocabulary,
    tokens: &'a [TokenId],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail<T>(&self) -> Result<T, ParseFailure> {
        Err(ParseFailure { index: self.pos })
    }

    fn next_word(&mut self) -> Result<&'a str, ParseFailure> {
        let Some(&tok) = self.tokens.get(self.pos) else {
            return self.fail();
        };
        if !self.vocab.text_range().contains(&tok) {
            return self.fail();
        }
        self.pos += 1;
        let vocab: &'a Vocabulary = self.vocab;
        Ok(vocab.token(tok))
    }

    fn peek_is(&self, word: &str) -> bool {
        self.tokens
            .get(self.pos)
            .map(|&t| self.vocab.text_range().contains(&t) && self.vocab.token(t) == word)
            .unwrap_or(false)
    }

    fn expect_word(&mut self, word: &str) -> Result<(), ParseFailure> {
        if self.peek_is(word) {
            self.pos += 1;
            Ok(())
        } else {
            self.fail()
        }
    }

    fn clause(&mut self) -> Result<Clause, ParseFailure> {
        let start = self.pos;
        let color_word = self.next_word()?;
        let Some(&color) = COLORS.iter().find(|c| c.word() == color_word) else {
            self.pos = start;
            return self.fail();
        };
        let shape_start = self.pos;
        let shape_word = self.next_word()?;
        let Some(&shape) = SHAPES.iter().find(|s| s.word() == shape_word) else {
            self.pos = shape_start;
            return self.fail();
        };
        self.expect_word("at")?;
        let position = self.position()?;
        Ok(Clause {
            color,
            shape,
            position,
        })
    }

    fn position(&mut self) -> Result<Position, ParseFailure> {
        let start = self.pos;
        let first = self.next_word()?;
        let pos = match first {
            "center" => Position::Center,
            "top" | "middle" | "bottom" => {
                let second_start = self.pos;
                let second = self.next_word()?;
                let looked_up = POSITION_TABLE
                    .iter()
                    .find(|(a, b, _)| *a == first && *b == second)
                    .map(|&(_, _, p)| p);
                match looked_up {
                    Some(p) => p,
                    None => {
                        self.pos = second_start;
                        return self.fail();
                    }
                }
            }
            _ => {
                self.pos = start;
                return self.fail();
            }
        };
        Ok(pos)
    }
}

const POSITION_TABLE: [(&str, &str, Position); 8] = [
    ("top", "left", Position::TopLeft),
    ("top", "center", Position::TopCenter),
    ("top", "right", Position::TopRight),
    ("middle", "left", Position::MiddleLeft),
    ("middle", "right", Position::MiddleRight),
    ("bottom", "left", Position::BottomLeft),
    ("bottom", "center", Position::BottomCenter),
    ("bottom", "right", Position::BottomRight),
];

/// Renders a caption as human-readable text (same words the tokens spell).
pub fn caption_text(vocab: &Vocabulary, tokens: &[TokenId]) -> String {
    tokens
        .iter()
        .map(|&t| vocab.token(t))
        .collect::<Vec<_>>()
        .join(" ")
}
