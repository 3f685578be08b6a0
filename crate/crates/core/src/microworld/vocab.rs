//! The unified token space: text words, vision tokens, and task specials.
//!
//! Token ids are assigned by a fixed enumeration so every run agrees on the
//! mapping; `Vocabulary::write_json` documents it on disk.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub type TokenId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
}

pub const COLORS: [Color; 4] = [Color::Red, Color::Blue, Color::Green, Color::Yellow];

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Yellow => "yellow",
        }
    }

    pub fn index(self) -> usize {
        COLORS.iter().position(|&c| c == self).expect("listed")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn index(self) -> usize {
        SHAPES.iter().position(|&s| s == self).expect("listed")
    }
}

/// Grid cell in raster order (row-major, top-left = 0), named the way
/// captions spell it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    TopLeft,
    TopCenter,
    TopRight,
    MiddleLeft,
    Center,
    MiddleRight,
    BottomLeft,
    BottomCenter,
    BottomRight,
}

pub const POSITIONS: [Position; 9] = [
    Position::TopLeft,
    Position::TopCenter,
    Position::TopRight,
    Position::MiddleLeft,
    Position::Center,
    Position::MiddleRight,
    Position::BottomLeft,
    Position::BottomCenter,
    Position::BottomRight,
];

impl Position {
    pub fn cell(self) -> usize {
        POSITIONS.iter().position(|&p| p == self).expect("listed")
    }

    pub fn from_cell(cell: usize) -> Self {
        POSITIONS[cell]
    }

    /// Words the caption grammar uses for this position. The middle cell is
    /// plain "center"; all others are two words.
    pub fn words(self) -> &'static [&'static str] {
        match self {
            Position::TopLeft => &["top", "left"],
            Position::TopCenter => &["top", "center"],
            Position::TopRight => &["top", "right"],
            Position::MiddleLeft => &["middle", "left"],
            Position::Center => &["center"],
            Position::MiddleRight => &["middle", "right"],
            Position::BottomLeft => &["bottom", "left"],
            Position::BottomCenter => &["bottom", "center"],
            Position::BottomRight => &["bottom", "right"],
        }
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.words().join(" "))
    }
}

const TEXT_WORDS: [&str; 15] = [
    "red", "blue", "green", "yellow", // colors
    "circle", "square", "triangle", // shapes
    "at", "and", // connectives
    "top", "middle", "bottom", "left", "center", "right", // position words
];

const SPECIALS: [&str; 7] = [
    "<BOS_T2I>", "<BOS_I2T>", "<BOI>", "<EOI>", "<BOT>", "<EOS>", "<PAD>",
];

/// Fixed 35-token vocabulary: 15 text words, 13 vision tokens
/// (12 color×shape + EMPTY), 7 specials. Text, vision, and special id
/// ranges are disjoint.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    /// The one deterministic assignment every component shares.
    pub fn standard() -> Self {
        let mut id_to_token: Vec<String> = Vec::with_capacity(35);
        id_to_token.extend(TEXT_WORDS.iter().map(|w| w.to_string()));
        for color in COLORS {
            for shape in SHAPES {
                id_to_token.push(format!("<{}_{}>", color.word(), shape.word()));
            }
        }
        id_to_token.push("<EMPTY>".to_string());
        id_to_token.extend(SPECIALS.iter().map(|w| w.to_string()));

        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            id_to_token,
            token_to_id,
        }
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.id_to_token[id]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    /// Ids of plain text words (caption segment legality).
    pub fn text_range(&self) -> std::ops::Range<TokenId> {
        0..TEXT_WORDS.len()
    }

    /// Ids of vision tokens, EMPTY included (image segment legality).
    pub fn vision_range(&self) -> std::ops::Range<TokenId> {
        TEXT_WORDS.len()..TEXT_WORDS.len() + 13
    }

    pub fn object_token(&self, color: Color, shape: Shape) -> TokenId {
        TEXT_WORDS.len() + color.index() * SHAPES.len() + shape.index()
    }

    /// Inverse of [`Vocabulary::object_token`]; `None` for EMPTY or
    /// out-of-range ids.
    pub fn object_of_token(&self, id: TokenId) -> Option<(Color, Shape)> {
        let base = TEXT_WORDS.len();
        if id < base || id >= base + 12 {
            return None;
        }
        let k = id - base;
        Some((COLORS[k / SHAPES.len()], SHAPES[k % SHAPES.len()]))
    }

    pub fn empty_token(&self) -> TokenId {
        TEXT_WORDS.len() + 12
    }

    pub fn bos_t2i(&self) -> TokenId {
        28
    }

    pub fn bos_i2t(&self) -> TokenId {
        29
    }

    pub fn boi(&self) -> TokenId {
        30
    }

    pub fn eoi(&self) -> TokenId {
        31
    }

    pub fn bot(&self) -> TokenId {
        32
    }

    pub fn eos(&self) -> TokenId {
        33
    }

    pub fn pad(&self) -> TokenId {
        34
    }

    pub fn word_id(&self, word: &str) -> TokenId {
        self.id(word)
            .unwrap_or_else(|| panic!("word {word:?} not in vocabulary"))
    }

    /// FNV-1a over the `token=id` pairs; stored in checkpoints so a model
    /// is never loaded against the wrong token assignment.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (id, tok) in self.id_to_token.iter().enumerate() {
            for b in tok.as_bytes().iter().chain(&(id as u64).to_le_bytes()) {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    /// Writes the token→id mapping as JSON, ordered by id.
    pub fn write_json(&self, path: &Path) -> std::io::Result<()> {
        let mut out = String::from("{\n");
        for (id, tok) in self.id_to_token.iter().enumerate() {
            let comma = if id + 1 < self.id_to_token.len() { "," } else { "" };
            out.push_str(&format!(
                "  {}: {}{}\n",
                serde_json::to_string(tok).expect("string"),
                id,
                comma
            ));
        }
        out.push('}');
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())
    }
}
