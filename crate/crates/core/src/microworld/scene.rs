//! Scenes: 3×3 grids of colored shapes, and their lossless vision-token
//! encoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::microworld::vocab::{Color, Position, Shape, TokenId, Vocabulary, COLORS, SHAPES};
use crate::rng::rng_from;

pub const SCENE_CELLS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub color: Color,
    pub shape: Shape,
}

/// Ground-truth microworld image. Cells are raster order (row-major,
/// top-left = 0).
///
/// [`generate_scene`] always produces 1–3 objects; grids decoded from
/// model-sampled tokens via [`detokenize_image`] may hold any count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub cells: [Option<Object>; SCENE_CELLS],
}

impl Scene {
    pub fn empty() -> Self {
        Self {
            cells: [None; SCENE_CELLS],
        }
    }

    pub fn object_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    /// Objects in raster order as (color, shape, position) triples.
    pub fn objects(&self) -> Vec<(Color, Shape, Position)> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(cell, obj)| {
                obj.map(|o| (o.color, o.shape, Position::from_cell(cell)))
            })
            .collect()
    }

    /// Three-row ASCII rendering: color initial + shape glyph per cell,
    /// ".." for empty.
    pub fn render_ascii(&self) -> Vec<String> {
        (0..3)
            .map(|r| {
                (0..3)
                    .map(|c| match self.cells[r * 3 + c] {
                        Some(o) => {
                            let color = o.color.word().chars().next().expect("nonempty");
                            let shape = match o.shape {
                                Shape::Circle => 'o',
                                Shape::Square => '#',
                                Shape::Triangle => '^',
                            };
                            format!("{}{}", color.to_ascii_uppercase(), shape)
                        }
                        None => "..".to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect()
    }
}

/// Draws a scene: object count uniform in {1,2,3}, distinct cells, colors
/// and shapes uniform i.i.d. Pure function of the seed.
pub fn generate_scene(seed: u64) -> Scene {
    let mut rng = rng_from(&[seed]);
    let count = rng.gen_range(1..=3usize);
    // Partial Fisher-Yates for distinct cells.
    let mut cells: Vec<usize> = (0..SCENE_CELLS).collect();
    for i in 0..count {
        let j = rng.gen_range(i..SCENE_CELLS);
        cells.swap(i, j);
    }
    let mut scene = Scene::empty();
    for &cell in &cells[..count] {
        let color = COLORS[rng.gen_range(0..COLORS.len())];
        let shape = SHAPES[rng.gen_range(0..SHAPES.len())];
        scene.cells[cell] = Some(Object { color, shape });
    }
    scene
}

/// Encodes a scene as 9 vision tokens in raster order. Lossless:
/// `detokenize_image(tokenize_image(s)) == s`.
pub fn tokenize_image(vocab: &Vocabulary, scene: &Scene) -> Vec<TokenId> {
    scene
        .cells
        .iter()
        .map(|cell| match cell {
            Some(o) => vocab.object_token(o.color, o.shape),
            None => vocab.empty_token(),
        })
        .collect()
}

/// Decodes 9 vision tokens back into a grid. Errors on wrong length or a
/// token outside the vision range; does not constrain object count, since
/// model-sampled grids are unrestricted.
pub fn detokenize_image(vocab: &Vocabulary, tokens: &[TokenId]) -> Result<Scene, String> {
    if tokens.len() != SCENE_CELLS {
        return Err(format!(
            "image must have {SCENE_CELLS} tokens, got {}",
            tokens.len()
        ));
    }
    let mut scene = Scene::empty();
    for (cell, &tok) in tokens.iter().enumerate() {
        if !vocab.vision_range().contains(&tok) {
            return Err(format!("token {tok} at cell {cell} is not a vision token"));
        }
        scene.cells[cell] = vocab
            .object_of_token(tok)
            .map(|(color, shape)| Object { color, shape });
    }
    Ok(scene)
}
