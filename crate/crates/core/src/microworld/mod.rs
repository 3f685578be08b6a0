//! Synthetic paired image/text universe with exact semantics.
//!
//! Scenes are 3×3 grids of colored shapes; captions are a tiny strict
//! grammar over them. Because both sides are symbolic, an exact alignment
//! oracle can grade any caption against any scene — the desk-scale stand-in
//! for external T2I/hallucination benchmarks.

mod caption;
mod dataset;
mod oracle;
mod scene;
mod vocab;

pub use caption::{caption_text, parse_caption, render_caption, Caption, Clause, ParseFailure};
pub use dataset::{
    load_image_records, load_prompt_records, load_pretrain_records, make_datasets,
    write_datasets, DataConfig, DataError, Datasets, ImageRecord, PretrainRecord, PromptRecord,
};
pub use oracle::{oracle_caption, oracle_score, score_triples, AlignmentScore, SubScores, Triple};
pub use scene::{detokenize_image, generate_scene, tokenize_image, Object, Scene, SCENE_CELLS};
pub use vocab::{Color, Position, Shape, TokenId, Vocabulary, COLORS, POSITIONS, SHAPES};
