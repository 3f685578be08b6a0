//! Dataset emission: pretraining pairs, non-parallel DSR sets, and held-out
//! eval sets, all as JSONL keyed by token ids.
//!
//! Generation is a pure function of (config, master seed): every record's
//! RNG derives from its own seed, and the per-set seed ranges are disjoint
//! by construction. The DSR prompt and image sets come from different
//! ranges, so no text-image pair is ever co-present — the non-parallel
//! setting. Eval records are additionally rejected if their content
//! collides with the corresponding DSR set (distinct seeds alone do not
//! guarantee distinct scenes in a 150k-scene universe).

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::microworld::caption::{render_caption, Caption};
use crate::microworld::oracle::oracle_caption;
use crate::microworld::scene::{generate_scene, tokenize_image};
use crate::microworld::vocab::{Position, TokenId, Vocabulary, COLORS, POSITIONS};
use crate::rng::{rng_from, tag};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed record at {path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
}

/// Sizes, corruption rate, and per-set seed bases.
///
/// Each set draws record seeds from `[master_seed + base, master_seed +
/// base + n)`; the nominal ranges must be pairwise disjoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_pretrain: usize,
    pub n_dsr_prompts: usize,
    pub n_dsr_images: usize,
    pub n_eval_prompts: usize,
    pub n_eval_scenes: usize,
    /// Probability that a pretraining caption has one clause corrupted.
    pub p_corrupt: f64,
    pub master_seed: u64,
    pub pretrain_seed_base: u64,
    pub dsr_prompt_seed_base: u64,
    pub dsr_image_seed_base: u64,
    pub eval_prompt_seed_base: u64,
    pub eval_scene_seed_base: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_pretrain: 2000,
            n_dsr_prompts: 512,
            n_dsr_images: 512,
            n_eval_prompts: 64,
            n_eval_scenes: 64,
            p_corrupt: 0.3,
            master_seed: 42,
            pretrain_seed_base: 1_000_000,
            dsr_prompt_seed_base: 2_000_000,
            dsr_image_seed_base: 3_000_000,
            eval_prompt_seed_base: 4_000_000,
            eval_scene_seed_base: 5_000_000,
        }
    }
}

impl DataConfig {
    fn validate(&self) -> Result<(), DataError> {
        if !(0.0..=1.0).contains(&self.p_corrupt) {
            return Err(DataError::Config(format!(
                "p_corrupt must lie in [0,1], got {}",
                self.p_corrupt
            )));
        }
        // Nominal ranges are padded 2x: eval generation may skip seeds to
        // avoid content collisions with the DSR sets.
        let ranges = [
            ("pretrain", self.pretrain_seed_base, 2 * self.n_pretrain as u64),
            (
                "dsr_prompts",
                self.dsr_prompt_seed_base,
                2 * self.n_dsr_prompts as u64,
            ),
            (
                "dsr_images",
                self.dsr_image_seed_base,
                2 * self.n_dsr_images as u64,
            ),
            (
                "eval_prompts",
                self.eval_prompt_seed_base,
                2 * self.n_eval_prompts as u64,
            ),
            (
                "eval_scenes",
                self.eval_scene_seed_base,
                2 * self.n_eval_scenes as u64,
            ),
        ];
        for (i, &(name_a, base_a, len_a)) in ranges.iter().enumerate() {
            for &(name_b, base_b, len_b) in &ranges[i + 1..] {
                let disjoint = base_a + len_a <= base_b || base_b + len_b <= base_a;
                if !disjoint {
                    return Err(DataError::Config(format!(
                        "seed ranges overlap: {name_a} [{base_a}, {}) and {name_b} [{base_b}, {})",
                        base_a + len_a,
                        base_b + len_b
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub scene: Vec<TokenId>,
    pub caption: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub caption: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub scene: Vec<TokenId>,
}

#[derive(Debug, Clone)]
pub struct Datasets {
    pub pretrain: Vec<PretrainRecord>,
    pub dsr_prompts: Vec<PromptRecord>,
    pub dsr_images: Vec<ImageRecord>,
    pub eval_prompts: Vec<PromptRecord>,
    pub eval_scenes: Vec<ImageRecord>,
}

/// Replaces one clause's color OR position (never shape) with a different
/// value chosen uniformly — the attribute-binding and spatial mistakes the
/// base model is meant to inherit.
fn corrupt_caption(caption: &mut Caption, seed: u64) {
    let mut rng = rng_from(&[seed, tag::CORRUPT]);
    let clause = rng.gen_range(0..caption.clauses.len());
    let clause = &mut caption.clauses[clause];
    if rng.gen_bool(0.5) {
        let others: Vec<_> = COLORS.iter().filter(|&&c| c != clause.color).collect();
        clause.color = *others[rng.gen_range(0..others.len())];
    } else {
        let others: Vec<Position> = POSITIONS
            .iter()
            .copied()
            .filter(|&p| p != clause.position)
            .collect();
        clause.position = others[rng.gen_range(0..others.len())];
    }
}

/// Generates all five datasets from the config. Deterministic; see the
/// module docs for the seed-range and holdout rules.
pub fn make_datasets(vocab: &Vocabulary, cfg: &DataConfig) -> Result<Datasets, DataError> {
    cfg.validate()?;

    let mut pretrain = Vec::with_capacity(cfg.n_pretrain);
    for k in 0..cfg.n_pretrain as u64 {
        let seed = cfg
            .master_seed
            .wrapping_add(cfg.pretrain_seed_base)
            .wrapping_add(k);
        let scene = generate_scene(seed);
        let mut caption = oracle_caption(&scene);
        let mut rng = rng_from(&[seed, tag::PRETRAIN_DATA]);
        if rng.gen_bool(cfg.p_corrupt) {
            corrupt_caption(&mut caption, seed);
        }
        pretrain.push(PretrainRecord {
            scene: tokenize_image(vocab, &scene),
            caption: render_caption(vocab, &caption),
        });
    }

    let prompt_of_seed = |seed: u64| -> PromptRecord {
        let scene = generate_scene(seed);
        PromptRecord {
            caption: render_caption(vocab, &oracle_caption(&scene)),
        }
    };

    let mut dsr_prompts = Vec::with_capacity(cfg.n_dsr_prompts);
    for k in 0..cfg.n_dsr_prompts as u64 {
        dsr_prompts.push(prompt_of_seed(
            cfg.master_seed
                .wrapping_add(cfg.dsr_prompt_seed_base)
                .wrapping_add(k),
        ));
    }

    let mut dsr_images = Vec::with_capacity(cfg.n_dsr_images);
    for k in 0..cfg.n_dsr_images as u64 {
        let seed = cfg
            .master_seed
            .wrapping_add(cfg.dsr_image_seed_base)
            .wrapping_add(k);
        dsr_images.push(ImageRecord {
            scene: tokenize_image(vocab, &generate_scene(seed)),
        });
    }

    // Held-out sets: skip seeds whose content already appears in the
    // corresponding DSR training set.
    let mut eval_prompts = Vec::with_capacity(cfg.n_eval_prompts);
    let mut offset = 0u64;
    while eval_prompts.len() < cfg.n_eval_prompts {
        let seed = cfg
            .master_seed
            .wrapping_add(cfg.eval_prompt_seed_base)
            .wrapping_add(offset);
        offset += 1;
        let candidate = prompt_of_seed(seed);
        if !dsr_prompts.contains(&candidate) {
            eval_prompts.push(candidate);
        }
    }

    let mut eval_scenes = Vec::with_capacity(cfg.n_eval_scenes);
    let mut offset = 0u64;
    while eval_scenes.len() < cfg.n_eval_scenes {
        let seed = cfg
            .master_seed
            .wrapping_add(cfg.eval_scene_seed_base)
            .wrapping_add(offset);
        offset += 1;
        let candidate = ImageRecord {
            scene: tokenize_image(vocab, &generate_scene(seed)),
        };
        if !dsr_images.contains(&candidate) {
            eval_scenes.push(candidate);
        }
    }

    Ok(Datasets {
        pretrain,
        dsr_prompts,
        dsr_images,
        eval_prompts,
        eval_scenes,
    })
}

pub const PRETRAIN_FILE: &str = "pretrain.jsonl";
pub const DSR_PROMPTS_FILE: &str = "dsr_prompts.jsonl";
pub const DSR_IMAGES_FILE: &str = "dsr_images.jsonl";
pub const EVAL_PROMPTS_FILE: &str = "eval_prompts.jsonl";
pub const EVAL_SCENES_FILE: &str = "eval_scenes.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";

/// Writes the five JSONL files plus the vocab mapping into `dir`.
pub fn write_datasets(
    vocab: &Vocabulary,
    datasets: &Datasets,
    dir: &Path,
) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    write_jsonl(&dir.join(PRETRAIN_FILE), &datasets.pretrain)?;
    write_jsonl(&dir.join(DSR_PROMPTS_FILE), &datasets.dsr_prompts)?;
    write_jsonl(&dir.join(DSR_IMAGES_FILE), &datasets.dsr_images)?;
    write_jsonl(&dir.join(EVAL_PROMPTS_FILE), &datasets.eval_prompts)?;
    write_jsonl(&dir.join(EVAL_SCENES_FILE), &datasets.eval_scenes)?;
    let vocab_path = dir.join(VOCAB_FILE);
    vocab.write_json(&vocab_path).map_err(|source| DataError::Io {
        path: vocab_path.display().to_string(),
        source,
    })?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = File::create(path).map_err(io_err)?;
    for record in records {
        let line = serde_json::to_string(record).expect("record serializes");
        file.write_all(line.as_bytes()).map_err(io_err)?;
        file.write_all(b"\n").map_err(io_err)?;
    }
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn load_pretrain_records(path: &Path) -> Result<Vec<PretrainRecord>, DataError> {
    read_jsonl(path)
}

pub fn load_prompt_records(path: &Path) -> Result<Vec<PromptRecord>, DataError> {
    read_jsonl(path)
}

pub fn load_image_records(path: &Path) -> Result<Vec<ImageRecord>, DataError> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microworld::oracle::oracle_score;
    use crate::microworld::scene::detokenize_image;

    fn vocab() -> Vocabulary {
        Vocabulary::standard()
    }

    #[test]
    fn no_corruption_means_perfect_pretrain_captions() {
        let v = vocab();
        let cfg = DataConfig {
            n_pretrain: 200,
            p_corrupt: 0.0,
            ..DataConfig::default()
        };
        let data = make_datasets(&v, &cfg).unwrap();
        for rec in &data.pretrain {
            let scene = detokenize_image(&v, &rec.scene).unwrap();
            assert_eq!(oracle_score(&v, &rec.caption, &scene).f1, 1.0);
        }
    }

    #[test]
    fn corrupted_fraction_matches_rate() {
        let v = vocab();
        let cfg = DataConfig {
            n_pretrain: 10_000,
            p_corrupt: 0.3,
            ..DataConfig::default()
        };
        let data = make_datasets(&v, &cfg).unwrap();
        let corrupted = data
            .pretrain
            .iter()
            .filter(|rec| {
                let scene = detokenize_image(&v, &rec.scene).unwrap();
                oracle_score(&v, &rec.caption, &scene).f1 < 1.0
            })
            .count();
        let frac = corrupted as f64 / data.pretrain.len() as f64;
        assert!(
            (frac - 0.30).abs() <= 0.02,
            "corrupted fraction {frac} outside 0.30 +- 0.02"
        );
    }

    #[test]
    fn dsr_and_eval_prompts_are_disjoint() {
        let v = vocab();
        let data = make_datasets(&v, &DataConfig::default()).unwrap();
        for ep in &data.eval_prompts {
            assert!(!data.dsr_prompts.contains(ep));
        }
        for es in &data.eval_scenes {
            assert!(!data.dsr_images.contains(es));
        }
    }

    #[test]
    fn overlapping_seed_ranges_rejected() {
        let cfg = DataConfig {
            dsr_prompt_seed_base: 1_000_100,
            ..DataConfig::default()
        };
        assert!(matches!(
            make_datasets(&vocab(), &cfg),
            Err(DataError::Config(_))
        ));
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let v = vocab();
        let cfg = DataConfig::default();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        write_datasets(&v, &make_datasets(&v, &cfg).unwrap(), dir_a.path()).unwrap();
        write_datasets(&v, &make_datasets(&v, &cfg).unwrap(), dir_b.path()).unwrap();
        for name in [
            PRETRAIN_FILE,
            DSR_PROMPTS_FILE,
            DSR_IMAGES_FILE,
            EVAL_PROMPTS_FILE,
            EVAL_SCENES_FILE,
            VOCAB_FILE,
        ] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn jsonl_round_trips() {
        let v = vocab();
        let cfg = DataConfig {
            n_pretrain: 50,
            n_dsr_prompts: 20,
            n_dsr_images: 20,
            n_eval_prompts: 10,
            n_eval_scenes: 10,
            ..DataConfig::default()
        };
        let data = make_datasets(&v, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_datasets(&v, &data, dir.path()).unwrap();
        assert_eq!(
            load_pretrain_records(&dir.path().join(PRETRAIN_FILE)).unwrap(),
            data.pretrain
        );
        assert_eq!(
            load_prompt_records(&dir.path().join(DSR_PROMPTS_FILE)).unwrap(),
            data.dsr_prompts
        );
        assert_eq!(
            load_image_records(&dir.path().join(EVAL_SCENES_FILE)).unwrap(),
            data.eval_scenes
        );
    }
}
