//! Exact-oracle evaluation harness.
//!
//! Generation quality is graded by sampling images per eval prompt and
//! scoring the decoded grids against the prompt's asserted triples (the
//! prompt plays ground truth); captioning quality by sampling captions per
//! held-out scene and scoring them with the alignment oracle. All scores
//! are exact set comparisons — no learned judges anywhere. The harness is
//! read-only over model parameters.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::microworld::{
    detokenize_image, oracle_score, parse_caption, score_triples, ImageRecord, PromptRecord,
    TokenId, Triple, Vocabulary, SCENE_CELLS,
};
use crate::model::{sample_target, Model, ModelError, Task};
use crate::rewards::{caption_of_candidate, dual_reward_understanding};
use crate::rng::{rng_from, tag};
use crate::Real;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("eval input error: {0}")]
    Input(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed report {path}: {message}")]
    Malformed { path: String, message: String },
}

/// Mean generation scores over (prompt, sample) pairs. Sub-scores relax one
/// attribute each, so each is >= the full-triple overall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenScores {
    pub f1_overall: f64,
    pub f1_color: f64,
    pub f1_shape: f64,
    pub f1_position: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UndScores {
    pub f1_overall: f64,
    /// Hallucinated assertions / total assertions; an unparseable caption
    /// counts as one hallucinated assertion.
    pub hallucination_rate: f64,
}

/// One checkpoint's evaluation. `reward_oracle_spearman` is `None` when the
/// correlation is undefined (fewer than 2 distinct oracle scores).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub gen: GenScores,
    pub und: UndScores,
    pub reward_oracle_spearman: Option<f64>,
    pub n_samples: usize,
    pub seed: u64,
    pub checkpoint: String,
}

/// Sampling effort per eval item.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub samples_per_prompt: usize,
    pub samples_per_scene: usize,
    /// Caption samples for the reward–oracle Spearman correlation.
    pub correlation_samples: usize,
    pub temperature: Real,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples_per_prompt: 4,
            samples_per_scene: 4,
            correlation_samples: 200,
            temperature: 1.0,
            seed: 0,
        }
    }
}

fn prompt_truth(vocab: &Vocabulary, prompt: &[TokenId]) -> Result<Vec<Triple>, EvalError> {
    let caption = parse_caption(vocab, prompt)
        .map_err(|e| EvalError::Input(format!("unparseable eval prompt: {e}")))?;
    let mut triples: Vec<Triple> = caption
        .clauses
        .iter()
        .map(|c| (c.color, c.shape, c.position))
        .collect();
    triples.sort();
    triples.dedup();
    Ok(triples)
}

/// Generation eval generic over the image sampler (tests substitute exact
/// or random generators).
pub fn eval_generation_with<S>(
    sampler: S,
    vocab: &Vocabulary,
    prompts: &[PromptRecord],
    samples_per_prompt: usize,
    seed: u64,
) -> Result<GenScores, EvalError>
where
    S: Fn(&[TokenId], &mut ChaCha8Rng) -> Result<Vec<TokenId>, ModelError> + Sync,
{
    if prompts.is_empty() {
        return Err(EvalError::Input("no eval prompts".to_string()));
    }
    let per_prompt: Vec<Result<(f64, f64, f64, f64), EvalError>> = prompts
        .par_iter()
        .enumerate()
        .map(|(pi, record)| {
            let truth = prompt_truth(vocab, &record.caption)?;
            let mut acc = (0.0, 0.0, 0.0, 0.0);
            for si in 0..samples_per_prompt {
                let mut rng = rng_from(&[seed, tag::EVAL, 1, pi as u64, si as u64]);
                let image = sampler(&record.caption, &mut rng)?;
                let scene = detokenize_image(vocab, &image)
                    .map_err(|e| EvalError::Input(format!("sampler produced bad image: {e}")))?;
                let asserted = scene.objects();
                let s = score_triples(&asserted, &truth);
                acc.0 += s.overall;
                acc.1 += s.color;
                acc.2 += s.shape;
                acc.3 += s.position;
            }
            Ok(acc)
        })
        .collect();

    let mut sums = (0.0, 0.0, 0.0, 0.0);
    for r in per_prompt {
        let (a, b, c, d) = r?;
        sums.0 += a;
        sums.1 += b;
        sums.2 += c;
        sums.3 += d;
    }
    let n = (prompts.len() * samples_per_prompt) as f64;
    Ok(GenScores {
        f1_overall: sums.0 / n,
        f1_color: sums.1 / n,
        f1_shape: sums.2 / n,
        f1_position: sums.3 / n,
    })
}

/// Samples images for each prompt and scores them against the prompt's
/// asserted triples.
pub fn eval_generation(
    model: &Model,
    vocab: &Vocabulary,
    prompts: &[PromptRecord],
    cfg: &EvalConfig,
) -> Result<GenScores, EvalError> {
    eval_generation_with(
        |prompt, rng| {
            let seq = sample_target(model, vocab, Task::T2I, prompt, cfg.temperature, rng)?;
            Ok(seq.target_tokens()[..SCENE_CELLS].to_vec())
        },
        vocab,
        prompts,
        cfg.samples_per_prompt,
        cfg.seed,
    )
}

/// Understanding eval generic over the caption sampler.
pub fn eval_understanding_with<S>(
    sampler: S,
    vocab: &Vocabulary,
    scenes: &[ImageRecord],
    samples_per_scene: usize,
    seed: u64,
) -> Result<UndScores, EvalError>
where
    S: Fn(&[TokenId], &mut ChaCha8Rng) -> Result<Vec<TokenId>, ModelError> + Sync,
{
    if scenes.is_empty() {
        return Err(EvalError::Input("no eval scenes".to_string()));
    }
    let per_scene: Vec<Result<(f64, usize, usize), EvalError>> = scenes
        .par_iter()
        .enumerate()
        .map(|(si, record)| {
            let scene = detokenize_image(vocab, &record.scene)
                .map_err(|e| EvalError::Input(format!("bad eval scene: {e}")))?;
            let mut f1_sum = 0.0;
            let mut asserted = 0usize;
            let mut hallucinated = 0usize;
            for ci in 0..samples_per_scene {
                let mut rng = rng_from(&[seed, tag::EVAL, 2, si as u64, ci as u64]);
                let caption = sampler(&record.scene, &mut rng)?;
                let score = oracle_score(vocab, &caption, &scene);
                f1_sum += score.f1;
                match parse_caption(vocab, &caption) {
                    Ok(parsed) => {
                        let mut triples: Vec<Triple> = parsed
                            .clauses
                            .iter()
                            .map(|c| (c.color, c.shape, c.position))
                            .collect();
                        triples.sort();
                        triples.dedup();
                        asserted += triples.len();
                        hallucinated += score.hallucinated;
                    }
                    Err(_) => {
                        // Convention: a caption the grammar rejects is one
                        // hallucinated assertion.
                        asserted += 1;
                        hallucinated += 1;
                    }
                }
            }
            Ok((f1_sum, asserted, hallucinated))
        })
        .collect();

    let mut f1_total = 0.0;
    let mut asserted_total = 0usize;
    let mut halluc_total = 0usize;
    for r in per_scene {
        let (f, a, h) = r?;
        f1_total += f;
        asserted_total += a;
        halluc_total += h;
    }
    let n = (scenes.len() * samples_per_scene) as f64;
    Ok(UndScores {
        f1_overall: f1_total / n,
        hallucination_rate: if asserted_total == 0 {
            0.0
        } else {
            halluc_total as f64 / asserted_total as f64
        },
    })
}

/// Samples captions for each scene and grades them with the oracle.
pub fn eval_understanding(
    model: &Model,
    vocab: &Vocabulary,
    scenes: &[ImageRecord],
    cfg: &EvalConfig,
) -> Result<UndScores, EvalError> {
    eval_understanding_with(
        |image, rng| {
            let seq = sample_target(model, vocab, Task::I2T, image, cfg.temperature, rng)?;
            Ok(caption_of_candidate(vocab, &seq))
        },
        vocab,
        scenes,
        cfg.samples_per_scene,
        cfg.seed,
    )
}

/// Spearman rank correlation between understanding self-rewards and oracle
/// F1 over `n` sampled captions (cycling the scene list as needed).
///
/// `sampler_model` produces the captions; `scorer_model` computes the
/// reversed likelihood (the same model in unified mode). Returns `None`
/// with a warning when fewer than 2 distinct oracle scores exist.
pub fn reward_oracle_correlation(
    sampler_model: &Model,
    scorer_model: &Model,
    vocab: &Vocabulary,
    scenes: &[ImageRecord],
    n: usize,
    temperature: Real,
    seed: u64,
) -> Result<Option<f64>, EvalError> {
    if scenes.is_empty() {
        return Err(EvalError::Input("no scenes for correlation".to_string()));
    }
    assert!(n >= 50, "correlation needs at least 50 samples");
    let pairs: Vec<Result<(f64, f64), EvalError>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let record = &scenes[i % scenes.len()];
            let scene = detokenize_image(vocab, &record.scene)
                .map_err(|e| EvalError::Input(format!("bad scene: {e}")))?;
            let mut rng = rng_from(&[seed, tag::EVAL, 3, i as u64]);
            let seq = sample_target(
                sampler_model,
                vocab,
                Task::I2T,
                &record.scene,
                temperature,
                &mut rng,
            )?;
            let caption = caption_of_candidate(vocab, &seq);
            let reward = if caption.is_empty() {
                -1e9
            } else {
                dual_reward_understanding(scorer_model, vocab, &record.scene, &caption)?.value
            };
            let f1 = oracle_score(vocab, &caption, &scene).f1;
            Ok((reward, f1))
        })
        .collect();

    let mut rewards = Vec::with_capacity(n);
    let mut f1s = Vec::with_capacity(n);
    for p in pairs {
        let (r, f) = p?;
        rewards.push(r);
        f1s.push(f);
    }
    let distinct = {
        let mut v = f1s.clone();
        v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        v.dedup();
        v.len()
    };
    if distinct < 2 {
        log::warn!("reward-oracle correlation undefined: all oracle scores equal");
        return Ok(None);
    }
    Ok(Some(spearman(&rewards, &f1s)))
}

/// Spearman rank correlation with average-rank tie handling.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "paired samples required");
    assert!(xs.len() >= 2, "need at least two samples");
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

/// Ranks 1..n with ties sharing their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the average of ranks i+1..=j+1.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

/// Full per-checkpoint evaluation: generation from `gen_model`,
/// understanding and the reward–oracle correlation from `und_model` scored
/// by `scorer_model`. In unified mode all three are the same model.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    gen_model: &Model,
    und_model: &Model,
    scorer_model: &Model,
    vocab: &Vocabulary,
    prompts: &[PromptRecord],
    scenes: &[ImageRecord],
    cfg: &EvalConfig,
    checkpoint: String,
) -> Result<EvalReport, EvalError> {
    let gen = eval_generation(gen_model, vocab, prompts, cfg)?;
    let und = eval_understanding(und_model, vocab, scenes, cfg)?;
    let rho = reward_oracle_correlation(
        und_model,
        scorer_model,
        vocab,
        scenes,
        cfg.correlation_samples,
        cfg.temperature,
        cfg.seed,
    )?;
    Ok(EvalReport {
        gen,
        und,
        reward_oracle_spearman: rho,
        n_samples: prompts.len() * cfg.samples_per_prompt + scenes.len() * cfg.samples_per_scene,
        seed: cfg.seed,
        checkpoint,
    })
}

/// Writes a report as pretty JSON (stable field order).
pub fn emit_report(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    let mut f = File::create(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(json.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })
}

pub fn read_report(path: &Path) -> Result<EvalReport, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| EvalError::Malformed {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub const CURVES_HEADER: &str = "epoch,gen_f1,gen_color,gen_shape,gen_position,und_f1,halluc_rate";

/// Writes per-epoch reports as a curves CSV for external plotting.
pub fn emit_curves(reports: &[(usize, EvalReport)], path: &Path) -> Result<(), EvalError> {
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for (epoch, r) in reports {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            epoch,
            r.gen.f1_overall,
            r.gen.f1_color,
            r.gen.f1_shape,
            r.gen.f1_position,
            r.und.f1_overall,
            r.und.hallucination_rate
        ));
    }
    std::fs::write(path, out).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}
