//! Training orchestration: supervised pretraining and DSR fine-tuning
//! under the four regimes — unified, separate (adversarial), and the two
//! single-capability ablations.
//!
//! Every step samples candidate groups from the current policy, scores
//! them with dual self-rewards (self-scored in unified mode, scored by the
//! frozen partner in separate mode), and applies the configured objective.
//! All randomness derives from the master seed; gradient reductions run in
//! fixed input order, so runs are reproducible at any thread count.

mod metrics;

pub use metrics::{MetricsLog, MetricsRow, METRICS_HEADER};

use std::fmt;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{emit_curves, emit_report, evaluate, EvalConfig, EvalReport};
use crate::microworld::{ImageRecord, PretrainRecord, PromptRecord, Vocabulary};
use crate::model::{
    i2t_sequence, save_checkpoint, t2i_sequence, BoundParams, Model, RngState, Task, TaskSequence,
};
use crate::optim::{
    cosine_lr, grpo_loss_on_tape, simpo_loss_on_tape, AdamWConfig, GRPOConfig, OptimizerState,
    SimPOConfig,
};
use crate::rewards::{sample_group, select_preference_pair, CandidateGroup, GroupInput, PairSelection};
use crate::rng::{rng_from, seed_hash, tag};
use crate::{Real, Tape};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("[{stage}] {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error("freeze contract violated at epoch {epoch}: scorer parameters changed")]
    FreezeViolation { epoch: usize },
}

fn stage_err<E: fmt::Display>(stage: &'static str) -> impl Fn(E) -> TrainError {
    move |e| TrainError::Stage {
        stage,
        message: e.to_string(),
    }
}

/// Which models train, and how rewards are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// One model, both tasks, scoring its own candidates.
    Unified,
    /// Two models alternating per epoch; the frozen one scores.
    Separate,
    /// Understanding-only ablation.
    OnlyUnd,
    /// Generation-only ablation.
    OnlyGen,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Strategy::Unified => "unified",
            Strategy::Separate => "separate",
            Strategy::OnlyUnd => "only_und",
            Strategy::OnlyGen => "only_gen",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unified" => Ok(Strategy::Unified),
            "separate" => Ok(Strategy::Separate),
            "only_und" => Ok(Strategy::OnlyUnd),
            "only_gen" => Ok(Strategy::OnlyGen),
            other => Err(format!(
                "unknown strategy {other:?} (expected unified|separate|only_und|only_gen)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Simpo,
    Grpo,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Simpo => write!(f, "simpo"),
            Method::Grpo => write!(f, "grpo"),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "simpo" => Ok(Method::Simpo),
            "grpo" => Ok(Method::Grpo),
            other => Err(format!("unknown method {other:?} (expected simpo|grpo)")),
        }
    }
}

/// All DSR fine-tuning knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub method: Method,
    /// Candidates sampled per input (G).
    pub group_size: usize,
    pub temperature: Real,
    pub epochs: usize,
    /// Inputs consumed per optimizer step.
    pub batch_size: usize,
    /// Accumulation chunks per optimizer step.
    pub grad_accum: usize,
    pub master_seed: u64,
    pub base_lr: Real,
    pub warmup_steps: usize,
    pub simpo: SimPOConfig,
    pub grpo: GRPOConfig,
    pub adamw: AdamWConfig,
    /// Save a checkpoint every N optimizer steps (0 = finals only).
    pub checkpoint_every: usize,
    /// Record measured wall time in metrics rows. Off by default so
    /// metrics files stay byte-reproducible; timings always go to the log.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Unified,
            method: Method::Simpo,
            group_size: 8,
            temperature: 1.0,
            epochs: 5,
            batch_size: 16,
            grad_accum: 2,
            master_seed: 42,
            base_lr: 3e-4,
            warmup_steps: 5,
            simpo: SimPOConfig::default(),
            grpo: GRPOConfig::default(),
            adamw: AdamWConfig::default(),
            checkpoint_every: 0,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return Err(TrainError::Config(
                "epochs, batch_size, and grad_accum must be >= 1".to_string(),
            ));
        }
        if self.group_size < 2 {
            return Err(TrainError::Config("group_size must be >= 2".to_string()));
        }
        if self.temperature <= 0.0 {
            return Err(TrainError::Config("temperature must be > 0".to_string()));
        }
        self.simpo.validate().map_err(TrainError::Config)?;
        self.grpo.validate().map_err(TrainError::Config)?;
        Ok(())
    }
}

/// Supervised pretraining knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Sequences per optimizer step (each pair contributes two sequences).
    pub batch_size: usize,
    pub base_lr: Real,
    pub warmup_steps: usize,
    pub seed: u64,
    pub adamw: AdamWConfig,
    pub log_wall_time: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 16,
            batch_size: 32,
            base_lr: 3e-3,
            warmup_steps: 5,
            seed: 42,
            adamw: AdamWConfig::default(),
            log_wall_time: false,
        }
    }
}

// ---- gradient plumbing ------------------------------------------------

fn zero_grads(model: &Model) -> Vec<Vec<Real>> {
    model.params.iter().map(|(_, t)| vec![0.0; t.len()]).collect()
}

fn collect_grads(tape: &Tape, bound: &BoundParams<'_>) -> Vec<Vec<Real>> {
    bound
        .vars()
        .iter()
        .map(|&v| {
            tape.grad(v)
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
        })
        .collect()
}

fn add_scaled(acc: &mut [Vec<Real>], grads: &[Vec<Real>], scale: Real) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (x, &y) in a.iter_mut().zip(g) {
            *x += scale * y;
        }
    }
}

fn now_ms(enabled: bool, start: std::time::Instant) -> u64 {
    if enabled {
        start.elapsed().as_millis() as u64
    } else {
        0
    }
}

/// Clamps warmup below the horizon so short smoke runs still schedule.
fn effective_warmup(warmup: usize, total_steps: usize) -> usize {
    warmup.min(total_steps.saturating_sub(1))
}

// ---- pretraining --------------------------------------------------------

/// Supervised next-token training on both directions of each pair. Loss is
/// the token-mean cross entropy over each batch's target segments.
pub fn pretrain(
    model: &mut Model,
    vocab: &Vocabulary,
    pairs: &[PretrainRecord],
    cfg: &PretrainConfig,
    metrics: &mut MetricsLog,
) -> Result<(), TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::Config("pretraining set is empty".to_string()));
    }
    let err = stage_err("pretrain");
    let mut sequences: Vec<TaskSequence> = Vec::with_capacity(pairs.len() * 2);
    for pair in pairs {
        sequences.push(t2i_sequence(vocab, &pair.caption, &pair.scene).map_err(&err)?);
        sequences.push(i2t_sequence(vocab, &pair.scene, &pair.caption, true).map_err(&err)?);
    }

    let steps_per_epoch = sequences.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut opt = OptimizerState::new(cfg.adamw, &model.params);
    let start = std::time::Instant::now();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(&mut rng_from(&[cfg.seed, tag::SHUFFLE, epoch as u64]));

        for chunk in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(Real, usize, Vec<Vec<Real>>), TrainError>> = chunk
                .par_iter()
                .map(|&si| {
                    let seq = &sequences[si];
                    let tape = Tape::new();
                    let bound = model.bind(&tape);
                    let (ce, count) =
                        crate::model::target_nll_on_tape(&tape, &bound, &model.config, seq)
                            .map_err(stage_err("pretrain"))?;
                    let total = tape.sum_all(ce);
                    tape.backward(total).map_err(stage_err("pretrain"))?;
                    let value = tape.value(total).data()[0];
                    Ok((value, count, collect_grads(&tape, &bound)))
                })
                .collect();

            let mut grad_acc = zero_grads(model);
            let mut ce_sum = 0.0;
            let mut token_count = 0usize;
            for r in results {
                let (v, c, g) = r?;
                ce_sum += v;
                token_count += c;
                add_scaled(&mut grad_acc, &g, 1.0);
            }
            let inv = 1.0 / token_count as Real;
            for g in grad_acc.iter_mut() {
                for x in g.iter_mut() {
                    *x *= inv;
                }
            }
            let loss = ce_sum * inv;
            let warmup = effective_warmup(cfg.warmup_steps, total_steps);
            let lr = cosine_lr(opt.step_count() + 1, warmup, total_steps, cfg.base_lr);
            opt.step(&mut model.params, &grad_acc, lr);

            metrics.push(MetricsRow {
                step: opt.step_count(),
                epoch,
                task: "pretrain".to_string(),
                mean_reward: -loss,
                loss,
                lr,
                degenerate_rate: 0.0,
                wall_ms: now_ms(cfg.log_wall_time, start),
            });
        }
        log::info!(
            "pretrain epoch {epoch}/{} done in {:.1}s",
            cfg.epochs,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

// ---- DSR fine-tuning ------------------------------------------------------

/// The non-parallel fine-tuning inputs.
#[derive(Debug, Clone, Copy)]
pub struct DsrData<'a> {
    pub prompts: &'a [PromptRecord],
    pub images: &'a [ImageRecord],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TaskMix {
    Alternating,
    GenOnly,
    UndOnly,
}

impl TaskMix {
    fn of(strategy: Strategy) -> TaskMix {
        match strategy {
            Strategy::Unified | Strategy::Separate => TaskMix::Alternating,
            Strategy::OnlyGen => TaskMix::GenOnly,
            Strategy::OnlyUnd => TaskMix::UndOnly,
        }
    }
}

/// Step plan for one epoch: which task, and which dataset indices. Batches
/// of the two tasks interleave 1:1 in alternating mode.
fn epoch_plan(
    mix: TaskMix,
    n_prompts: usize,
    n_images: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<(Task, Vec<usize>)> {
    let shuffled = |n: usize, salt: u64| -> Vec<usize> {
        let mut v: Vec<usize> = (0..n).collect();
        v.shuffle(&mut rng_from(&[seed, tag::SHUFFLE, epoch as u64, salt]));
        v
    };
    let batches = |v: Vec<usize>| -> Vec<Vec<usize>> {
        v.chunks(batch_size).map(<[usize]>::to_vec).collect()
    };
    match mix {
        TaskMix::GenOnly => batches(shuffled(n_prompts, 1))
            .into_iter()
            .map(|b| (Task::T2I, b))
            .collect(),
        TaskMix::UndOnly => batches(shuffled(n_images, 2))
            .into_iter()
            .map(|b| (Task::I2T, b))
            .collect(),
        TaskMix::Alternating => {
            let gen = batches(shuffled(n_prompts, 1));
            let und = batches(shuffled(n_images, 2));
            let mut plan = Vec::with_capacity(gen.len() + und.len());
            let mut gi = gen.into_iter();
            let mut ui = und.into_iter();
            loop {
                let g = gi.next().map(|b| (Task::T2I, b));
                let u = ui.next().map(|b| (Task::I2T, b));
                if g.is_none() && u.is_none() {
                    break;
                }
                plan.extend(g);
                plan.extend(u);
            }
            plan
        }
    }
}

fn group_input(task: Task, idx: usize, data: &DsrData<'_>) -> GroupInput {
    match task {
        Task::T2I => GroupInput {
            id: idx as u64,
            task,
            tokens: data.prompts[idx].caption.clone(),
        },
        Task::I2T => GroupInput {
            id: idx as u64,
            task,
            tokens: data.images[idx].scene.clone(),
        },
    }
}

struct StepOutcome {
    loss: Real,
    mean_reward: Real,
    degenerate_rate: Real,
    grads: Vec<Vec<Real>>,
}

/// One optimizer step's sampling, scoring, and gradient computation.
#[allow(clippy::too_many_arguments)]
fn dsr_step(
    policy: &Model,
    scorer: &Model,
    ref_model: Option<&Model>,
    vocab: &Vocabulary,
    task: Task,
    batch: &[usize],
    data: &DsrData<'_>,
    cfg: &TrainConfig,
    sample_seed: u64,
) -> Result<StepOutcome, TrainError> {
    let inputs: Vec<GroupInput> = batch.iter().map(|&i| group_input(task, i, data)).collect();
    let groups: Vec<CandidateGroup> = inputs
        .par_iter()
        .map(|input| {
            sample_group(
                policy,
                scorer,
                vocab,
                input,
                cfg.group_size,
                cfg.temperature,
                sample_seed,
            )
        })
        .collect::<Result<_, _>>()
        .map_err(stage_err("dsr-sample"))?;

    let n_rewards: usize = groups.iter().map(|g| g.rewards.len()).sum();
    let mean_reward =
        groups.iter().flat_map(|g| &g.rewards).sum::<Real>() / n_rewards as Real;
    let degenerate = groups
        .iter()
        .filter(|g| select_preference_pair(g) == PairSelection::Degenerate)
        .count();
    let degenerate_rate = degenerate as Real / groups.len() as Real;

    // Gradient accumulation: each chunk contributes its own mean gradient,
    // the step averages the chunk means.
    let chunk_size = groups.len().div_ceil(cfg.grad_accum);
    let mut grad_acc = zero_grads(policy);
    let mut chunk_losses = Vec::new();
    for chunk in groups.chunks(chunk_size) {
        let contribution = match cfg.method {
            Method::Simpo => simpo_chunk(policy, chunk, &cfg.simpo)?,
            Method::Grpo => grpo_chunk(
                policy,
                ref_model.expect("grpo requires a reference snapshot"),
                chunk,
                &cfg.grpo,
            )?,
        };
        if let Some((loss, grads)) = contribution {
            chunk_losses.push(loss);
            add_scaled(&mut grad_acc, &grads, 1.0);
        }
    }
    let loss = if chunk_losses.is_empty() {
        // Every group degenerate: no signal this step, zero gradient.
        0.0
    } else {
        let inv = 1.0 / chunk_losses.len() as Real;
        for g in grad_acc.iter_mut() {
            for x in g.iter_mut() {
                *x *= inv;
            }
        }
        chunk_losses.iter().sum::<Real>() * inv
    };

    Ok(StepOutcome {
        loss,
        mean_reward,
        degenerate_rate,
        grads: grad_acc,
    })
}

/// Mean SimPO loss and gradient over a chunk's non-degenerate pairs.
fn simpo_chunk(
    policy: &Model,
    groups: &[CandidateGroup],
    cfg: &SimPOConfig,
) -> Result<Option<(Real, Vec<Vec<Real>>)>, TrainError> {
    let pairs: Vec<(&CandidateGroup, usize, usize)> = groups
        .iter()
        .filter_map(|g| match select_preference_pair(g) {
            PairSelection::Pair { better, worse } => Some((g, better, worse)),
            PairSelection::Degenerate => None,
        })
        .collect();
    if pairs.is_empty() {
        return Ok(None);
    }
    let results: Vec<Result<(Real, Vec<Vec<Real>>), TrainError>> = pairs
        .par_iter()
        .map(|(g, better, worse)| {
            let tape = Tape::new();
            let bound = policy.bind(&tape);
            let loss = simpo_loss_on_tape(
                &tape,
                &bound,
                policy,
                &g.candidates[*better],
                &g.candidates[*worse],
                cfg,
            )
            .map_err(stage_err("simpo"))?;
            tape.backward(loss).map_err(stage_err("simpo"))?;
            let v = tape.value(loss).data()[0];
            Ok((v, collect_grads(&tape, &bound)))
        })
        .collect();

    let mut grads = zero_grads(policy);
    let mut loss_sum = 0.0;
    let n = results.len() as Real;
    for r in results {
        let (v, g) = r?;
        loss_sum += v;
        add_scaled(&mut grads, &g, 1.0 / n);
    }
    Ok(Some((loss_sum / n, grads)))
}

/// Mean GRPO loss and gradient over a chunk's groups.
fn grpo_chunk(
    policy: &Model,
    ref_model: &Model,
    groups: &[CandidateGroup],
    cfg: &GRPOConfig,
) -> Result<Option<(Real, Vec<Vec<Real>>)>, TrainError> {
    let results: Vec<Result<(Real, Vec<Vec<Real>>), TrainError>> = groups
        .par_iter()
        .map(|g| {
            let tape = Tape::new();
            let bound = policy.bind(&tape);
            let loss = grpo_loss_on_tape(
                &tape,
                &bound,
                policy,
                ref_model,
                std::slice::from_ref(g),
                cfg,
            )
            .map_err(stage_err("grpo"))?;
            tape.backward(loss).map_err(stage_err("grpo"))?;
            let v = tape.value(loss).data()[0];
            Ok((v, collect_grads(&tape, &bound)))
        })
        .collect();

    let mut grads = zero_grads(policy);
    let mut loss_sum = 0.0;
    let n = results.len() as Real;
    for r in results {
        let (v, g) = r?;
        loss_sum += v;
        add_scaled(&mut grads, &g, 1.0 / n);
    }
    Ok(Some((loss_sum / n, grads)))
}

/// Per-epoch statistics returned by the epoch runner.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub steps: usize,
    pub mean_degenerate_rate: Real,
}

/// Callback invoked after each optimizer step with the global step index.
pub type OnStep<'a> = dyn FnMut(usize, &Model) -> Result<(), TrainError> + 'a;

/// Runs one DSR epoch over the planned steps for one model.
///
/// `scorer`: `None` scores candidates with the policy itself (unified and
/// ablation modes); `Some` uses the frozen partner (separate mode).
#[allow(clippy::too_many_arguments)]
fn dsr_epoch(
    policy: &mut Model,
    scorer: Option<&Model>,
    vocab: &Vocabulary,
    data: &DsrData<'_>,
    mix: TaskMix,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    total_steps: usize,
    epoch: usize,
    global_step: &mut usize,
    metrics: &mut MetricsLog,
    on_step: &mut OnStep<'_>,
) -> Result<EpochStats, TrainError> {
    let plan = epoch_plan(
        mix,
        data.prompts.len(),
        data.images.len(),
        cfg.batch_size,
        cfg.master_seed,
        epoch,
    );
    if plan.is_empty() {
        return Err(TrainError::Config(
            "epoch plan is empty: dataset for the selected strategy is empty".to_string(),
        ));
    }
    let ref_model = match cfg.method {
        Method::Grpo => Some(policy.clone()),
        Method::Simpo => None,
    };
    let start = std::time::Instant::now();
    let mut degenerate_sum = 0.0;

    for (task, batch) in &plan {
        let sample_seed = seed_hash(&[
            cfg.master_seed,
            tag::SAMPLE,
            epoch as u64,
            *global_step as u64,
        ]);
        let outcome = {
            let policy_ref: &Model = policy;
            let scorer_ref = scorer.unwrap_or(policy_ref);
            dsr_step(
                policy_ref,
                scorer_ref,
                ref_model.as_ref(),
                vocab,
                *task,
                batch,
                data,
                cfg,
                sample_seed,
            )?
        };
        let warmup = effective_warmup(cfg.warmup_steps, total_steps);
        let lr = cosine_lr(opt.step_count() + 1, warmup, total_steps, cfg.base_lr);
        opt.step(&mut policy.params, &outcome.grads, lr);
        *global_step += 1;
        degenerate_sum += outcome.degenerate_rate;

        metrics.push(MetricsRow {
            step: *global_step,
            epoch,
            task: task.to_string(),
            mean_reward: outcome.mean_reward,
            loss: outcome.loss,
            lr,
            degenerate_rate: outcome.degenerate_rate,
            wall_ms: now_ms(cfg.log_wall_time, start),
        });
        on_step(*global_step, policy)?;
    }

    let stats = EpochStats {
        steps: plan.len(),
        mean_degenerate_rate: degenerate_sum / plan.len() as Real,
    };
    if epoch > 1 && stats.mean_degenerate_rate > 0.5 {
        log::warn!(
            "epoch {epoch}: degenerate group rate {:.2} exceeds 50% — reward signal is collapsing",
            stats.mean_degenerate_rate
        );
    }
    log::info!(
        "dsr epoch {epoch} ({} steps) done in {:.1}s, degenerate rate {:.3}",
        stats.steps,
        start.elapsed().as_secs_f64(),
        stats.mean_degenerate_rate
    );
    Ok(stats)
}

fn steps_per_epoch(mix: TaskMix, data: &DsrData<'_>, batch_size: usize) -> usize {
    let pb = data.prompts.len().div_ceil(batch_size);
    let ib = data.images.len().div_ceil(batch_size);
    match mix {
        TaskMix::Alternating => pb + ib,
        TaskMix::GenOnly => pb,
        TaskMix::UndOnly => ib,
    }
}

/// Callback invoked after each epoch with (epoch, gen-task model,
/// und-task model); both are the same model outside separate mode.
pub type AfterEpoch<'a> = dyn FnMut(usize, &Model, &Model) -> Result<(), TrainError> + 'a;

/// DSR fine-tuning of a single model (unified, only_gen, only_und).
pub fn train_dsr_unified(
    model: &mut Model,
    vocab: &Vocabulary,
    data: &DsrData<'_>,
    cfg: &TrainConfig,
    metrics: &mut MetricsLog,
) -> Result<(), TrainError> {
    train_dsr_unified_with(
        model,
        vocab,
        data,
        cfg,
        metrics,
        &mut |_, _| Ok(()),
        &mut |_, _, _| Ok(()),
    )
}

/// [`train_dsr_unified`] with step and epoch callbacks (checkpoint cadence
/// and per-epoch evaluation hook in here).
pub fn train_dsr_unified_with(
    model: &mut Model,
    vocab: &Vocabulary,
    data: &DsrData<'_>,
    cfg: &TrainConfig,
    metrics: &mut MetricsLog,
    on_step: &mut OnStep<'_>,
    after_epoch: &mut AfterEpoch<'_>,
) -> Result<(), TrainError> {
    cfg.validate()?;
    if cfg.strategy == Strategy::Separate {
        return Err(TrainError::Config(
            "separate strategy trains two models; call train_dsr_separate".to_string(),
        ));
    }
    let mix = TaskMix::of(cfg.strategy);
    validate_data(mix, data)?;
    let total_steps = cfg.epochs * steps_per_epoch(mix, data, cfg.batch_size);
    let mut opt = OptimizerState::new(cfg.adamw, &model.params);
    let mut global_step = 0usize;
    for epoch in 1..=cfg.epochs {
        dsr_epoch(
            model,
            None,
            vocab,
            data,
            mix,
            cfg,
            &mut opt,
            total_steps,
            epoch,
            &mut global_step,
            metrics,
            on_step,
        )?;
        after_epoch(epoch, model, model)?;
    }
    Ok(())
}

/// Per-epoch freeze accounting for the separate strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeRecord {
    pub epoch: usize,
    pub trained: Task,
    pub scorer_checksum_before: u64,
    pub scorer_checksum_after: u64,
}

/// Adversarial two-model training: odd epochs update the generation model
/// on prompts with rewards scored by the frozen understanding model; even
/// epochs the reverse. Returns the freeze log; a scorer whose parameters
/// change mid-epoch is a hard error.
pub fn train_dsr_separate(
    gen_model: &mut Model,
    und_model: &mut Model,
    vocab: &Vocabulary,
    data: &DsrData<'_>,
    cfg: &TrainConfig,
    metrics: &mut MetricsLog,
) -> Result<Vec<FreezeRecord>, TrainError> {
    train_dsr_separate_with(
        gen_model,
        und_model,
        vocab,
        data,
        cfg,
        metrics,
        &mut |_, _| Ok(()),
        &mut |_, _, _| Ok(()),
    )
}

/// [`train_dsr_separate`] with step and epoch callbacks.
#[allow(clippy::too_many_arguments)]
pub fn train_dsr_separate_with(
    gen_model: &mut Model,
    und_model: &mut Model,
    vocab: &Vocabulary,
    data: &DsrData<'_>,
    cfg: &TrainConfig,
    metrics: &mut MetricsLog,
    on_step: &mut OnStep<'_>,
    after_epoch: &mut AfterEpoch<'_>,
) -> Result<Vec<FreezeRecord>, TrainError> {
    cfg.validate()?;
    if cfg.strategy != Strategy::Separate {
        return Err(TrainError::Config(
            "train_dsr_separate requires strategy = separate".to_string(),
        ));
    }
    validate_data(TaskMix::Alternating, data)?;

    let gen_epochs = cfg.epochs.div_ceil(2);
    let und_epochs = cfg.epochs / 2;
    let gen_total = gen_epochs * steps_per_epoch(TaskMix::GenOnly, data, cfg.batch_size);
    let und_total = (und_epochs * steps_per_epoch(TaskMix::UndOnly, data, cfg.batch_size)).max(1);
    let mut opt_gen = OptimizerState::new(cfg.adamw, &gen_model.params);
    let mut opt_und = OptimizerState::new(cfg.adamw, &und_model.params);
    let mut global_step = 0usize;
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let train_gen = epoch % 2 == 1;
        let (trained_task, scorer_before) = if train_gen {
            (Task::T2I, und_model.checksum())
        } else {
            (Task::I2T, gen_model.checksum())
        };
        if train_gen {
            dsr_epoch(
                gen_model,
                Some(und_model),
                vocab,
                data,
                TaskMix::GenOnly,
                cfg,
                &mut opt_gen,
                gen_total,
                epoch,
                &mut global_step,
                metrics,
                on_step,
            )?;
        } else {
            dsr_epoch(
                und_model,
                Some(gen_model),
                vocab,
                data,
                TaskMix::UndOnly,
                cfg,
                &mut opt_und,
                und_total,
                epoch,
                &mut global_step,
                metrics,
                on_step,
            )?;
        }
        let scorer_after = if train_gen {
            und_model.checksum()
        } else {
            gen_model.checksum()
        };
        if scorer_after != scorer_before {
            return Err(TrainError::FreezeViolation { epoch });
        }
        records.push(FreezeRecord {
            epoch,
            trained: trained_task,
            scorer_checksum_before: scorer_before,
            scorer_checksum_after: scorer_after,
        });
        after_epoch(epoch, gen_model, und_model)?;
    }
    Ok(records)
}

fn validate_data(mix: TaskMix, data: &DsrData<'_>) -> Result<(), TrainError> {
    let need_prompts = mix != TaskMix::UndOnly;
    let need_images = mix != TaskMix::GenOnly;
    if need_prompts && data.prompts.is_empty() {
        return Err(TrainError::Config("dsr prompt set is empty".to_string()));
    }
    if need_images && data.images.is_empty() {
        return Err(TrainError::Config("dsr image set is empty".to_string()));
    }
    Ok(())
}

// ---- full experiment ----------------------------------------------------

/// Everything a full experiment needs, already loaded.
pub struct RunConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub vocab: Vocabulary,
    pub base: Model,
    pub dsr_prompts: Vec<PromptRecord>,
    pub dsr_images: Vec<ImageRecord>,
    pub eval_prompts: Vec<PromptRecord>,
    pub eval_scenes: Vec<ImageRecord>,
    pub out_dir: PathBuf,
    /// Rayon threads; 0 uses the machine default. 1 guarantees a fully
    /// serial run; ordered reductions make other counts match it.
    pub threads: usize,
}

/// Paths and reports produced by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub run_id: String,
    pub reports: Vec<(usize, EvalReport)>,
    pub metrics_path: PathBuf,
    pub curves_path: PathBuf,
    pub final_checkpoints: Vec<(String, PathBuf)>,
    pub freeze_records: Vec<FreezeRecord>,
}

/// Stable identity of a run: a hash of the training config (seed included).
pub fn run_id(train: &TrainConfig) -> String {
    let json = serde_json::to_string(train).expect("config serializes");
    let mut h: u64 = 0xcbf29ce484222325;
    for b in json.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{:016x}", seed_hash(&[h, train.master_seed]))
}

/// Extracts the run-id prefix from a report's checkpoint field.
pub fn checkpoint_run_id(checkpoint_field: &str) -> Option<&str> {
    checkpoint_field.split("-epoch").next()
}

/// Runs DSR fine-tuning from a pretrained base with per-epoch evaluation,
/// metrics, curves, and checkpoints, all under `out_dir`. Deterministic
/// given the config and master seed.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunArtifacts, TrainError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(stage_err("thread-pool"))?;
    pool.install(|| run_experiment_inner(cfg))
}

fn run_experiment_inner(cfg: &RunConfig) -> Result<RunArtifacts, TrainError> {
    cfg.train.validate()?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(stage_err("setup"))?;
    let id = run_id(&cfg.train);
    let vocab = &cfg.vocab;
    let data = DsrData {
        prompts: &cfg.dsr_prompts,
        images: &cfg.dsr_images,
    };

    let mut metrics = MetricsLog::new();
    let mut reports: Vec<(usize, EvalReport)> = Vec::new();

    let eval_at = |gen: &Model,
                   und: &Model,
                   scorer: &Model,
                   epoch: usize,
                   reports: &mut Vec<(usize, EvalReport)>|
     -> Result<(), TrainError> {
        let mut ecfg = cfg.eval;
        ecfg.seed = seed_hash(&[cfg.train.master_seed, tag::EVAL, epoch as u64]);
        let report = evaluate(
            gen,
            und,
            scorer,
            vocab,
            &cfg.eval_prompts,
            &cfg.eval_scenes,
            &ecfg,
            format!("{id}-epoch{epoch:03}"),
        )
        .map_err(stage_err("eval"))?;
        emit_report(
            &report,
            &cfg.out_dir.join(format!("eval_epoch_{epoch:03}.json")),
        )
        .map_err(stage_err("eval"))?;
        reports.push((epoch, report));
        Ok(())
    };

    // Baseline (epoch 0) evaluation of the pretrained model.
    eval_at(&cfg.base, &cfg.base, &cfg.base, 0, &mut reports)?;

    let ckpt_state = RngState::new(cfg.train.master_seed, 0);
    let save = |model: &Model, name: &str| -> Result<PathBuf, TrainError> {
        let path = cfg.out_dir.join(name);
        save_checkpoint(model, vocab.hash(), ckpt_state, &path).map_err(stage_err("checkpoint"))?;
        Ok(path)
    };
    let make_on_step = || {
        let out_dir = cfg.out_dir.clone();
        let every = cfg.train.checkpoint_every;
        let vocab_hash = vocab.hash();
        move |step: usize, model: &Model| -> Result<(), TrainError> {
            if every > 0 && step % every == 0 {
                let path = out_dir.join(format!("checkpoint_step_{step:06}.ckpt"));
                save_checkpoint(model, vocab_hash, ckpt_state, &path)
                    .map_err(stage_err("checkpoint"))?;
            }
            Ok(())
        }
    };

    let mut final_checkpoints = Vec::new();
    let mut freeze_records = Vec::new();

    match cfg.train.strategy {
        Strategy::Separate => {
            let mut gen_model = cfg.base.clone();
            let mut und_model = cfg.base.clone();
            let mut on_step = make_on_step();
            let mut after = |epoch: usize, gen: &Model, und: &Model| -> Result<(), TrainError> {
                eval_at(gen, und, gen, epoch, &mut reports)
            };
            freeze_records = train_dsr_separate_with(
                &mut gen_model,
                &mut und_model,
                vocab,
                &data,
                &cfg.train,
                &mut metrics,
                &mut on_step,
                &mut after,
            )?;
            let freeze_json =
                serde_json::to_string_pretty(&freeze_records).expect("records serialize");
            std::fs::write(cfg.out_dir.join("freeze_log.json"), freeze_json)
                .map_err(stage_err("checkpoint"))?;
            final_checkpoints.push(("gen".to_string(), save(&gen_model, "gen_final.ckpt")?));
            final_checkpoints.push(("und".to_string(), save(&und_model, "und_final.ckpt")?));
        }
        _ => {
            let mut model = cfg.base.clone();
            let mut on_step = make_on_step();
            let mut after = |epoch: usize, gen: &Model, und: &Model| -> Result<(), TrainError> {
                eval_at(gen, und, gen, epoch, &mut reports)
            };
            train_dsr_unified_with(
                &mut model,
                vocab,
                &data,
                &cfg.train,
                &mut metrics,
                &mut on_step,
                &mut after,
            )?;
            final_checkpoints.push(("model".to_string(), save(&model, "model_final.ckpt")?));
        }
    }

    let metrics_path = cfg.out_dir.join("metrics.csv");
    metrics.write(&metrics_path).map_err(stage_err("metrics"))?;
    let curves_path = cfg.out_dir.join("curves.csv");
    emit_curves(&reports, &curves_path).map_err(stage_err("curves"))?;

    Ok(RunArtifacts {
        run_id: id,
        reports,
        metrics_path,
        curves_path,
        final_checkpoints,
        freeze_records,
    })
}
