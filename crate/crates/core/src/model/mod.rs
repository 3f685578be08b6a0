//! The unified autoregressive policy: one decoder-only transformer over the
//! mixed text/vision vocabulary that serves both task directions.
//!
//! Distinct BOS tokens select the task; everything else — weights,
//! embeddings, attention — is shared, which is what makes "unified"
//! optimization strategies meaningful downstream.

mod checkpoint;
mod decoder;
mod sampling;
mod sequence;
mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, RngState, MAGIC};
pub use decoder::IncrementalDecoder;
pub use sampling::{sample_from_logits, sample_target};
pub use sequence::{i2t_sequence, t2i_sequence, Task, TaskSequence};
pub use transformer::{
    avg_ll_on_tape, avg_log_likelihood, forward_logits, forward_on_tape, target_nll_on_tape,
};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{rng_from, tag};
use crate::tensor::TensorError;
use crate::{Parameters, Real, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("task sequence has an empty target segment")]
    EmptyTarget,
    #[error("invalid model state: {0}")]
    Invalid(String),
}

/// Architecture hyperparameters of the desk-scale transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub tie_embeddings: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 48,
            vocab_size: 35,
            tie_embeddings: true,
            init_std: 0.06,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::Invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(ModelError::Invalid(
                "vocab_size and max_seq_len must be positive".to_string(),
            ));
        }
        Ok(())
    }

    /// Parameter layout: (name, shape) in registration order.
    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut names = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.n_layers {
            names.push((format!("l{l}.ln1.g"), vec![d]));
            names.push((format!("l{l}.ln1.b"), vec![d]));
            // No key bias: a uniform key shift cancels in the row softmax,
            // so its gradient would be identically zero.
            for w in ["q", "k", "v", "o"] {
                names.push((format!("l{l}.attn.w{w}"), vec![d, d]));
                if w != "k" {
                    names.push((format!("l{l}.attn.b{w}"), vec![d]));
                }
            }
            names.push((format!("l{l}.ln2.g"), vec![d]));
            names.push((format!("l{l}.ln2.b"), vec![d]));
            names.push((format!("l{l}.ffn.w1"), vec![d, self.d_ff]));
            names.push((format!("l{l}.ffn.b1"), vec![self.d_ff]));
            names.push((format!("l{l}.ffn.w2"), vec![self.d_ff, d]));
            names.push((format!("l{l}.ffn.b2"), vec![d]));
        }
        names.push(("final_ln.g".to_string(), vec![d]));
        names.push(("final_ln.b".to_string(), vec![d]));
        if !self.tie_embeddings {
            names.push(("lm_head".to_string(), vec![self.vocab_size, d]));
        }
        names
    }
}

/// Transformer parameters plus their architecture description.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl Model {
    /// Initializes weights and embeddings from N(0, init_std^2); layer-norm
    /// gains start at 1 and all biases at 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = rng_from(&[seed, tag::INIT]);
        let normal = Normal::new(0.0, config.init_std.max(f64::MIN_POSITIVE))
            .expect("std is positive");
        let mut params = Parameters::new();
        for (name, shape) in config.layout() {
            let n: usize = shape.iter().product();
            let is_gain = name.ends_with(".g");
            let is_bias = name.contains(".b");
            let data: Vec<Real> = if is_gain {
                vec![1.0; n]
            } else if is_bias || config.init_std == 0.0 {
                vec![0.0; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            params.insert(name, Tensor::new(shape, data).expect("layout consistent"));
        }
        Ok(Self { config, params })
    }

    /// All-zero weights and embeddings: every logit row is exactly uniform.
    /// (Layer-norm gains stay at 1; a zero hidden state still normalizes to
    /// zero.) The uniform-reward fixture.
    pub fn zeroed(config: ModelConfig) -> Result<Self, ModelError> {
        Self::init(
            ModelConfig {
                init_std: 0.0,
                ..config
            },
            0,
        )
    }

    /// Rebuilds a model from loaded parameters, verifying the layout.
    pub fn from_parts(config: ModelConfig, params: Parameters) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = config.layout();
        if params.len() != expected.len() {
            return Err(ModelError::Invalid(format!(
                "parameter count {} does not match architecture ({} expected)",
                params.len(),
                expected.len()
            )));
        }
        for (i, (name, shape)) in expected.iter().enumerate() {
            let (got_name, got) = params.at(i);
            if got_name != name || got.shape() != shape.as_slice() {
                return Err(ModelError::Invalid(format!(
                    "parameter {i} is {got_name} {:?}, expected {name} {shape:?}",
                    got.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind<'a>(&'a self, tape: &Tape) -> BoundParams<'a> {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect();
        BoundParams {
            params: &self.params,
            vars,
        }
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }
}

/// Handles of one model's parameters on one tape, in parameter order.
pub struct BoundParams<'a> {
    params: &'a Parameters,
    vars: Vec<Var>,
}

impl<'a> BoundParams<'a> {
    /// Wraps leaf handles created elsewhere (finite-difference checks bind
    /// the leaves themselves). `vars` must align with the parameter order.
    pub fn from_vars(params: &'a Parameters, vars: Vec<Var>) -> Self {
        assert_eq!(params.len(), vars.len(), "one var per parameter");
        Self { params, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[idx]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
