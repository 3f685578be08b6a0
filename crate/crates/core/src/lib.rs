//! duallab: a desk-scale laboratory for dual self-reward training of a
//! unified text↔image model.
//!
//! One small decoder-only transformer learns both directions of a synthetic
//! 3×3 grid world — text→image generation and image→text captioning — and
//! then improves itself without labels: sampled outputs are scored by the
//! reversed conditional likelihood (caption → how well does it regenerate
//! the image; image → how well does it regenerate the prompt), and the
//! model is optimized on those self-rewards with online SimPO or GRPO.
//!
//! Module map:
//! - [`tensor`]: dense arrays + tape autodiff + finite-difference oracle
//! - [`microworld`]: scenes, captions, vocabulary, exact alignment oracle,
//!   dataset generation
//! - [`model`]: the unified transformer, sampling, likelihoods, checkpoints
//! - [`rewards`]: dual self-rewards, candidate groups, preference pairs
//! - [`optim`]: SimPO / GRPO objectives, AdamW, cosine schedule
//! - [`trainer`]: pretraining and the four DSR fine-tuning regimes
//! - [`eval`]: oracle-based benchmark analogs and reports
//!
//! The numeric core is generic over [`scalar::Scalar`]; the lab itself runs
//! in 64-bit floats via the concrete aliases below.

pub mod eval;
pub mod microworld;
pub mod model;
pub mod optim;
pub mod rewards;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

/// Scalar type the lab trains with.
pub type Real = f64;
/// Dense array over [`Real`].
pub type Tensor = tensor::Tensor<Real>;
/// Autodiff tape over [`Real`].
pub type Tape = tensor::Tape<Real>;
/// Named parameter set over [`Real`].
pub type Parameters = tensor::Parameters<Real>;

pub use tensor::Var;
