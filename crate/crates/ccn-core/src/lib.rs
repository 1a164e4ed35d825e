//! Collaborative contrastive CTR prediction for trigger-induced recommendation.
//!
//! The crate is a self-contained, desk-scale training stack:
//!
//! - [`graph`]: a dense reverse-mode autodiff tape over `f64` vectors and
//!   matrices, rebuilt per sample, with a central-difference gradient checker.
//! - [`adagrad`]: the AdaGrad optimizer with a per-parameter accumulator.
//! - [`data`]: impression pages, training samples, and the tab-separated
//!   dataset file format.
//! - [`embedding`]: hashed embedding tables and per-sample tensor assembly.
//! - [`attention`]: multi-head target attention and the category-filtered
//!   long-sequence search producing the sequence-interaction block.
//! - [`contrastive`]: collaborative degrees, context-set division,
//!   importance-sampled repulsion/attraction losses, and the pair-label prior.
//! - [`model`]: the full prediction network, its ablation variants, and the
//!   per-sample loss graph builder.
//! - [`checkpoint`]: a versioned binary container for model parameters.
//! - [`synth`]: a seeded synthetic impression-page generator with known
//!   ground-truth click probabilities.
//! - [`train`]: the mini-batch training loop, AUC evaluation, the ablation
//!   grid, and the batch-level gradient check.
//!
//! Everything is deterministic given a seed: the same inputs produce
//! bit-identical parameters, losses, and metrics files.

pub mod adagrad;
pub mod attention;
pub mod checkpoint;
pub mod contrastive;
pub mod data;
pub mod embedding;
pub mod graph;
pub(crate) mod kernels;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod synth;
pub mod train;

pub use adagrad::AdaGradState;
pub use contrastive::{ContextSplit, HyperParams, PairPrior};
pub use data::{BehaviorSequence, ImpressionPage, ItemFeatures, TrainingSample, UserProfile};
pub use graph::{Bindings, Evaluation, GradStore, Graph, NodeId, Value};
pub use metrics::compute_auc;
pub use model::{ModelParams, ModelSchema, ModelVariant};
pub use rng::Rng64;
pub use synth::WorldSpec;
pub use train::{MetricsReport, TrainConfig, TrainOutcome};
