//! Temporal causal discovery from multivariate time series.
//!
//! The pipeline trains one small forecasting network per target series
//! (dilated causal convolutions plus sparse self-attention over time), then
//! reads candidate causes off the channel-attention weights, validates each
//! candidate with a permutation test, and estimates the interaction delay
//! from the convolution kernels.

pub mod data;
pub mod discovery;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod training;

pub use data::{Dataset, SynthSpec, TruthEdge};
pub use discovery::{CausalEdge, CausalGraph, ShuffleOutcome, TargetFindings};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use model::{AttentionRecord, BlockParams, Checkpoint, ModelParams, NormKind};
pub use pipeline::PipelineOutcome;
pub use tensor::{Tape, Tensor2, Var};
pub use training::{AdamState, RunConfig, TrainReport};
