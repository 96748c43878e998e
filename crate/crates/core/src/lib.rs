//! Uncertainty scores for language-model answers from how much the
//! model's token distributions move when the prompt is rephrased or
//! perturbed without changing its meaning.
//!
//! The numeric core ([`metrics`], [`scoring`], [`eval`]) is generic over
//! [`Scalar`] (`f32` or `f64`); the aliases below fix the precision.
//! Backends, trace files and the pipeline work in `f64`.

pub mod backend;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod intervene;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod scoring;
pub mod synth;
pub mod token;

pub use config::{EsiConfig, InterventionMethod, Metric, Normalization, Smoothing, Weighting};
pub use eval::{auroc, EvalReport, TrialConfig};
pub use metrics::{align_supports, distance, entropy, truncate_topk, AlignedPair, TruncatedDistribution};
pub use scalar::Scalar;
pub use scoring::{esi_score, ln_pe_score, ScoreRecord, SampledTrace, TokenTrace};
pub use token::Token;

pub type TruncatedDistributionF64 = TruncatedDistribution<f64>;
pub type TruncatedDistributionF32 = TruncatedDistribution<f32>;
pub type AlignedPairF64 = AlignedPair<f64>;
pub type AlignedPairF32 = AlignedPair<f32>;
pub type TokenTraceF64 = TokenTrace<f64>;
pub type TokenTraceF32 = TokenTrace<f32>;
pub type SampledTraceF64 = SampledTrace<f64>;
pub type SampledTraceF32 = SampledTrace<f32>;
pub type QueryTracesF64 = eval::QueryTraces<f64>;
pub type QueryTracesF32 = eval::QueryTraces<f32>;
