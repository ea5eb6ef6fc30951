//! Temporal-difference processing for quantized diffusion-model inference,
//! together with a cycle/energy/memory cost model of the Ditto accelerator
//! and its baselines.
//!
//! The crate is organized around the pipeline the CLI drives:
//!
//! * [`refmodel`] builds deterministic toy denoising models and runs an
//!   iterative sampler, producing per-step per-layer activation traces.
//! * [`qtensor`] holds the quantized tensor types and the exact integer
//!   reference kernels every other path is checked against.
//! * [`diffengine`] computes temporal/spatial differences, classifies them
//!   into zero/low/full bit-width classes, and executes linear layers in the
//!   difference domain with bit-exact results.
//! * [`flow`] analyzes the layer graph for difference-domain regions and
//!   implements the Defo runtime execution-flow decision table.
//! * [`hwsim`] costs a run (cycles, memory traffic, energy, BOPs) under a
//!   hardware preset, and [`driver`] ties trace + plan + hardware together.
//! * [`metrics`] reproduces the motivating similarity/range/bit-width
//!   analyses over a trace.

pub mod diffengine;
pub mod driver;
pub mod flow;
pub mod graph;
pub mod hwsim;
pub mod kernel;
pub mod metrics;
pub mod qtensor;
pub mod refmodel;
pub mod rng;
pub mod tensor;
pub mod trace;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("non-finite element at index {index}: {value}")]
    NonFinite { index: usize, value: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("quantization scale mismatch: {0} vs {1}")]
    ScaleMismatch(f64, f64),
    #[error("reduction length {0} could overflow 32-bit accumulation (limit {1})")]
    ReductionTooLong(usize, usize),
    #[error("delta {0} out of representable range [-254, 254]")]
    DeltaOutOfRange(i64),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid sampler config: {0}")]
    InvalidSampler(String),
    #[error("non-finite value at step {step}, layer {layer}")]
    NonFiniteTrace { step: usize, layer: u32 },
    #[error("trace format error: {0}")]
    TraceFormat(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("defo table error: {0}")]
    Defo(String),
    #[error("cross-attention context changed between steps at layer {0}; fall back to diff_attention_scores")]
    ContextChanged(u32),
    #[error("missing previous-step operand: {0}")]
    MissingPrev(String),
    #[error("hardware config error: {0}")]
    HwConfig(String),
    #[error("plan/trace mismatch: {0}")]
    PlanMismatch(String),
    #[error("bit-exactness self-check failed at step {step}, layer {layer}")]
    ExactnessViolation { step: usize, layer: u32 },
}

pub type Result<T> = std::result::Result<T, Error>;
