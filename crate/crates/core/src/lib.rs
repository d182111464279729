//! Zero-code distributed tracing pipeline.
//!
//! The crate turns syscall-level observations into spans, correlates spans
//! inside a service from their delay patterns, links spans across services
//! through a propagated span id, and assembles the result into traces.
//!
//! * [`model`]: span, event, call-graph and ground-truth types plus their
//!   line-delimited JSON formats.
//! * [`spans`]: the pending-map pairing state machine and span-id propagation.
//! * [`sim`]: synthetic workload generation, re-timing to a target
//!   concurrency, and event emission.
//! * [`stats`]: delay mean estimation, distribution fitting and densities.
//!   Generic over the float type.
//! * [`correlate`]: the four-step cross-thread correlator.
//! * [`reconstruct`]: trace assembly and accuracy scoring.
//! * [`eval`]: baselines, experiment grid and reports.

pub mod correlate;
pub mod eval;
pub mod ids;
pub mod model;
pub mod reconstruct;
pub mod sim;
pub mod spans;
pub mod stats;

pub use correlate::{correlate, Correlation, CorrelatorConfig, ThresholdMode};
pub use model::{
    CallGraph, CandidateAssignment, CorrelationResult, EventRecord, GroundTruth, Protocol, Span,
    SpanId, SpanKind, Syscall, Topology, TraceId,
};
pub use reconstruct::{reconstruct, trace_accuracy, TraceGraph};
pub use sim::{Dataset, WorkloadSpec};
pub use spans::{build_spans, propagate_span_ids};
pub use stats::Real;

/// Delay model over `f64`, the precision the correlator scores with.
pub type DelayModel = stats::DelayModel<f64>;
/// Delay model over `f32`, for compact model caches.
pub type DelayModel32 = stats::DelayModel<f32>;
/// Distribution family parameters over `f64`.
pub type Family = stats::Family<f64>;
