//! Multi-agent Text2SQL engine.
//!
//! A question goes through schema insight (value matching and schema
//! filtering), a planner that proposes candidate queries, two validators, a
//! fix agent and a tournament selection step. Every agent talks to a
//! pluggable [`backend::Backend`]. The [`rlef`] and [`orpo`] modules turn
//! execution feedback into preference pairs and score them, and [`eval`]
//! computes EX, TS and VES.

pub mod agents;
pub mod backend;
pub mod dataset;
pub mod eval;
pub mod executor;
pub mod model;
pub mod orpo;
pub mod pipeline;
pub mod retrieval;
pub mod rlef;

pub use backend::{Backend, BackendError, BackendHandle, GenerationRequest, GenerationResult};
pub use model::{
    ColumnDef, ColumnRef, ExecOutcome, ExecutionResponse, Feedback, FeedbackKind, ForeignKey,
    MatchedValues, NormalizedTable, Origin, QuestionSample, Row, Scalar, SchemaSnapshot,
    ScoredValue, SqlCandidate, TableDef, Verdict,
};
pub use pipeline::{Backends, BenchmarkSummary, Pipeline, PipelineConfig, PipelineResult};
pub use rlef::{AgentKind, PreferencePair};
