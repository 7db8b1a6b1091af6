//! Deterministic synchronous data-parallel training on virtual nodes.
//!
//! Every iteration each node computes a minibatch gradient on its own
//! weight copy, compresses it (or not), the updates are summed, and every
//! node applies the same global step. Per-node work runs in parallel; the
//! result does not depend on the thread count.

pub mod allreduce;
pub mod config;
pub mod data;
pub mod model;
pub mod trace;
pub mod train;

pub use allreduce::{allreduce_dense, allreduce_sparse, AggregationStats};
pub use config::{Algorithm, LrSchedule, ModelKind, ModelSpec, TimingModel, TrainConfig};
pub use data::{epoch_permutation, sample_minibatch};
pub use model::{build_model, grad, LogisticRegression, Model, QuadraticBowl, TinyMlp};
pub use trace::{IterationRecord, MetricsTrace, TRACE_CSV_HEADER};
pub use train::{train, train_model, Divergence, GlobalRule, TrainReport};
