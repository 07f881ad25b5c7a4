//! Root cause analysis for multi-dimensional KPI metrics.
//!
//! Business metrics are collected per dimension-value combination (e.g.
//! Channel=Search, Region=US) and aggregated along each dimension into a
//! dimension tree whose root carries the monitored KPIs. Derived metrics
//! (rates, ratios) are computed from fundamental metrics by formulas that
//! may be unknown in production. When the monitored root KPI deviates from
//! its forecast, the question is which leaf combinations caused it.
//!
//! The crate provides the full pipeline:
//!
//! - [`tree`]: dimension schemas, node keys and the aggregation tree;
//! - [`formula`]: the arithmetic expression evaluator for derived metrics;
//! - [`panel`]: observed value panels and exact aggregation;
//! - [`ingest`]: CSV/manifest loading and validation;
//! - [`forecast`]: per-node autoregressive expected values and 3-sigma flags;
//! - [`gat`]: a graph-attention model that learns the child→parent metric
//!   relationship from history, trained with manual analytic gradients;
//! - [`localize`]: candidate filtering, genetic search over leaf subsets
//!   with a counterfactual fitness score, and backtrack compaction;
//! - [`synth`]: seeded synthetic benchmark generation with injected
//!   anomalies and ground-truth labels;
//! - [`eval`]: recovery-ratio ground truth, precision/recall/F1 scoring and
//!   an Adtributor-style single-dimension baseline.

pub mod eval;
pub mod forecast;
pub mod formula;
pub mod gat;
pub mod ingest;
pub mod localize;
pub mod panel;
pub mod relation;
pub mod schema;
pub mod synth;
pub mod tree;

#[cfg(test)]
pub(crate) mod testdata;

pub use schema::{AggFn, DimensionSchema, MetricSchema, SchemaError, AGG};
pub use tree::{build_tree, DimensionTree, NodeId, NodeKey, TreeError};
