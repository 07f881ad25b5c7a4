//! Observed value panels and exact aggregation.
//!
//! A panel maps (timestamp, node key, metric) to a value. Leaf panels hold
//! fundamental metrics for leaf keys; full panels cover every tree node and
//! all metrics. Cells can be absent (sparse collection), which is distinct
//! from holding a non-finite value. Panels are built single-writer and read
//! concurrently afterwards.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::formula::FormulaError;
use crate::schema::{AggFn, MetricSchema};
use crate::tree::{DimensionTree, NodeKey};

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("incomplete panel: missing {count} leaf cells, first is {first}")]
    IncompleteLeaves { count: usize, first: CellRef },
    #[error("panel does not contain metric `{0}`")]
    UnknownMetric(String),
    #[error("formula error at node {node}, t={t}: {source}")]
    Formula {
        node: NodeKey,
        t: usize,
        source: FormulaError,
    },
}

/// Identifies one (node, metric, timestamp) cell in reports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellRef {
    pub key: NodeKey,
    pub metric: String,
    pub t: usize,
}

impl fmt::Display for CellRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, t={})", self.key, self.metric, self.t)
    }
}

/// Dense (node x metric x timestamp) value store keyed by node keys.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricPanel {
    keys: Vec<NodeKey>,
    index: HashMap<NodeKey, usize>,
    metrics: Vec<String>,
    metric_index: HashMap<String, usize>,
    t_len: usize,
    t_labels: Vec<String>,
    values: Vec<Option<f64>>,
}

impl MetricPanel {
    /// `keys` are deduplicated and sorted so identical contents compare
    /// equal regardless of construction order.
    pub fn new(mut keys: Vec<NodeKey>, metrics: Vec<String>, t_len: usize) -> Self {
        keys.sort();
        keys.dedup();
        let index = keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), i))
            .collect();
        let metric_index = metrics
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        let values = vec![None; keys.len() * metrics.len() * t_len];
        let t_labels = (0..t_len).map(|t| t.to_string()).collect();
        MetricPanel {
            keys,
            index,
            metrics,
            metric_index,
            t_len,
            t_labels,
            values,
        }
    }

    pub fn set_t_labels(&mut self, labels: Vec<String>) {
        assert_eq!(labels.len(), self.t_len);
        self.t_labels = labels;
    }

    pub fn t_labels(&self) -> &[String] {
        &self.t_labels
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn keys(&self) -> &[NodeKey] {
        &self.keys
    }

    pub fn metrics(&self) -> &[String] {
        &self.metrics
    }

    pub fn metric_index(&self, name: &str) -> Option<usize> {
        self.metric_index.get(name).copied()
    }

    pub fn key_index(&self, key: &NodeKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    fn slot(&self, node: usize, metric: usize, t: usize) -> usize {
        debug_assert!(node < self.keys.len() && metric < self.metrics.len() && t < self.t_len);
        (node * self.metrics.len() + metric) * self.t_len + t
    }

    pub fn get_by_index(&self, node: usize, metric: usize, t: usize) -> Option<f64> {
        self.values[self.slot(node, metric, t)]
    }

    pub fn set_by_index(&mut self, node: usize, metric: usize, t: usize, v: f64) {
        let slot = self.slot(node, metric, t);
        self.values[slot] = Some(v);
    }

    pub fn get(&self, key: &NodeKey, metric: &str, t: usize) -> Option<f64> {
        let n = self.key_index(key)?;
        let m = self.metric_index(metric)?;
        self.get_by_index(n, m, t)
    }

    pub fn set(&mut self, key: &NodeKey, metric: &str, t: usize, v: f64) {
        let n = self
            .key_index(key)
            .unwrap_or_else(|| panic!("unknown key {key}"));
        let m = self
            .metric_index(metric)
            .unwrap_or_else(|| panic!("unknown metric {metric}"));
        self.set_by_index(n, m, t, v);
    }

    /// The full time series of one cell (holes preserved).
    pub fn series(&self, node: usize, metric: usize) -> Vec<Option<f64>> {
        (0..self.t_len)
            .map(|t| self.get_by_index(node, metric, t))
            .collect()
    }
}

/// What aggregation skipped or patched; see the missing-data policy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AggregateWarnings {
    /// Missing leaf/child cells treated as 0 under SUM.
    pub sum_patched: usize,
    /// Missing child cells excluded from MEAN denominators.
    pub mean_excluded: usize,
}

impl AggregateWarnings {
    pub fn total(&self) -> usize {
        self.sum_patched + self.mean_excluded
    }
}

/// Missing-leaf handling for [`aggregate_panel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingPolicy {
    /// Any missing leaf fundamental is an error.
    Strict,
    /// Missing values count as 0 for SUM and are excluded for MEAN, with a
    /// per-run warning count.
    Tolerate,
}

/// Fill every non-leaf node's fundamental metrics by the configured
/// aggregation over its children (bottom-up), then compute derived metrics
/// at every node from that node's fundamentals. Derived metrics are never
/// aggregated directly.
pub fn aggregate_panel(
    leaf_panel: &MetricPanel,
    tree: &DimensionTree,
    metrics: &MetricSchema,
    policy: MissingPolicy,
) -> Result<(MetricPanel, AggregateWarnings), PanelError> {
    let p = metrics.num_fundamentals();
    let t_len = leaf_panel.t_len();
    let fundamental_names: Vec<&str> = metrics.fundamentals().map(|(n, _)| n).collect();
    let leaf_metric_ids: Vec<usize> = fundamental_names
        .iter()
        .map(|n| {
            leaf_panel
                .metric_index(n)
                .ok_or_else(|| PanelError::UnknownMetric(n.to_string()))
        })
        .collect::<Result<_, _>>()?;

    if policy == MissingPolicy::Strict {
        let mut count = 0;
        let mut first = None;
        for &leaf in tree.leaves() {
            let key = tree.key(leaf);
            let Some(node) = leaf_panel.key_index(key) else {
                count += t_len * p;
                first.get_or_insert_with(|| CellRef {
                    key: key.clone(),
                    metric: fundamental_names[0].to_string(),
                    t: 0,
                });
                continue;
            };
            for (fi, &m) in leaf_metric_ids.iter().enumerate() {
                for t in 0..t_len {
                    if leaf_panel.get_by_index(node, m, t).is_none() {
                        count += 1;
                        first.get_or_insert_with(|| CellRef {
                            key: key.clone(),
                            metric: fundamental_names[fi].to_string(),
                            t,
                        });
                    }
                }
            }
        }
        if let Some(first) = first {
            return Err(PanelError::IncompleteLeaves { count, first });
        }
    }

    let mut warnings = AggregateWarnings::default();
    let all_metrics = metrics.metric_names();
    let mut full = MetricPanel::new(
        (0..tree.num_nodes()).map(|id| tree.key(id).clone()).collect(),
        all_metrics,
        t_len,
    );
    full.set_t_labels(leaf_panel.t_labels().to_vec());

    // leaf fundamentals copy
    for &leaf in tree.leaves() {
        let key = tree.key(leaf);
        let dst = full.key_index(key).expect("leaf in full panel");
        let src = leaf_panel.key_index(key);
        for (fi, &m) in leaf_metric_ids.iter().enumerate() {
            for t in 0..t_len {
                let v = src.and_then(|n| leaf_panel.get_by_index(n, m, t));
                match v {
                    Some(v) => full.set_by_index(dst, fi, t, v),
                    None => warnings.sum_patched += usize::from(
                        metrics.agg_fn(fi) == AggFn::Sum,
                    ),
                }
            }
        }
    }

    // bottom-up fundamental aggregation over tree children
    for id in tree.internal_bottom_up() {
        let dst = full.key_index(tree.key(id)).unwrap();
        for fi in 0..p {
            let agg = metrics.agg_fn(fi);
            for t in 0..t_len {
                let mut sum = 0.0;
                let mut present = 0usize;
                for &child in tree.children(id) {
                    let c = full.key_index(tree.key(child)).unwrap();
                    match full.get_by_index(c, fi, t) {
                        Some(v) => {
                            sum += v;
                            present += 1;
                        }
                        None => match agg {
                            // missing leaves were already counted above;
                            // internal holes only arise under MEAN
                            AggFn::Sum => {}
                            AggFn::Mean => warnings.mean_excluded += 1,
                        },
                    }
                }
                match agg {
                    AggFn::Sum => full.set_by_index(dst, fi, t, sum),
                    AggFn::Mean => {
                        if present > 0 {
                            full.set_by_index(dst, fi, t, sum / present as f64);
                        }
                    }
                }
            }
        }
    }

    // derived metrics at every node, from that node's own fundamentals
    for id in 0..tree.num_nodes() {
        let node = full.key_index(tree.key(id)).unwrap();
        for t in 0..t_len {
            let fundamentals: Option<Vec<f64>> =
                (0..p).map(|fi| full.get_by_index(node, fi, t)).collect();
            let Some(fundamentals) = fundamentals else {
                continue;
            };
            let derived = metrics
                .eval_derived(&fundamentals)
                .map_err(|source| PanelError::Formula {
                    node: tree.key(id).clone(),
                    t,
                    source,
                })?;
            for (qi, v) in derived.into_iter().enumerate() {
                full.set_by_index(node, p + qi, t, v);
            }
        }
    }

    Ok((full, warnings))
}

/// Read-only completeness and sanity check.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub missing: Vec<CellRef>,
    pub non_finite: Vec<CellRef>,
    /// Present cells over expected cells (leaves x fundamentals x T).
    pub coverage: f64,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.missing.is_empty() && self.non_finite.is_empty()
    }
}

/// List missing (node, metric, timestamp) triples and non-finite values for
/// the leaf fundamentals the tree expects.
pub fn validate_panel(
    panel: &MetricPanel,
    tree: &DimensionTree,
    metrics: &MetricSchema,
) -> ValidationReport {
    let mut report = ValidationReport::default();
    let t_len = panel.t_len();
    let names: Vec<&str> = metrics.fundamentals().map(|(n, _)| n).collect();
    let mut expected = 0usize;
    let mut present = 0usize;
    for &leaf in tree.leaves() {
        let key = tree.key(leaf);
        let node = panel.key_index(key);
        for name in &names {
            let m = panel.metric_index(name);
            for t in 0..t_len {
                expected += 1;
                let v = node
                    .zip(m)
                    .and_then(|(n, m)| panel.get_by_index(n, m, t));
                match v {
                    None => report.missing.push(CellRef {
                        key: key.clone(),
                        metric: name.to_string(),
                        t,
                    }),
                    Some(v) if !v.is_finite() => {
                        present += 1;
                        report.non_finite.push(CellRef {
                            key: key.clone(),
                            metric: name.to_string(),
                            t,
                        });
                    }
                    Some(_) => present += 1,
                }
            }
        }
    }
    report.coverage = if expected == 0 {
        1.0
    } else {
        present as f64 / expected as f64
    };
    report
}
