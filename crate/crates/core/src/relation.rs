//! The child-to-parent metric relationship used for counterfactual
//! propagation, as a trait so the localizer works against either the
//! learned model or an exact stand-in when aggregation is known.

use thiserror::Error;

use crate::formula::FormulaError;
use crate::schema::{AggFn, MetricSchema};
use crate::tree::{DimensionTree, NodeKey};

#[derive(Debug, Error)]
pub enum RelationError {
    #[error("expected {want} leaf input rows, got {got}")]
    WrongLeafCount { want: usize, got: usize },
    #[error("expected {want} fundamentals per leaf, got {got}")]
    WrongFeatureCount { want: usize, got: usize },
    #[error("formula error at node {node}: {source}")]
    Formula { node: NodeKey, source: FormulaError },
    #[error("model expects schema fingerprint {want:#x}, data has {got:#x}")]
    SchemaMismatch { want: u64, got: u64 },
}

/// Fundamental metric values per leaf, ordered as [`DimensionTree::leaves`].
#[derive(Debug, Clone, PartialEq)]
pub struct LeafValues {
    pub rows: Vec<Vec<f64>>,
}

impl LeafValues {
    pub fn new(rows: Vec<Vec<f64>>) -> Self {
        LeafValues { rows }
    }
}

/// Per-node predictions (fundamentals then deriveds), indexed by node id.
/// Leaves are not predicted and hold `None`.
#[derive(Debug, Clone)]
pub struct NodePredictions {
    pub values: Vec<Option<Vec<f64>>>,
}

impl NodePredictions {
    pub fn root(&self) -> &[f64] {
        self.values[0].as_deref().expect("root is always predicted")
    }
}

/// Maps leaf fundamentals to predicted metrics of every internal node,
/// composed level by level up to the root.
pub trait Relationship {
    /// Bottom-up prediction for every non-leaf node.
    fn propagate(
        &self,
        tree: &DimensionTree,
        leaves: &LeafValues,
    ) -> Result<NodePredictions, RelationError>;

    /// Importance of each leaf to the root, normalized to sum to 1 over
    /// leaves (same order as `tree.leaves()`).
    fn leaf_importance(
        &self,
        tree: &DimensionTree,
        leaves: &LeafValues,
    ) -> Result<Vec<f64>, RelationError>;
}

/// Exact stand-in: aggregates fundamentals with the schema's SUM/MEAN
/// choices and applies the derived formulas, i.e. the true relationship
/// when it is known (synthetic data, ground-truth construction).
#[derive(Debug, Clone)]
pub struct OracleModel {
    metrics: MetricSchema,
}

impl OracleModel {
    pub fn new(metrics: MetricSchema) -> Self {
        OracleModel { metrics }
    }

    pub fn metrics(&self) -> &MetricSchema {
        &self.metrics
    }
}

fn check_leaves(
    tree: &DimensionTree,
    leaves: &LeafValues,
    p: usize,
) -> Result<(), RelationError> {
    if leaves.rows.len() != tree.leaves().len() {
        return Err(RelationError::WrongLeafCount {
            want: tree.leaves().len(),
            got: leaves.rows.len(),
        });
    }
    for row in &leaves.rows {
        if row.len() != p {
            return Err(RelationError::WrongFeatureCount {
                want: p,
                got: row.len(),
            });
        }
    }
    Ok(())
}

impl Relationship for OracleModel {
    fn propagate(
        &self,
        tree: &DimensionTree,
        leaves: &LeafValues,
    ) -> Result<NodePredictions, RelationError> {
        let p = self.metrics.num_fundamentals();
        check_leaves(tree, leaves, p)?;
        let mut fundamentals: Vec<Option<Vec<f64>>> = vec![None; tree.num_nodes()];
        for (pos, &leaf) in tree.leaves().iter().enumerate() {
            fundamentals[leaf] = Some(leaves.rows[pos].clone());
        }
        for id in tree.internal_bottom_up() {
            let mut agg = vec![0.0; p];
            let n = tree.children(id).len() as f64;
            for &child in tree.children(id) {
                let cv = fundamentals[child].as_ref().expect("bottom-up order");
                for (a, v) in agg.iter_mut().zip(cv) {
                    *a += v;
                }
            }
            for (fi, a) in agg.iter_mut().enumerate() {
                if self.metrics.agg_fn(fi) == AggFn::Mean {
                    *a /= n;
                }
            }
            fundamentals[id] = Some(agg);
        }

        let mut values: Vec<Option<Vec<f64>>> = vec![None; tree.num_nodes()];
        for id in 0..tree.num_nodes() {
            if tree.is_leaf(id) {
                continue;
            }
            let f = fundamentals[id].as_ref().unwrap();
            let derived =
                self.metrics
                    .eval_derived(f)
                    .map_err(|source| RelationError::Formula {
                        node: tree.key(id).clone(),
                        source,
                    })?;
            let mut row = f.clone();
            row.extend(derived);
            values[id] = Some(row);
        }
        Ok(NodePredictions { values })
    }

    fn leaf_importance(
        &self,
        tree: &DimensionTree,
        leaves: &LeafValues,
    ) -> Result<Vec<f64>, RelationError> {
        check_leaves(tree, leaves, self.metrics.num_fundamentals())?;
        let n = tree.leaves().len();
        Ok(vec![1.0 / n as f64; n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{aggregate_panel, MetricPanel, MissingPolicy};
    use crate::schema::DimensionSchema;
    use crate::tree::build_tree;
    use std::collections::BTreeSet;

    #[test]
    fn oracle_matches_exact_aggregation() {
        let schema = DimensionSchema::new(
            vec!["d1".into(), "d2".into()],
            vec![
                vec!["x1".into(), "x2".into()],
                vec!["y1".into(), "y2".into(), "y3".into()],
            ],
        )
        .unwrap();
        let metrics = MetricSchema::new(
            vec![("b".into(), AggFn::Sum), ("c".into(), AggFn::Sum)],
            vec![("a".into(), "sqrt(c)".into()), ("d".into(), "a / b".into())],
        )
        .unwrap();
        let mut keys = BTreeSet::new();
        for x in ["x1", "x2"] {
            for y in ["y1", "y2", "y3"] {
                keys.insert(crate::tree::NodeKey::leaf(vec![x, y]));
            }
        }
        let tree = build_tree(&schema, &keys).unwrap();
        let mut panel = MetricPanel::new(
            keys.iter().cloned().collect(),
            vec!["b".into(), "c".into()],
            1,
        );
        for (i, key) in keys.iter().enumerate() {
            panel.set(key, "b", 0, 2.0 + i as f64);
            panel.set(key, "c", 0, 10.0 + (i as f64) * 3.0);
        }
        let (full, _) = aggregate_panel(&panel, &tree, &metrics, MissingPolicy::Strict).unwrap();

        let oracle = OracleModel::new(metrics.clone());
        let rows: Vec<Vec<f64>> = tree
            .leaves()
            .iter()
            .map(|&l| {
                vec![
                    full.get(tree.key(l), "b", 0).unwrap(),
                    full.get(tree.key(l), "c", 0).unwrap(),
                ]
            })
            .collect();
        let pred = oracle.propagate(&tree, &LeafValues::new(rows)).unwrap();
        for id in 0..tree.num_nodes() {
            if tree.is_leaf(id) {
                assert!(pred.values[id].is_none());
                continue;
            }
            let row = pred.values[id].as_ref().unwrap();
            for (mi, name) in metrics.metric_names().iter().enumerate() {
                let want = full.get(tree.key(id), name, 0).unwrap();
                assert!(
                    (row[mi] - want).abs() <= 1e-12 * want.abs().max(1.0),
                    "node {} metric {name}: {} vs {}",
                    tree.key(id),
                    row[mi],
                    want
                );
            }
        }
        let imp = oracle
            .leaf_importance(&tree, &LeafValues::new(vec![vec![0.0; 2]; 6]))
            .unwrap();
        assert_eq!(imp, vec![1.0 / 6.0; 6]);
    }
}
