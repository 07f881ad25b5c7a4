//! Evaluation: recovery-ratio ground truth, precision/recall/F1 scoring,
//! and a single-dimension attribution baseline.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::forecast::ForecastBundle;
use crate::localize::{CaseData, LocalizeError, EPS_ANOMALY};
use crate::panel::MetricPanel;
use crate::relation::{LeafValues, OracleModel, RelationError, Relationship};
use crate::schema::{AggFn, MetricSchema};
use crate::tree::{DimensionTree, NodeKey};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Localize(#[from] LocalizeError),
    #[error(transparent)]
    Relation(#[from] RelationError),
    #[error("missing {0}")]
    MissingData(String),
}

/// Set-comparison scores. Aggregated nodes are expanded to leaf sets
/// before counting, so backtracked outputs compare against leaf truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EvalReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        EvalReport {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

fn expand_to_leaves(set: &BTreeSet<NodeKey>, tree: &DimensionTree) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    for key in set {
        for leaf in tree.lattice_leaf_descendants(key) {
            out.insert(leaf);
        }
    }
    out
}

/// Precision/recall/F1 between predicted and true node sets.
pub fn prf1(
    predicted: &BTreeSet<NodeKey>,
    truth: &BTreeSet<NodeKey>,
    tree: &DimensionTree,
) -> EvalReport {
    let p = expand_to_leaves(predicted, tree);
    let t = expand_to_leaves(truth, tree);
    let tp = p.intersection(&t).count();
    let fp = p.difference(&t).count();
    let fn_ = t.difference(&p).count();
    EvalReport::from_counts(tp, fp, fn_)
}

/// Sum TP/FP/FN over per-case reports and recompute the rates.
pub fn aggregate_reports<'a>(reports: impl IntoIterator<Item = &'a EvalReport>) -> EvalReport {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for r in reports {
        tp += r.tp;
        fp += r.fp;
        fn_ += r.fn_;
    }
    EvalReport::from_counts(tp, fp, fn_)
}

/// Individual recovery ratio of every leaf: replace that leaf's
/// fundamentals with forecasts, recompute the root by exact aggregation,
/// and measure how much of the root deviation disappears. Sorted best
/// first (ties: larger absolute fundamental deviation, then key).
pub fn individual_recoveries(
    tree: &DimensionTree,
    metrics: &MetricSchema,
    panel: &MetricPanel,
    forecasts: &ForecastBundle,
    monitored: &str,
    t: usize,
) -> Result<Vec<(NodeKey, f64)>, EvalError> {
    let data = CaseData::from_panels(tree, metrics, panel, forecasts, monitored, t)?;
    let oracle = OracleModel::new(metrics.clone());
    let deviation = data.root_deviation();
    if deviation <= EPS_ANOMALY {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(tree.leaves().len());
    for (pos, &leaf) in tree.leaves().iter().enumerate() {
        let mut rows = data.leaf_real.clone();
        rows[pos] = data.leaf_forecast[pos].clone();
        let pred = oracle.propagate(tree, &LeafValues::new(rows))?;
        let recovered = pred.root()[data.monitored_out];
        let recovery = 1.0 - (recovered - data.f_root).abs() / deviation;
        out.push((tree.key(leaf).clone(), recovery));
    }
    let abs_dev = |key: &NodeKey| -> f64 {
        let pos = tree
            .leaf_position(tree.node_id(key).unwrap())
            .unwrap();
        data.leaf_real[pos]
            .iter()
            .zip(&data.leaf_forecast[pos])
            .map(|(v, f)| (v - f).abs())
            .fold(0.0, f64::max)
    };
    out.sort_by(|(ka, ra), (kb, rb)| {
        rb.partial_cmp(ra)
            .unwrap()
            .then_with(|| abs_dev(kb).partial_cmp(&abs_dev(ka)).unwrap())
            .then_with(|| ka.cmp(kb))
    });
    Ok(out)
}

/// Ground truth by cumulative recovery: greedily add leaves in descending
/// individual recovery, jointly recomputing the recovered root, and keep
/// the shortest prefix whose cumulative recovery reaches `threshold` of
/// the best cumulative recovery any prefix achieves. The relative cut
/// matters because the root's own forecast need not equal the aggregate of
/// leaf forecasts, which caps achievable recovery below 1. Leaves that
/// cannot improve recovery (non-positive individual ratio) are skipped.
/// Returns the empty set when the root shows no anomaly.
pub fn ground_truth(
    tree: &DimensionTree,
    metrics: &MetricSchema,
    panel: &MetricPanel,
    forecasts: &ForecastBundle,
    monitored: &str,
    t: usize,
    threshold: f64,
) -> Result<BTreeSet<NodeKey>, EvalError> {
    let ranked = individual_recoveries(tree, metrics, panel, forecasts, monitored, t)?;
    if ranked.is_empty() {
        return Ok(BTreeSet::new());
    }
    let data = CaseData::from_panels(tree, metrics, panel, forecasts, monitored, t)?;
    let oracle = OracleModel::new(metrics.clone());
    let deviation = data.root_deviation();

    let mut prefix: Vec<NodeKey> = Vec::new();
    let mut cumulative: Vec<f64> = Vec::new();
    let mut rows = data.leaf_real.clone();
    for (key, individual) in ranked {
        if individual <= 0.0 {
            break;
        }
        let pos = tree.leaf_position(tree.node_id(&key).unwrap()).unwrap();
        rows[pos] = data.leaf_forecast[pos].clone();
        prefix.push(key);
        let pred = oracle.propagate(tree, &LeafValues::new(rows.clone()))?;
        let recovered = pred.root()[data.monitored_out];
        cumulative.push(1.0 - (recovered - data.f_root).abs() / deviation);
    }
    let best = cumulative.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if best.is_nan() || best <= 0.0 {
        return Ok(BTreeSet::new());
    }
    let cut = threshold * best.min(1.0);
    let take = cumulative.iter().position(|&c| c >= cut).map(|i| i + 1);
    Ok(prefix
        .into_iter()
        .take(take.unwrap_or(0))
        .collect())
}

/// Jensen-Shannon divergence in nats with additive smoothing on zero
/// cells. Symmetric, nonnegative, zero iff the distributions match.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| js_term(pi, qi))
        .sum()
}

const JS_SMOOTHING: f64 = 1e-12;

/// One value's contribution to the JS divergence.
fn js_term(p: f64, q: f64) -> f64 {
    let p = p.max(JS_SMOOTHING);
    let q = q.max(JS_SMOOTHING);
    let m = 0.5 * (p + q);
    0.5 * (p * (p / m).ln() + q * (q / m).ln())
}

/// Thresholds for the single-dimension attribution baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdtributorConfig {
    /// Minimum explanatory power for a value to enter a candidate set.
    pub t_eep: f64,
    /// Cumulative explanatory power at which accumulation stops.
    pub t_ep: f64,
}

impl Default for AdtributorConfig {
    fn default() -> Self {
        AdtributorConfig {
            t_eep: 0.3,
            t_ep: 0.8,
        }
    }
}

/// Single-dimension attribution over the monitored metric: per dimension,
/// values are ranked by their Jensen-Shannon surprise between the
/// normalized real and forecast distributions and accumulated (while their
/// explanatory power clears `t_eep`) until cumulative explanatory power
/// reaches `t_ep`; the dimension with the largest accumulated surprise is
/// reported as single-dimension nodes. Degenerate (non-positive-mass)
/// distributions produce an empty result with a warning.
pub fn adtributor(
    tree: &DimensionTree,
    metrics: &MetricSchema,
    panel: &MetricPanel,
    forecasts: &ForecastBundle,
    monitored: &str,
    t: usize,
    config: &AdtributorConfig,
) -> Result<(BTreeSet<NodeKey>, Vec<String>), EvalError> {
    let data = CaseData::from_panels(tree, metrics, panel, forecasts, monitored, t)?;
    let mut warnings = Vec::new();
    if data.root_deviation() <= EPS_ANOMALY {
        return Ok((BTreeSet::new(), warnings));
    }
    let schema = tree.schema();
    let p = metrics.num_fundamentals();
    let monitored_out = data.monitored_out;

    // marginal of the monitored metric for one dimension value, from leaf
    // values (works for lattice slices the panel does not store)
    let marginal = |rows: &[Vec<f64>], dim: usize, value: &str| -> Option<f64> {
        let mut agg = vec![0.0; p];
        let mut count = 0usize;
        for (pos, &leaf) in tree.leaves().iter().enumerate() {
            if tree.key(leaf).entry(dim) == Some(value) {
                for (a, v) in agg.iter_mut().zip(&rows[pos]) {
                    *a += v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return None;
        }
        for (fi, a) in agg.iter_mut().enumerate() {
            if metrics.agg_fn(fi) == AggFn::Mean {
                *a /= count as f64;
            }
        }
        if monitored_out < p {
            Some(agg[monitored_out])
        } else {
            metrics
                .eval_derived(&agg)
                .ok()
                .map(|d| d[monitored_out - p])
        }
    };

    struct DimCandidate {
        surprise: f64,
        reached: bool,
        nodes: Vec<NodeKey>,
    }

    let mut best: Option<DimCandidate> = None;
    for dim in 0..schema.num_dims() {
        let values = schema.values_of(dim);
        let mut real = Vec::with_capacity(values.len());
        let mut fc = Vec::with_capacity(values.len());
        for value in values {
            let (Some(v), Some(f)) = (
                marginal(&data.leaf_real, dim, value),
                marginal(&data.leaf_forecast, dim, value),
            ) else {
                continue;
            };
            real.push((value.clone(), v, f));
            fc.push(f);
        }
        let v_sum: f64 = real.iter().map(|(_, v, _)| v).sum();
        let f_sum: f64 = fc.iter().sum();
        if v_sum <= 0.0 || f_sum <= 0.0 {
            warnings.push(format!(
                "dimension `{}`: degenerate distribution, skipped",
                schema.dim_names()[dim]
            ));
            continue;
        }
        let mut scored: Vec<(String, f64, f64)> = real
            .iter()
            .map(|(value, v, f)| {
                let surprise = js_term(v / v_sum, f / f_sum);
                let ep = (v - f) / (data.v_root - data.f_root);
                (value.clone(), surprise, ep)
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        let mut taken = Vec::new();
        let mut surprise = 0.0;
        let mut cum_ep = 0.0;
        let mut reached = false;
        for (value, s, ep) in scored {
            if ep < config.t_eep {
                continue;
            }
            cum_ep += ep;
            surprise += s;
            taken.push(value);
            if cum_ep >= config.t_ep {
                reached = true;
                break;
            }
        }
        if taken.is_empty() {
            continue;
        }
        let nodes: Vec<NodeKey> = taken
            .into_iter()
            .map(|value| {
                NodeKey::new(
                    (0..schema.num_dims())
                        .map(|d| (d == dim).then(|| value.clone()))
                        .collect(),
                )
            })
            .collect();
        let candidate = DimCandidate {
            surprise,
            reached,
            nodes,
        };
        let better = match &best {
            None => true,
            Some(b) => {
                (candidate.reached, candidate.surprise) > (b.reached, b.surprise)
            }
        };
        if better {
            best = Some(candidate);
        }
    }
    match best {
        Some(b) => Ok((b.nodes.into_iter().collect(), warnings)),
        None => {
            warnings.push("no dimension produced a candidate set".into());
            Ok((BTreeSet::new(), warnings))
        }
    }
}
