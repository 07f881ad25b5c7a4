//! Seeded synthetic benchmark datasets with injected anomalies and
//! ground-truth labels.
//!
//! Two fundamental metrics `b` and `c` are drawn per leaf (a uniform base
//! level plus small per-timestamp jitter, so autoregression has something
//! to learn), two derived metrics are computed everywhere: `a = g(c)` and
//! `d = f(a, b)`, with `f` one of five formulas of increasing nastiness
//! and `g` drawn from a compatible transform set. Fundamentals aggregate
//! by SUM; deriveds are recomputed from each node's own fundamentals.
//! Anomalies are multiplicative shifts injected into leaf fundamentals at
//! selected timestamps; everything is a pure function of the seed.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::path::Path;

use thiserror::Error;

use crate::ingest::{self, DatasetManifest, IngestError};
use crate::panel::{aggregate_panel, MetricPanel, MissingPolicy, PanelError};
use crate::schema::{AggFn, DimensionSchema, MetricSchema, SchemaError};
use crate::tree::{build_tree, DimensionTree, NodeKey, TreeError};

/// The five derived-metric formulas selectable by `f_index`.
pub const F_FORMULAS: [&str; 5] = [
    "a / b",
    "a * b",
    "log(a) / log(b)",
    "a * exp(b)",
    "log(a + 1) / log(b + 1)",
];

/// The transform pool for `a = g(c)`.
pub const G_FORMULAS: [&str; 5] = ["c", "sin(c)", "exp(c)", "c ^ 2", "sqrt(c)"];

/// Cap on root-level sums feeding exp: beyond a few units the derived
/// metric's jitter explodes and swamps any injected shift.
const EXPONENT_BUDGET: f64 = 8.0;

/// Cap on root-level sums feeding sin: past one radian the transform
/// stops being monotone and the root series turns chaotic.
const SIN_BUDGET: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("generation failed for {function} with range [{lo}, {hi}]: {detail}")]
    Generation {
        function: String,
        lo: f64,
        hi: f64,
        detail: String,
    },
    #[error("label references unknown leaf `{0}`")]
    UnknownLeaf(NodeKey),
    #[error("label references unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("label timestamp {t} outside 0..{t_len}")]
    BadTimestamp { t: usize, t_len: usize },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Io(#[from] IngestError),
}

/// Generator settings; every field has a sensible default.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Values per dimension; the length is the number of dimensions.
    pub dim_values: Vec<usize>,
    pub t_len: usize,
    /// Index into [`F_FORMULAS`].
    pub f_index: usize,
    /// Index into [`G_FORMULAS`]; `None` draws one compatible with `f`.
    pub g_index: Option<usize>,
    /// Number of anomalous timestamps.
    pub anomaly_count: usize,
    /// Multiplicative shift magnitude range (applied as 1 +/- m).
    pub magnitude: (f64, f64),
    /// Uniform base-level range for the fundamentals.
    pub value_range: (f64, f64),
    /// Relative per-timestamp jitter amplitude.
    pub noise: f64,
    /// Injections are redrawn until they shift the root fundamental by at
    /// least this fraction, so labeled cases are detectable in principle.
    pub min_root_shift: f64,
    pub max_leaves_per_anomaly: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dim_values: vec![2, 4],
            t_len: 200,
            f_index: 0,
            g_index: None,
            anomaly_count: 5,
            magnitude: (0.3, 0.7),
            value_range: (1.0, 100.0),
            noise: 0.02,
            min_root_shift: 0.05,
            max_leaves_per_anomaly: 3,
            seed: 0,
        }
    }
}

/// One injected anomaly: the timestamp and the multiplicative factor
/// applied to each (leaf, fundamental).
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthLabel {
    pub t: usize,
    /// (leaf key, metric name, factor).
    pub deltas: Vec<(NodeKey, String, f64)>,
}

impl GroundTruthLabel {
    pub fn leaves(&self) -> Vec<NodeKey> {
        let set: BTreeSet<NodeKey> = self.deltas.iter().map(|(k, _, _)| k.clone()).collect();
        set.into_iter().collect()
    }
}

/// Everything the generator produces.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub schema: DimensionSchema,
    pub metrics: MetricSchema,
    pub tree: DimensionTree,
    /// Injected leaf fundamentals (what a collector would see).
    pub leaf_panel: MetricPanel,
    /// Injected full panel: exact aggregates and deriveds at every node.
    pub full_panel: MetricPanel,
    pub labels: Vec<GroundTruthLabel>,
    pub f_index: usize,
    pub g_index: usize,
}

/// g-transforms that keep every formula of `f` inside its domain for this
/// leaf count and range.
pub fn compatible_g(f_index: usize, n_leaves: usize) -> Vec<usize> {
    let mut out = vec![0usize, 3, 4]; // c, c^2, sqrt(c)
    // exp(c) only while the root-level sum stays within budget
    if EXPONENT_BUDGET / n_leaves as f64 >= 0.05 {
        out.push(2);
    }
    // sin(c) can go non-positive: not usable inside log(a) or log(a + 1)
    if f_index != 2 && f_index != 4 {
        out.push(1);
    }
    out.sort_unstable();
    out
}

struct Ranges {
    b: (f64, f64),
    c: (f64, f64),
}

fn effective_ranges(config: &SynthConfig, g_index: usize, n_leaves: usize) -> Result<Ranges, SynthError> {
    let (lo, hi) = config.value_range;
    if !(lo > 0.0 && hi > lo) {
        return Err(SynthError::BadConfig(format!(
            "value_range must satisfy 0 < lo < hi, got [{lo}, {hi}]"
        )));
    }
    let mut b = (lo, hi);
    let mut c = (lo, hi);
    if config.f_index == 2 {
        // log(a)/log(b): keep b and (for direct transforms) c at 2 or above
        b.0 = b.0.max(2.0);
        if g_index != 2 {
            c.0 = c.0.max(2.0);
        }
        if b.0 >= b.1 || c.0 >= c.1 {
            return Err(SynthError::BadConfig(format!(
                "value_range [{lo}, {hi}] leaves no room once shifted to >= 2 for {}",
                F_FORMULAS[2]
            )));
        }
    }
    let exp_budget = EXPONENT_BUDGET / n_leaves as f64;
    if config.f_index == 3 {
        b.1 = b.1.min(exp_budget);
        b.0 = b.0.min(b.1 / 2.0);
    }
    if g_index == 2 {
        c.1 = c.1.min(exp_budget);
        c.0 = c.0.min(c.1 / 2.0);
    }
    if g_index == 1 {
        let sin_budget = SIN_BUDGET / n_leaves as f64;
        c.1 = c.1.min(sin_budget);
        c.0 = c.0.min(c.1 / 2.0);
    }
    Ok(Ranges { b, c })
}

fn jitter_rng(seed: u64, t: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (0x9E3779B97F4A7C15u64.wrapping_mul(t as u64 + 1)))
}

/// Build the dataset: tree, jittered fundamentals, injected anomalies,
/// exact aggregation. Deterministic for a fixed config.
pub fn generate_dataset(config: &SynthConfig) -> Result<SynthDataset, SynthError> {
    if config.dim_values.is_empty() || config.dim_values.contains(&0) {
        return Err(SynthError::BadConfig(
            "dim_values must be non-empty with positive counts".into(),
        ));
    }
    if config.t_len < 20 {
        return Err(SynthError::BadConfig(format!(
            "t_len must be at least 20, got {}",
            config.t_len
        )));
    }
    if config.f_index >= F_FORMULAS.len() {
        return Err(SynthError::BadConfig(format!(
            "f_index must be 0..{}",
            F_FORMULAS.len()
        )));
    }
    if config.magnitude.0 < 0.0 || config.magnitude.1 < config.magnitude.0 {
        return Err(SynthError::BadConfig("bad magnitude range".into()));
    }
    if config.max_leaves_per_anomaly == 0 {
        return Err(SynthError::BadConfig(
            "max_leaves_per_anomaly must be >= 1".into(),
        ));
    }
    let n_leaves: usize = config.dim_values.iter().product();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pool = compatible_g(config.f_index, n_leaves);
    let g_index = match config.g_index {
        Some(g) => {
            if g >= G_FORMULAS.len() {
                return Err(SynthError::BadConfig(format!(
                    "g_index must be 0..{}",
                    G_FORMULAS.len()
                )));
            }
            g
        }
        None => *pool.choose(&mut rng).expect("pool never empty"),
    };

    let schema = DimensionSchema::new(
        (0..config.dim_values.len())
            .map(|d| format!("d{}", d + 1))
            .collect(),
        config
            .dim_values
            .iter()
            .map(|&k| (0..k).map(|v| format!("v{}", v + 1)).collect())
            .collect(),
    )?;
    let metrics = MetricSchema::new(
        vec![("b".into(), AggFn::Sum), ("c".into(), AggFn::Sum)],
        vec![
            ("a".into(), G_FORMULAS[g_index].into()),
            ("d".into(), F_FORMULAS[config.f_index].into()),
        ],
    )?;

    // leaves: the full cross product
    let mut leaf_keys: BTreeSet<NodeKey> = BTreeSet::new();
    let mut stack: Vec<Vec<String>> = vec![Vec::new()];
    for dim in 0..schema.num_dims() {
        let mut next = Vec::new();
        for partial in stack {
            for value in schema.values_of(dim) {
                let mut p = partial.clone();
                p.push(value.clone());
                next.push(p);
            }
        }
        stack = next;
    }
    for values in stack {
        leaf_keys.insert(NodeKey::leaf(values));
    }
    let tree = build_tree(&schema, &leaf_keys)?;

    let ranges = effective_ranges(config, g_index, n_leaves)?;
    let ordered_leaves: Vec<NodeKey> = leaf_keys.iter().cloned().collect();
    let bases: Vec<(f64, f64)> = ordered_leaves
        .iter()
        .map(|_| {
            (
                rng.random_range(ranges.b.0..ranges.b.1),
                rng.random_range(ranges.c.0..ranges.c.1),
            )
        })
        .collect();

    let mut leaf_panel = MetricPanel::new(
        ordered_leaves.clone(),
        vec!["b".into(), "c".into()],
        config.t_len,
    );
    for t in 0..config.t_len {
        let mut jrng = jitter_rng(config.seed, t);
        for (key, (base_b, base_c)) in ordered_leaves.iter().zip(&bases) {
            let jb = 1.0 + config.noise * jrng.random_range(-1.0..1.0);
            let jc = 1.0 + config.noise * jrng.random_range(-1.0..1.0);
            leaf_panel.set(key, "b", t, base_b * jb);
            leaf_panel.set(key, "c", t, base_c * jc);
        }
    }

    // injections; anomalous timestamps stay at least an AR window apart so
    // one incident never sits in the lag window of the next
    const SPACING: usize = 12;
    let t_min = (config.t_len / 5).max(12);
    let labels = if config.anomaly_count == 0 {
        Vec::new()
    } else {
        let slots = config.t_len.saturating_sub(t_min) / SPACING;
        if config.anomaly_count > slots {
            return Err(SynthError::BadConfig(format!(
                "cannot place {} anomalies in timestamps {t_min}..{} with spacing {SPACING}",
                config.anomaly_count, config.t_len
            )));
        }
        let mut inj_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xA5A5_5A5A_F0F0_0F0F);
        let mut slot_ids: BTreeSet<usize> = BTreeSet::new();
        while slot_ids.len() < config.anomaly_count {
            slot_ids.insert(inj_rng.random_range(0..slots));
        }
        let ts: BTreeSet<usize> = slot_ids
            .into_iter()
            .map(|s| t_min + s * SPACING + inj_rng.random_range(0..4))
            .collect();
        let root_b: f64 = bases.iter().map(|(b, _)| b).sum();
        let root_c: f64 = bases.iter().map(|(_, c)| c).sum();
        let mut labels = Vec::with_capacity(ts.len());
        for t in ts {
            let metric = if inj_rng.random_bool(0.5) { "b" } else { "c" };
            let root_base = if metric == "b" { root_b } else { root_c };
            // one direction per anomaly: mixed-sign shifts can cancel at
            // the root and leave nothing to localize
            let decrease = inj_rng.random_bool(0.5);
            let mut deltas = Vec::new();
            for _attempt in 0..200 {
                deltas.clear();
                let count =
                    inj_rng.random_range(1..=config.max_leaves_per_anomaly.min(n_leaves));
                let mut picked: BTreeSet<usize> = BTreeSet::new();
                while picked.len() < count {
                    picked.insert(inj_rng.random_range(0..n_leaves));
                }
                let mut shift = 0.0;
                for &pos in &picked {
                    let mag =
                        inj_rng.random_range(config.magnitude.0..=config.magnitude.1);
                    let factor = if decrease { 1.0 - mag } else { 1.0 + mag };
                    let base = if metric == "b" {
                        bases[pos].0
                    } else {
                        bases[pos].1
                    };
                    shift += (base * (factor - 1.0)).abs();
                    deltas.push((ordered_leaves[pos].clone(), metric.to_string(), factor));
                }
                if shift >= config.min_root_shift * root_base || config.magnitude.1 == 0.0 {
                    break;
                }
            }
            labels.push(GroundTruthLabel { t, deltas });
        }
        labels
    };

    let (leaf_panel, full_panel) =
        inject_anomalies(&leaf_panel, &labels, &tree, &metrics).map_err(|e| match e {
            SynthError::Generation { .. } => e,
            other => other,
        })?;

    Ok(SynthDataset {
        schema,
        metrics,
        tree,
        leaf_panel,
        full_panel,
        labels,
        f_index: config.f_index,
        g_index,
    })
}

/// Apply label deltas to a leaf panel and recompute every aggregate and
/// derived metric. Returns (injected leaf panel, injected full panel).
pub fn inject_anomalies(
    leaf_panel: &MetricPanel,
    labels: &[GroundTruthLabel],
    tree: &DimensionTree,
    metrics: &MetricSchema,
) -> Result<(MetricPanel, MetricPanel), SynthError> {
    let mut injected = leaf_panel.clone();
    for label in labels {
        if label.t >= injected.t_len() {
            return Err(SynthError::BadTimestamp {
                t: label.t,
                t_len: injected.t_len(),
            });
        }
        for (key, metric, factor) in &label.deltas {
            let n = injected
                .key_index(key)
                .ok_or_else(|| SynthError::UnknownLeaf(key.clone()))?;
            let m = injected
                .metric_index(metric)
                .ok_or_else(|| SynthError::UnknownMetric(metric.clone()))?;
            let v = injected
                .get_by_index(n, m, label.t)
                .ok_or_else(|| SynthError::UnknownLeaf(key.clone()))?;
            injected.set_by_index(n, m, label.t, v * factor);
        }
    }
    let full = aggregate_panel(&injected, tree, metrics, MissingPolicy::Strict).map_err(
        |e| match &e {
            PanelError::Formula { node, t, source } => SynthError::Generation {
                function: format!("derived metric at {node}"),
                lo: f64::NAN,
                hi: f64::NAN,
                detail: format!("t={t}: {source}"),
            },
            _ => SynthError::BadConfig(e.to_string()),
        },
    )?;
    Ok((injected, full.0))
}

/// Write `data.csv`, `labels.csv` and `manifest.txt` into `dir`.
pub fn write_dataset(dataset: &SynthDataset, dir: &Path) -> Result<DatasetManifest, SynthError> {
    std::fs::create_dir_all(dir).map_err(|e| SynthError::BadConfig(e.to_string()))?;
    let data = dir.join("data.csv");
    ingest::write_csv(
        &dataset.leaf_panel,
        dataset.schema.dim_names(),
        "timestamp",
        "",
        &data,
    )?;
    let labels: Vec<(usize, Vec<NodeKey>)> = dataset
        .labels
        .iter()
        .map(|l| (l.t, l.leaves()))
        .collect();
    ingest::write_labels(&labels, &dir.join("labels.csv"))?;
    let manifest = DatasetManifest {
        data,
        timestamp_col: "timestamp".into(),
        dims: dataset.schema.dim_names().to_vec(),
        fundamentals: vec!["b".into(), "c".into()],
        derived: vec![
            ("a".into(), G_FORMULAS[dataset.g_index].into()),
            ("d".into(), F_FORMULAS[dataset.f_index].into()),
        ],
        agg: vec![("b".into(), AggFn::Sum), ("c".into(), AggFn::Sum)],
    };
    manifest.write(&dir.join("manifest.txt"))?;
    Ok(manifest)
}
