//! Shared integration fixture: the two-dimension business snapshot (real
//! values with expected values in parentheses in the docs) plus builders
//! for panels and engineered histories.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rca_core::forecast::ForecastBundle;
use rca_core::panel::{aggregate_panel, MetricPanel, MissingPolicy};
use rca_core::schema::{AggFn, DimensionSchema, MetricSchema};
use rca_core::tree::{build_tree, DimensionTree, NodeKey};

/// (channel, region, [views, conversions, cost], [expected views, conversions, cost])
pub const SNAPSHOT_LEAVES: [(&str, &str, [f64; 3], [f64; 3]); 8] = [
    ("Search", "US", [51949., 14651., 219765.], [57328., 25741., 249067.]),
    ("Search", "Norway", [3152., 783., 13311.], [2627., 1228., 12528.]),
    ("Search", "Brazil", [3125., 341., 6820.], [2981., 980., 7502.]),
    ("Search", "Others", [64351., 19321., 618272.], [59721., 25931., 579630.]),
    ("Social Media", "US", [43949., 21525., 344400.], [39312., 24057., 322875.]),
    ("Social Media", "Norway", [20453., 8731., 139696.], [18327., 9068., 148427.]),
    ("Social Media", "Brazil", [1957., 1023., 17391.], [1512., 1001., 16368.]),
    ("Social Media", "Others", [70384., 32253., 903084.], [60413., 35912., 838578.]),
];

pub const SNAPSHOT_ROOT_RATE_FORECAST: f64 = 0.52;

pub const SNAPSHOT_CSV: &str = "\
timestamp,channel,region,views,conversions,cost
0,Search,US,51949,14651,219765
0,Search,Norway,3152,783,13311
0,Search,Brazil,3125,341,6820
0,Search,Others,64351,19321,618272
0,Social Media,US,43949,21525,344400
0,Social Media,Norway,20453,8731,139696
0,Social Media,Brazil,1957,1023,17391
0,Social Media,Others,70384,32253,903084
";

pub const SNAPSHOT_MANIFEST: &str = "\
data = data.csv
timestamp_col = timestamp
dims = channel,region
fundamentals = views,conversions,cost
agg.views = SUM
agg.conversions = SUM
agg.cost = SUM
derived.conversion_rate = conversions / views
derived.cost_per_conversion = cost / conversions
";

pub fn snapshot_schema() -> DimensionSchema {
    DimensionSchema::new(
        vec!["channel".into(), "region".into()],
        vec![
            vec!["Search".into(), "Social Media".into()],
            vec!["US".into(), "Norway".into(), "Brazil".into(), "Others".into()],
        ],
    )
    .unwrap()
}

pub fn snapshot_metrics() -> MetricSchema {
    MetricSchema::new(
        vec![
            ("views".into(), AggFn::Sum),
            ("conversions".into(), AggFn::Sum),
            ("cost".into(), AggFn::Sum),
        ],
        vec![
            ("conversion_rate".into(), "conversions / views".into()),
            ("cost_per_conversion".into(), "cost / conversions".into()),
        ],
    )
    .unwrap()
}

pub fn snapshot_keys() -> Vec<NodeKey> {
    SNAPSHOT_LEAVES
        .iter()
        .map(|(c, r, _, _)| NodeKey::leaf(vec![c.to_string(), r.to_string()]))
        .collect()
}

pub fn snapshot_tree() -> DimensionTree {
    let keys: BTreeSet<NodeKey> = snapshot_keys().into_iter().collect();
    build_tree(&snapshot_schema(), &keys).unwrap()
}

fn leaf_panel_from(pick: impl Fn(usize) -> [f64; 3]) -> MetricPanel {
    let keys = snapshot_keys();
    let mut panel = MetricPanel::new(
        keys.clone(),
        vec!["views".into(), "conversions".into(), "cost".into()],
        1,
    );
    for (i, key) in keys.iter().enumerate() {
        let vals = pick(i);
        panel.set(key, "views", 0, vals[0]);
        panel.set(key, "conversions", 0, vals[1]);
        panel.set(key, "cost", 0, vals[2]);
    }
    panel
}

/// Full observed panel aggregated from the snapshot's real leaf values.
pub fn snapshot_panel() -> MetricPanel {
    let (full, _) = aggregate_panel(
        &leaf_panel_from(|i| SNAPSHOT_LEAVES[i].2),
        &snapshot_tree(),
        &snapshot_metrics(),
        MissingPolicy::Strict,
    )
    .unwrap();
    full
}

/// Forecast bundle built directly from the snapshot's expected values,
/// with the root conversion-rate forecast pinned to the printed 0.52.
pub fn snapshot_bundle() -> ForecastBundle {
    let (mut expected, _) = aggregate_panel(
        &leaf_panel_from(|i| SNAPSHOT_LEAVES[i].3),
        &snapshot_tree(),
        &snapshot_metrics(),
        MissingPolicy::Strict,
    )
    .unwrap();
    expected.set(
        &NodeKey::root(2),
        "conversion_rate",
        0,
        SNAPSHOT_ROOT_RATE_FORECAST,
    );
    let mut sigma = expected.clone();
    for key in sigma.keys().to_vec() {
        for m in sigma.metrics().to_vec() {
            sigma.set(&key, &m, 0, 0.0);
        }
    }
    ForecastBundle {
        t: 0,
        expected,
        sigma,
        fallbacks: 0,
    }
}

/// A leaf panel over `history + 1` timestamps whose final timestamp is the
/// snapshot's real values. History holds each cell at its expected value
/// plus zero-sum noise across leaves, so aggregates stay constant (the
/// root anomaly is unambiguous) while individual leaf series are noisy
/// enough that their own deviations stay inside three sigma. The noise
/// amplitude for (Search|US, conversions) is zero: that cell is the only
/// leaf fundamental meant to be flagged anomalous.
pub fn engineered_history_panel(history: usize, seed: u64, quiet_noise: bool) -> MetricPanel {
    let keys = snapshot_keys();
    let t_len = history + 1;
    let mut panel = MetricPanel::new(
        keys.clone(),
        vec!["views".into(), "conversions".into(), "cost".into()],
        t_len,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (m, metric) in ["views", "conversions", "cost"].iter().enumerate() {
        let amp: Vec<f64> = SNAPSHOT_LEAVES
            .iter()
            .map(|(c, r, real, fc)| {
                if quiet_noise || (*c == "Search" && *r == "US" && *metric == "conversions") {
                    0.0
                } else {
                    1.6 * (real[m] - fc[m]).abs().max(0.02 * fc[m])
                }
            })
            .collect();
        let amp_sum: f64 = amp.iter().sum();
        for t in 0..history {
            let draws: Vec<f64> = amp
                .iter()
                .map(|a| a * rng.random_range(-1.0..1.0))
                .collect();
            let surplus: f64 = draws.iter().sum();
            for (i, key) in keys.iter().enumerate() {
                let correction = if amp_sum > 0.0 {
                    amp[i] * surplus / amp_sum
                } else {
                    0.0
                };
                panel.set(key, metric, t, SNAPSHOT_LEAVES[i].3[m] + draws[i] - correction);
            }
        }
        for (i, key) in keys.iter().enumerate() {
            panel.set(key, metric, history, SNAPSHOT_LEAVES[i].2[m]);
        }
    }
    panel
}
