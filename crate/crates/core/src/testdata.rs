//! Shared unit-test fixture: the two-dimension business snapshot with
//! real and expected values per cell.

use std::collections::BTreeSet;

use crate::panel::{aggregate_panel, MetricPanel, MissingPolicy};
use crate::schema::{AggFn, DimensionSchema, MetricSchema};
use crate::tree::{build_tree, DimensionTree, NodeKey};

/// (channel, region, [views, conversions, cost], [views_f, conversions_f, cost_f])
pub(crate) const SNAPSHOT_LEAVES: [(&str, &str, [f64; 3], [f64; 3]); 8] = [
    (
        "Search",
        "US",
        [51949.0, 14651.0, 219765.0],
        [57328.0, 25741.0, 249067.0],
    ),
    (
        "Search",
        "Norway",
        [3152.0, 783.0, 13311.0],
        [2627.0, 1228.0, 12528.0],
    ),
    (
        "Search",
        "Brazil",
        [3125.0, 341.0, 6820.0],
        [2981.0, 980.0, 7502.0],
    ),
    (
        "Search",
        "Others",
        [64351.0, 19321.0, 618272.0],
        [59721.0, 25931.0, 579630.0],
    ),
    (
        "Social Media",
        "US",
        [43949.0, 21525.0, 344400.0],
        [39312.0, 24057.0, 322875.0],
    ),
    (
        "Social Media",
        "Norway",
        [20453.0, 8731.0, 139696.0],
        [18327.0, 9068.0, 148427.0],
    ),
    (
        "Social Media",
        "Brazil",
        [1957.0, 1023.0, 17391.0],
        [1512.0, 1001.0, 16368.0],
    ),
    (
        "Social Media",
        "Others",
        [70384.0, 32253.0, 903084.0],
        [60413.0, 35912.0, 838578.0],
    ),
];

/// Root conversion-rate forecast as printed in the snapshot.
pub(crate) const SNAPSHOT_ROOT_RATE_FORECAST: f64 = 0.52;

pub(crate) fn snapshot_schema() -> DimensionSchema {
    DimensionSchema::new(
        vec!["channel".into(), "region".into()],
        vec![
            vec!["Search".into(), "Social Media".into()],
            vec![
                "US".into(),
                "Norway".into(),
                "Brazil".into(),
                "Others".into(),
            ],
        ],
    )
    .unwrap()
}

pub(crate) fn snapshot_metrics() -> MetricSchema {
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

pub(crate) fn snapshot_tree() -> DimensionTree {
    let schema = snapshot_schema();
    let keys: BTreeSet<NodeKey> = SNAPSHOT_LEAVES
        .iter()
        .map(|(c, r, _, _)| NodeKey::leaf(vec![c.to_string(), r.to_string()]))
        .collect();
    build_tree(&schema, &keys).unwrap()
}

fn leaf_panel(pick: impl Fn(&(&str, &str, [f64; 3], [f64; 3])) -> [f64; 3]) -> MetricPanel {
    let keys: Vec<NodeKey> = SNAPSHOT_LEAVES
        .iter()
        .map(|(c, r, _, _)| NodeKey::leaf(vec![c.to_string(), r.to_string()]))
        .collect();
    let mut panel = MetricPanel::new(
        keys.clone(),
        vec!["views".into(), "conversions".into(), "cost".into()],
        1,
    );
    for (row, key) in SNAPSHOT_LEAVES.iter().zip(&keys) {
        let vals = pick(row);
        panel.set(key, "views", 0, vals[0]);
        panel.set(key, "conversions", 0, vals[1]);
        panel.set(key, "cost", 0, vals[2]);
    }
    panel
}

/// Full observed panel (aggregated from the real leaf values).
pub(crate) fn snapshot_panel() -> MetricPanel {
    let tree = snapshot_tree();
    let metrics = snapshot_metrics();
    let leaves = leaf_panel(|row| row.2);
    aggregate_panel(&leaves, &tree, &metrics, MissingPolicy::Strict)
        .unwrap()
        .0
}

/// Forecast panel built from the snapshot's expected leaf values, with
/// aggregate forecasts consistent with the printed snapshot (root
/// conversion rate forecast pinned to 0.52).
pub(crate) fn snapshot_forecasts() -> MetricPanel {
    let tree = snapshot_tree();
    let metrics = snapshot_metrics();
    let leaves = leaf_panel(|row| row.3);
    let (mut full, _) =
        aggregate_panel(&leaves, &tree, &metrics, MissingPolicy::Strict).unwrap();
    full.set(
        &NodeKey::root(2),
        "conversion_rate",
        0,
        SNAPSHOT_ROOT_RATE_FORECAST,
    );
    full
}
