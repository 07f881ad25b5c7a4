//! Run configuration: a `key = value` file plus `--set` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rca_core::eval::AdtributorConfig;
use rca_core::gat::GatConfig;
use rca_core::ingest::parse_key_values;
use rca_core::localize::{LocalizeConfig, ReplacementPolicy};
use rca_core::synth::SynthConfig;

/// Which relationship model drives propagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationshipKind {
    /// The trained graph-attention model (needs `model`).
    Gat,
    /// Exact aggregation plus the manifest's formulas.
    Oracle,
}

/// What labels the truth set for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruthBasis {
    /// Recovery-ratio ground truth reconstructed from forecasts.
    Recovery,
    /// The generator's injected labels.
    Labels,
}

/// Timestamp selection for localization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TimeSelector {
    /// Latest timestamp flagged by the 3-sigma rule.
    Auto,
    Index(usize),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub monitored: String,
    pub t: TimeSelector,
    pub seed: u64,
    pub relationship: RelationshipKind,
    pub ar_order: Option<usize>,
    pub gat: GatConfig,
    pub localize: LocalizeConfig,
    pub adtributor: AdtributorConfig,
    pub eval_threshold: f64,
    pub eval_truth: TruthBasis,
    pub sim: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            model: None,
            labels: None,
            out_dir: PathBuf::from("out"),
            monitored: "d".into(),
            t: TimeSelector::Auto,
            seed: 0,
            relationship: RelationshipKind::Gat,
            ar_order: None,
            gat: GatConfig::default(),
            localize: LocalizeConfig::default(),
            adtributor: AdtributorConfig::default(),
            eval_threshold: 0.8,
            eval_truth: TruthBasis::Recovery,
            sim: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    /// Read the optional config file, then apply `--set key=value`
    /// overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut entries: BTreeMap<String, String> = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config `{}`", path.display()))?;
            for (k, v) in parse_key_values(&text).map_err(|e| anyhow!("{}: {e}", path.display()))? {
                entries.insert(k, v);
            }
        }
        for item in overrides {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects key=value, got `{item}`"))?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut config = RunConfig::default();
        for (key, value) in &entries {
            config
                .apply(key, value)
                .with_context(|| format!("config key `{key}`"))?;
        }
        config.check()?;
        Ok(config)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "model" => self.model = Some(PathBuf::from(value)),
            "labels" => self.labels = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "monitored" => self.monitored = value.to_string(),
            "t" => {
                self.t = if value == "auto" {
                    TimeSelector::Auto
                } else {
                    TimeSelector::Index(value.parse().context("t must be auto or an index")?)
                }
            }
            "seed" => {
                let seed: u64 = value.parse()?;
                self.seed = seed;
                self.gat.seed = seed;
                self.localize.ga.seed = seed;
                self.sim.seed = seed;
            }
            "relationship" => {
                self.relationship = match value {
                    "gat" => RelationshipKind::Gat,
                    "oracle" => RelationshipKind::Oracle,
                    other => bail!("relationship must be gat or oracle, got `{other}`"),
                }
            }
            "replacement" => {
                self.localize.replacement = match value {
                    "all" => ReplacementPolicy::AllFundamentals,
                    "flagged" => ReplacementPolicy::FlaggedOnly,
                    other => bail!("replacement must be all or flagged, got `{other}`"),
                }
            }
            "ar.order" => {
                self.ar_order = if value == "auto" {
                    None
                } else {
                    Some(value.parse()?)
                }
            }
            "gat.embed" => self.gat.embed_dim = value.parse()?,
            "gat.heads" => self.gat.heads = value.parse()?,
            "gat.epochs" => self.gat.epochs = value.parse()?,
            "gat.lr" => self.gat.learning_rate = value.parse()?,
            "gat.patience" => self.gat.patience = value.parse()?,
            "gat.val_fraction" => self.gat.val_fraction = value.parse()?,
            "gat.leaky_slope" => self.gat.leaky_slope = value.parse()?,
            "ga.population" => self.localize.ga.population = value.parse()?,
            "ga.iterations" => self.localize.ga.iterations = value.parse()?,
            "ga.cross_rate" => self.localize.ga.cross_rate = value.parse()?,
            "ga.mutation_rate" => self.localize.ga.mutation_rate = value.parse()?,
            "beta" => self.localize.ga.beta = value.parse()?,
            "beta.normalized" => self.localize.ga.normalized_beta = value.parse()?,
            "t_delta" => self.localize.t_delta = value.parse()?,
            "t_gamma" => self.localize.t_gamma = value.parse()?,
            "adtributor.t_eep" => self.adtributor.t_eep = value.parse()?,
            "adtributor.t_ep" => self.adtributor.t_ep = value.parse()?,
            "eval.threshold" => self.eval_threshold = value.parse()?,
            "eval.truth" => {
                self.eval_truth = match value {
                    "recovery" => TruthBasis::Recovery,
                    "labels" => TruthBasis::Labels,
                    other => bail!("eval.truth must be recovery or labels, got `{other}`"),
                }
            }
            "sim.dims" => {
                self.sim.dim_values = value
                    .split(',')
                    .map(|v| v.trim().parse::<usize>().map_err(Into::into))
                    .collect::<Result<_>>()?;
            }
            "sim.t_len" => self.sim.t_len = value.parse()?,
            "sim.f_index" => self.sim.f_index = value.parse()?,
            "sim.g_index" => {
                self.sim.g_index = if value == "auto" {
                    None
                } else {
                    Some(value.parse()?)
                }
            }
            "sim.anomalies" => self.sim.anomaly_count = value.parse()?,
            "sim.magnitude" => self.sim.magnitude = parse_pair(value)?,
            "sim.range" => self.sim.value_range = parse_pair(value)?,
            "sim.noise" => self.sim.noise = value.parse()?,
            "sim.min_root_shift" => self.sim.min_root_shift = value.parse()?,
            "sim.max_leaves" => self.sim.max_leaves_per_anomaly = value.parse()?,
            other => bail!("unknown key `{other}`"),
        }
        Ok(())
    }

    fn check(&self) -> Result<()> {
        for (name, v) in [("t_delta", self.localize.t_delta), ("t_gamma", self.localize.t_gamma)] {
            if !(0.0..=1.0).contains(&v) {
                bail!("{name} must be within [0, 1], got {v}");
            }
        }
        if !(0.0..=1.0).contains(&self.eval_threshold) {
            bail!("eval.threshold must be within [0, 1]");
        }
        Ok(())
    }
}

fn parse_pair(value: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        bail!("expected `lo,hi`, got `{value}`");
    }
    Ok((parts[0].parse()?, parts[1].parse()?))
}
