//! Root-cause localization: candidate filtering, genetic search over leaf
//! subsets with a counterfactual fitness score, and backtrack compaction.
//!
//! Given an anomaly on the monitored root metric, each filtered candidate
//! leaf gets one bit in a chromosome. A set bit means "troubleshoot this
//! leaf": its real fundamentals are replaced by forecast values, and the
//! relationship model recomputes the root. The closer the recomputed root
//! moves to its forecast, the fitter the chromosome; a succinctness term
//! keeps the selected set small. The best set is then compacted bottom-up:
//! a lattice ancestor replaces its selected leaf descendants when it covers
//! enough of them.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::forecast::{detect_3sigma, ForecastBundle};
use crate::panel::MetricPanel;
use crate::relation::{LeafValues, RelationError, Relationship};
use crate::schema::{AggFn, MetricSchema};
use crate::tree::{DimensionTree, NodeKey, TreeError};

/// Denominator floor in the filtering score.
pub const EPS_DEVIATION: f64 = 1e-8;
/// Root deviation below this is "no anomaly".
pub const EPS_ANOMALY: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LocalizeError {
    #[error("no anomaly: root value {v} vs forecast {f}")]
    NoAnomaly { v: f64, f: f64 },
    #[error("no candidate survives filtering at t_delta={t_delta} (max score {max_score})")]
    NoCandidates { t_delta: f64, max_score: f64 },
    #[error("backtrack input contains non-leaf key `{0}`")]
    NonLeafInput(NodeKey),
    #[error(transparent)]
    BadKey(#[from] TreeError),
    #[error("panel is missing {0}")]
    MissingData(String),
    #[error(transparent)]
    Relation(#[from] RelationError),
    #[error("bad config: {0}")]
    BadConfig(String),
}

/// Genetic-search control parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GaConfig {
    /// Population size N_p.
    pub population: usize,
    /// Iterations N.
    pub iterations: usize,
    /// Crossover rate t_c.
    pub cross_rate: f64,
    /// Mutation rate t_f.
    pub mutation_rate: f64,
    /// Succinctness weight.
    pub beta: f64,
    /// Penalize beta * |s|/n when true (bounded like the recovery term);
    /// beta * |s| when false.
    pub normalized_beta: bool,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population: 50,
            iterations: 10,
            cross_rate: 0.5,
            mutation_rate: 0.1,
            beta: 1.0,
            normalized_beta: true,
            seed: 0,
        }
    }
}

impl GaConfig {
    fn check(&self) -> Result<(), LocalizeError> {
        if self.population < 2 {
            return Err(LocalizeError::BadConfig("population must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.cross_rate) || !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(LocalizeError::BadConfig(
                "cross_rate and mutation_rate must be in [0, 1]".into(),
            ));
        }
        if self.beta < 0.0 {
            return Err(LocalizeError::BadConfig("beta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Binary selection vector over the filtered candidates.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Chromosome {
    pub bits: Vec<bool>,
}

impl Chromosome {
    pub fn zeros(n: usize) -> Self {
        Chromosome {
            bits: vec![false; n],
        }
    }

    pub fn singleton(n: usize, set: usize) -> Self {
        let mut c = Self::zeros(n);
        c.bits[set] = true;
        c
    }

    pub fn ones_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Everything about one anomalous timestamp the localizer needs, extracted
/// from the observed panel and its forecasts.
#[derive(Debug, Clone)]
pub struct CaseData {
    pub t: usize,
    pub monitored: String,
    /// Index of the monitored metric in the model output order.
    pub monitored_out: usize,
    /// Per leaf (tree order): real fundamentals.
    pub leaf_real: Vec<Vec<f64>>,
    /// Per leaf: forecast fundamentals.
    pub leaf_forecast: Vec<Vec<f64>>,
    /// Per leaf: (real, forecast) of the monitored metric.
    pub leaf_monitored: Vec<(f64, f64)>,
    /// Per leaf x fundamental: 3-sigma anomaly flag.
    pub flags: Vec<Vec<bool>>,
    pub v_root: f64,
    pub f_root: f64,
}

impl CaseData {
    pub fn from_panels(
        tree: &DimensionTree,
        metrics: &MetricSchema,
        panel: &MetricPanel,
        forecasts: &ForecastBundle,
        monitored: &str,
        t: usize,
    ) -> Result<Self, LocalizeError> {
        let monitored_out = metrics
            .metric_index(monitored)
            .ok_or_else(|| LocalizeError::MissingData(format!("metric `{monitored}`")))?;
        let p = metrics.num_fundamentals();
        let names: Vec<&str> = metrics.fundamentals().map(|(n, _)| n).collect();
        let need = |panel: &MetricPanel, key: &NodeKey, metric: &str, t: usize| {
            panel
                .get(key, metric, t)
                .ok_or_else(|| LocalizeError::MissingData(format!("({key}, {metric}, t={t})")))
        };

        let mut leaf_real = Vec::with_capacity(tree.leaves().len());
        let mut leaf_forecast = Vec::with_capacity(tree.leaves().len());
        let mut leaf_monitored = Vec::with_capacity(tree.leaves().len());
        let mut flags = Vec::with_capacity(tree.leaves().len());
        for &leaf in tree.leaves() {
            let key = tree.key(leaf);
            let mut real = Vec::with_capacity(p);
            let mut fc = Vec::with_capacity(p);
            let mut flag = Vec::with_capacity(p);
            for name in &names {
                let v = need(panel, key, name, t)?;
                let f = need(&forecasts.expected, key, name, 0)?;
                let sigma = forecasts.sigma.get(key, name, 0).unwrap_or(0.0);
                real.push(v);
                fc.push(f);
                flag.push(detect_3sigma(v, f, sigma));
            }
            leaf_monitored.push((
                need(panel, key, monitored, t)?,
                need(&forecasts.expected, key, monitored, 0)?,
            ));
            leaf_real.push(real);
            leaf_forecast.push(fc);
            flags.push(flag);
        }
        let root = tree.key(tree.root());
        Ok(CaseData {
            t,
            monitored: monitored.to_string(),
            monitored_out,
            leaf_real,
            leaf_forecast,
            leaf_monitored,
            flags,
            v_root: need(panel, root, monitored, t)?,
            f_root: need(&forecasts.expected, root, monitored, 0)?,
        })
    }

    pub fn root_deviation(&self) -> f64 {
        (self.v_root - self.f_root).abs()
    }
}

/// A leaf that survived filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateLeaf {
    /// Position in `tree.leaves()`.
    pub leaf_pos: usize,
    pub key: NodeKey,
    pub score: f64,
    /// Max relative deviation over fundamentals and the monitored metric.
    pub rel_dev: f64,
}

/// Score each leaf by its worst relative deviation (over fundamentals and
/// the monitored metric) weighted by its normalized importance, and keep
/// leaves scoring at least `t_delta`, best first.
pub fn filter_candidates(
    tree: &DimensionTree,
    data: &CaseData,
    importance: &[f64],
    t_delta: f64,
) -> Result<Vec<CandidateLeaf>, LocalizeError> {
    assert_eq!(importance.len(), tree.leaves().len());
    let total: f64 = importance.iter().sum();
    if total <= 0.0 {
        return Err(LocalizeError::BadConfig(
            "importance weights must have a positive sum".into(),
        ));
    }
    let mut out = Vec::new();
    let mut max_score = 0.0f64;
    for (pos, &leaf) in tree.leaves().iter().enumerate() {
        let mut rel_dev = 0.0f64;
        for (v, f) in data.leaf_real[pos]
            .iter()
            .zip(&data.leaf_forecast[pos])
            .chain(std::iter::once((
                &data.leaf_monitored[pos].0,
                &data.leaf_monitored[pos].1,
            )))
        {
            let dev = (v - f).abs() / v.abs().max(EPS_DEVIATION);
            rel_dev = rel_dev.max(dev);
        }
        let score = rel_dev * importance[pos] / total;
        max_score = max_score.max(score);
        if score >= t_delta {
            out.push(CandidateLeaf {
                leaf_pos: pos,
                key: tree.key(leaf).clone(),
                score,
                rel_dev,
            });
        }
    }
    if out.is_empty() {
        return Err(LocalizeError::NoCandidates { t_delta, max_score });
    }
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.key.cmp(&b.key))
    });
    Ok(out)
}

/// Which metrics a selected leaf's replacement touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplacementPolicy {
    /// Replace every fundamental of a selected leaf.
    AllFundamentals,
    /// Replace only the fundamentals flagged anomalous at that leaf.
    FlaggedOnly,
}

/// Counterfactual fitness evaluation context.
pub struct FitnessContext<'a> {
    pub model: &'a dyn Relationship,
    pub tree: &'a DimensionTree,
    pub data: &'a CaseData,
    pub candidates: &'a [CandidateLeaf],
    pub beta: f64,
    pub normalized_beta: bool,
    pub replacement: ReplacementPolicy,
}

impl<'a> FitnessContext<'a> {
    /// Fails when the root shows no anomaly (the fitness denominator).
    pub fn new(
        model: &'a dyn Relationship,
        tree: &'a DimensionTree,
        data: &'a CaseData,
        candidates: &'a [CandidateLeaf],
        beta: f64,
        normalized_beta: bool,
        replacement: ReplacementPolicy,
    ) -> Result<Self, LocalizeError> {
        if data.root_deviation() <= EPS_ANOMALY {
            return Err(LocalizeError::NoAnomaly {
                v: data.v_root,
                f: data.f_root,
            });
        }
        Ok(FitnessContext {
            model,
            tree,
            data,
            candidates,
            beta,
            normalized_beta,
            replacement,
        })
    }

    /// Leaf inputs with the chromosome's selected candidates replaced by
    /// their forecasts.
    fn counterfactual(&self, chromosome: &Chromosome) -> LeafValues {
        let mut rows = self.data.leaf_real.clone();
        for (bit, cand) in chromosome.bits.iter().zip(self.candidates) {
            if !bit {
                continue;
            }
            let pos = cand.leaf_pos;
            match self.replacement {
                ReplacementPolicy::AllFundamentals => {
                    rows[pos] = self.data.leaf_forecast[pos].clone();
                }
                ReplacementPolicy::FlaggedOnly => {
                    for (m, flagged) in self.data.flags[pos].iter().enumerate() {
                        if *flagged {
                            rows[pos][m] = self.data.leaf_forecast[pos][m];
                        }
                    }
                }
            }
        }
        LeafValues::new(rows)
    }

    /// Root value of the monitored metric after troubleshooting `s`.
    pub fn recovered_root(&self, chromosome: &Chromosome) -> Result<f64, LocalizeError> {
        let pred = self
            .model
            .propagate(self.tree, &self.counterfactual(chromosome))?;
        Ok(pred.root()[self.data.monitored_out])
    }

    /// Residual root deviation ratio plus the succinctness penalty.
    pub fn fitness(&self, chromosome: &Chromosome) -> Result<f64, LocalizeError> {
        assert_eq!(chromosome.len(), self.candidates.len());
        let recovered = self.recovered_root(chromosome)?;
        let first = (recovered - self.data.f_root).abs() / self.data.root_deviation();
        let ones = chromosome.ones_count() as f64;
        let penalty = if self.normalized_beta {
            self.beta * ones / self.candidates.len().max(1) as f64
        } else {
            self.beta * ones
        };
        Ok(first + penalty)
    }
}

/// Search outcome with the per-iteration best-so-far trace.
#[derive(Debug, Clone)]
pub struct GaResult {
    pub best: Chromosome,
    pub best_fitness: f64,
    /// Best fitness seen up to and including each iteration; non-increasing.
    pub history: Vec<f64>,
    /// Distinct chromosomes evaluated.
    pub evaluations: usize,
}

/// Default population: half singletons of the top-scoring candidates, half
/// sparse Bernoulli(0.3) draws.
fn default_population(config: &GaConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<Chromosome> {
    let mut population = Vec::with_capacity(config.population);
    for i in 0..config.population {
        if i < config.population / 2 {
            population.push(Chromosome::singleton(n, i % n));
        } else {
            let bits = (0..n).map(|_| rng.random_bool(0.3)).collect();
            population.push(Chromosome { bits });
        }
    }
    population
}

/// Run the evolutionary loop: evaluate, record the incumbent, rank-based
/// roulette selection, single-point crossover on adjacent pairs, then a
/// single-bit mutation per chromosome.
pub fn ga_search<F>(config: &GaConfig, n: usize, fitness: F) -> Result<GaResult, LocalizeError>
where
    F: FnMut(&Chromosome) -> Result<f64, LocalizeError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let population = default_population(config, n, &mut rng);
    ga_search_with_population(config, population, rng, fitness)
}

/// Same loop with a caller-supplied initial population (the RNG continues
/// from wherever initialization left it).
pub fn ga_search_with_population<F>(
    config: &GaConfig,
    mut population: Vec<Chromosome>,
    mut rng: ChaCha8Rng,
    mut fitness: F,
) -> Result<GaResult, LocalizeError>
where
    F: FnMut(&Chromosome) -> Result<f64, LocalizeError>,
{
    config.check()?;
    assert!(!population.is_empty());
    let n = population[0].len();
    assert!(n >= 1, "need at least one candidate");

    let mut cache: HashMap<Chromosome, f64> = HashMap::new();
    let mut evaluations = 0usize;
    let mut best: Option<(Chromosome, f64)> = None;
    let mut history = Vec::with_capacity(config.iterations);

    for _ in 0..config.iterations {
        // evaluate
        let mut scores = Vec::with_capacity(population.len());
        for chromosome in &population {
            let score = match cache.get(chromosome) {
                Some(s) => *s,
                None => {
                    let s = fitness(chromosome)?;
                    evaluations += 1;
                    cache.insert(chromosome.clone(), s);
                    s
                }
            };
            scores.push(score);
        }
        // record the incumbent
        for (chromosome, &score) in population.iter().zip(&scores) {
            if best.as_ref().is_none_or(|(_, b)| score < *b) {
                best = Some((chromosome.clone(), score));
            }
        }
        history.push(best.as_ref().unwrap().1);

        // rank-based roulette: smaller fitness, larger weight
        let mut order: Vec<usize> = (0..population.len()).collect();
        order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
        let mut weight = vec![0.0; population.len()];
        for (rank, &idx) in order.iter().enumerate() {
            weight[idx] = (population.len() - rank) as f64;
        }
        let total: f64 = weight.iter().sum();
        let mut cumulative = Vec::with_capacity(weight.len());
        let mut acc = 0.0;
        for w in &weight {
            acc += w;
            cumulative.push(acc);
        }
        let mut next: Vec<Chromosome> = (0..population.len())
            .map(|_| {
                let r: f64 = rng.random_range(0.0..total);
                let idx = cumulative.partition_point(|c| *c <= r);
                population[idx.min(population.len() - 1)].clone()
            })
            .collect();

        // single-point crossover on adjacent pairs
        if n >= 2 {
            for pair in next.chunks_mut(2) {
                if pair.len() == 2 && rng.random_bool(config.cross_rate) {
                    let point = rng.random_range(1..n);
                    let (a, b) = pair.split_at_mut(1);
                    for i in point..n {
                        std::mem::swap(&mut a[0].bits[i], &mut b[0].bits[i]);
                    }
                }
            }
        }
        // single-bit mutation
        for chromosome in &mut next {
            if rng.random_bool(config.mutation_rate) {
                let bit = rng.random_range(0..n);
                chromosome.bits[bit] = !chromosome.bits[bit];
            }
        }
        population = next;
    }

    let (best, best_fitness) = best.expect("at least one iteration");
    Ok(GaResult {
        best,
        best_fitness,
        history,
        evaluations,
    })
}

/// Compact a set of selected leaves: bottom-up by layer, a lattice ancestor
/// replaces its selected leaf descendants when it covers a fraction of at
/// least `t_gamma` of them. Errors on non-leaf input.
pub fn backtrack(
    selected: &BTreeSet<NodeKey>,
    tree: &DimensionTree,
    t_gamma: f64,
) -> Result<BTreeSet<NodeKey>, LocalizeError> {
    for key in selected {
        tree.check_lattice_key(key)?;
        if !key.is_leaf() {
            return Err(LocalizeError::NonLeafInput(key.clone()));
        }
    }
    backtrack_nodes(selected, tree, t_gamma)
}

/// Re-entrant form of [`backtrack`]: aggregate members are preserved as-is
/// and do not count toward coverage ratios, so applying it to its own
/// output changes nothing.
pub fn backtrack_nodes(
    selected: &BTreeSet<NodeKey>,
    tree: &DimensionTree,
    t_gamma: f64,
) -> Result<BTreeSet<NodeKey>, LocalizeError> {
    for key in selected {
        tree.check_lattice_key(key)?;
    }
    let num_dims = tree.num_dims();
    let mut set = selected.clone();
    for layer in (1..num_dims).rev() {
        // ancestors at this layer of any member below it
        let mut parents: BTreeSet<NodeKey> = BTreeSet::new();
        for key in &set {
            if key.concrete_count() > layer {
                collect_ancestors_at_layer(key, layer, &mut parents);
            }
        }
        let mut added = false;
        for p in parents {
            let descendants = tree.lattice_leaf_descendants(&p);
            if descendants.is_empty() {
                continue;
            }
            let covered: Vec<NodeKey> = descendants
                .iter()
                .map(|&id| tree.key(id).clone())
                .filter(|k| set.contains(k))
                .collect();
            if covered.len() as f64 / descendants.len() as f64 >= t_gamma {
                for k in &covered {
                    set.remove(k);
                }
                set.insert(p);
                added = true;
            }
        }
        if !added {
            break;
        }
    }
    Ok(set)
}

/// All keys with exactly `layer` of `key`'s concrete entries kept.
fn collect_ancestors_at_layer(key: &NodeKey, layer: usize, out: &mut BTreeSet<NodeKey>) {
    let concrete: Vec<usize> = (0..key.len())
        .filter(|&d| key.entry(d).is_some())
        .collect();
    let mut chosen = vec![false; concrete.len()];
    fn rec(
        key: &NodeKey,
        concrete: &[usize],
        chosen: &mut Vec<bool>,
        start: usize,
        left: usize,
        out: &mut BTreeSet<NodeKey>,
    ) {
        if left == 0 {
            let entries = (0..key.len())
                .map(|d| {
                    let keep = concrete
                        .iter()
                        .position(|&c| c == d)
                        .map(|i| chosen[i])
                        .unwrap_or(false);
                    if keep {
                        key.entry(d).map(|s| s.to_string())
                    } else {
                        None
                    }
                })
                .collect();
            out.insert(NodeKey::new(entries));
            return;
        }
        if start + left > concrete.len() {
            return;
        }
        chosen[start] = true;
        rec(key, concrete, chosen, start + 1, left - 1, out);
        chosen[start] = false;
        rec(key, concrete, chosen, start + 1, left, out);
    }
    rec(key, &concrete, &mut chosen, 0, layer, out);
}

/// Full localization settings.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizeConfig {
    pub ga: GaConfig,
    /// Filtering threshold t_delta.
    pub t_delta: f64,
    /// Backtrack threshold t_gamma.
    pub t_gamma: f64,
    pub replacement: ReplacementPolicy,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        LocalizeConfig {
            ga: GaConfig::default(),
            t_delta: 0.1,
            t_gamma: 0.6,
            replacement: ReplacementPolicy::AllFundamentals,
        }
    }
}

/// One reported root-cause node.
#[derive(Debug, Clone)]
pub struct ReportNode {
    pub key: NodeKey,
    /// Recovery ratio when this node alone is troubleshot.
    pub recovery: f64,
    /// (metric, real, forecast) rows for the node.
    pub deviations: Vec<(String, f64, f64)>,
}

/// Ranked, backtracked root-cause set with its search diagnostics.
#[derive(Debug, Clone)]
pub struct RootCauseReport {
    pub monitored: String,
    pub t: usize,
    pub t_label: String,
    pub v_root: f64,
    pub f_root: f64,
    pub best_fitness: f64,
    /// Root value after troubleshooting the chosen set.
    pub recovered_root: f64,
    /// 1 - residual deviation ratio; can be negative when troubleshooting
    /// overshoots, clamped to [0, 1] for display.
    pub recovery_ratio: f64,
    pub nodes: Vec<ReportNode>,
    pub candidates: Vec<CandidateLeaf>,
    pub history: Vec<f64>,
    pub evaluations: usize,
}

/// Filter, search, backtrack, report.
#[allow(clippy::too_many_arguments)]
pub fn localize(
    tree: &DimensionTree,
    metrics: &MetricSchema,
    panel: &MetricPanel,
    forecasts: &ForecastBundle,
    model: &dyn Relationship,
    monitored: &str,
    t: usize,
    config: &LocalizeConfig,
) -> Result<RootCauseReport, LocalizeError> {
    let data = CaseData::from_panels(tree, metrics, panel, forecasts, monitored, t)?;
    if data.root_deviation() <= EPS_ANOMALY {
        return Err(LocalizeError::NoAnomaly {
            v: data.v_root,
            f: data.f_root,
        });
    }
    let importance = model.leaf_importance(tree, &LeafValues::new(data.leaf_real.clone()))?;
    let candidates = filter_candidates(tree, &data, &importance, config.t_delta)?;
    let ctx = FitnessContext::new(
        model,
        tree,
        &data,
        &candidates,
        config.ga.beta,
        config.ga.normalized_beta,
        config.replacement,
    )?;
    let result = ga_search(&config.ga, candidates.len(), |c| ctx.fitness(c))?;

    let chosen: BTreeSet<NodeKey> = result
        .best
        .bits
        .iter()
        .zip(&candidates)
        .filter(|(bit, _)| **bit)
        .map(|(_, c)| c.key.clone())
        .collect();
    let compacted = backtrack(&chosen, tree, config.t_gamma)?;

    let recovered_root = ctx.recovered_root(&result.best)?;
    let recovery_ratio = 1.0 - (recovered_root - data.f_root).abs() / data.root_deviation();

    let mut nodes = Vec::with_capacity(compacted.len());
    for key in &compacted {
        let member_positions: Vec<usize> = tree
            .lattice_leaf_descendants(key)
            .into_iter()
            .map(|id| tree.leaf_position(id).unwrap())
            .collect();
        // individual recovery: troubleshoot just this node's leaves
        let mut rows = data.leaf_real.clone();
        for &pos in &member_positions {
            match config.replacement {
                ReplacementPolicy::AllFundamentals => {
                    rows[pos] = data.leaf_forecast[pos].clone();
                }
                ReplacementPolicy::FlaggedOnly => {
                    for (m, flagged) in data.flags[pos].iter().enumerate() {
                        if *flagged {
                            rows[pos][m] = data.leaf_forecast[pos][m];
                        }
                    }
                }
            }
        }
        let pred = model.propagate(tree, &LeafValues::new(rows))?;
        let solo_root = pred.root()[data.monitored_out];
        let recovery = 1.0 - (solo_root - data.f_root).abs() / data.root_deviation();
        nodes.push(ReportNode {
            key: key.clone(),
            recovery,
            deviations: node_deviations(metrics, &data, &member_positions),
        });
    }
    nodes.sort_by(|a, b| {
        b.recovery
            .partial_cmp(&a.recovery)
            .unwrap()
            .then_with(|| a.key.cmp(&b.key))
    });

    Ok(RootCauseReport {
        monitored: monitored.to_string(),
        t,
        t_label: panel.t_labels()[t].clone(),
        v_root: data.v_root,
        f_root: data.f_root,
        best_fitness: result.best_fitness,
        recovered_root,
        recovery_ratio,
        nodes,
        candidates,
        history: result.history,
        evaluations: result.evaluations,
    })
}

/// Observed/forecast rows for a (possibly aggregate) node: fundamentals by
/// the schema's aggregation over its leaves, then the monitored metric.
fn node_deviations(
    metrics: &MetricSchema,
    data: &CaseData,
    member_positions: &[usize],
) -> Vec<(String, f64, f64)> {
    let p = metrics.num_fundamentals();
    let n = member_positions.len().max(1) as f64;
    let mut rows = Vec::with_capacity(p + 1);
    let mut real_fund = vec![0.0; p];
    let mut fc_fund = vec![0.0; p];
    for (fi, (name, agg)) in metrics.fundamentals().enumerate() {
        let mut v = 0.0;
        let mut f = 0.0;
        for &pos in member_positions {
            v += data.leaf_real[pos][fi];
            f += data.leaf_forecast[pos][fi];
        }
        if agg == AggFn::Mean {
            v /= n;
            f /= n;
        }
        real_fund[fi] = v;
        fc_fund[fi] = f;
        rows.push((name.to_string(), v, f));
    }
    if data.monitored_out >= p {
        let derived_real = metrics.eval_derived(&real_fund).ok();
        let derived_fc = metrics.eval_derived(&fc_fund).ok();
        if let (Some(dr), Some(df)) = (derived_real, derived_fc) {
            let qi = data.monitored_out - p;
            rows.push((data.monitored.clone(), dr[qi], df[qi]));
        }
    }
    rows
}

/// Line-delimited structured report plus a human-readable summary block.
pub fn render_report(report: &RootCauseReport) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(s, "# root-cause report");
    let _ = writeln!(
        s,
        "meta\tmonitored={}\tt={}\tt_label={}\tv_root={}\tf_root={}",
        report.monitored, report.t, report.t_label, report.v_root, report.f_root
    );
    let _ = writeln!(
        s,
        "search\tcandidates={}\tevaluations={}\tbest_fitness={}\trecovered_root={}\trecovery_ratio={}",
        report.candidates.len(),
        report.evaluations,
        report.best_fitness,
        report.recovered_root,
        report.recovery_ratio
    );
    for node in &report.nodes {
        let mut line = format!("node\t{}\trecovery={:.6}", node.key, node.recovery);
        for (metric, v, f) in &node.deviations {
            let _ = write!(line, "\t{metric}={v}/{f}");
        }
        let _ = writeln!(s, "{line}");
    }
    for cand in &report.candidates {
        let _ = writeln!(
            s,
            "candidate\t{}\tscore={:.6}\trel_dev={:.6}",
            cand.key, cand.score, cand.rel_dev
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "== summary ==");
    let deviation_pct = 100.0 * (report.v_root - report.f_root) / report.f_root;
    let _ = writeln!(
        s,
        "Anomaly on {} at t={}: observed {:.4}, expected {:.4} ({:+.1}%).",
        report.monitored, report.t_label, report.v_root, report.f_root, deviation_pct
    );
    if report.nodes.is_empty() {
        let _ = writeln!(s, "No selected root-cause set improved on doing nothing.");
    } else {
        let _ = writeln!(
            s,
            "Root cause ({} node{}, recovery {:.0}%):",
            report.nodes.len(),
            if report.nodes.len() == 1 { "" } else { "s" },
            100.0 * report.recovery_ratio.clamp(0.0, 1.0)
        );
        for (i, node) in report.nodes.iter().enumerate() {
            let _ = writeln!(
                s,
                "  {}. {}  (recovery {:.2})",
                i + 1,
                node.key,
                node.recovery.clamp(0.0, 1.0)
            );
        }
    }
    s
}
