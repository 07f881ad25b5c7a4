//! Graph-attention model of the child-to-parent metric relationship.
//!
//! Every two-layer subtree of the dimension tree applies the same unknown
//! aggregation and calculation, so one shared single-layer multi-head
//! attention block is trained on all (timestamp, internal node) subtrees:
//! children's fundamental metrics (plus a depth feature) are projected per
//! head, attention-weighted, passed through an ELU and a one-hidden-layer
//! MLP head that predicts the parent's fundamental and derived metrics.
//! Predicted parent fundamentals feed the next level up, so composing the
//! block level by level maps raw leaves to a root prediction.
//!
//! The attention query for a subtree is the mean of its (normalized) child
//! features: the parent's own inputs are unknown during bottom-up
//! composition, and the mean keeps the block invariant to child order.
//!
//! Training minimizes summed squared error with Adam; gradients are exact
//! analytic derivatives of the forward pass (checked against central
//! finite differences in the test suite). Everything is deterministic for
//! a fixed seed. A trained model is immutable and safe to share across
//! threads.

use std::fmt::Write as _;
use std::ops::Range;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::panel::MetricPanel;
use crate::relation::{LeafValues, NodePredictions, RelationError, Relationship};
use crate::schema::MetricSchema;
use crate::tree::{DimensionTree, NodeId};

#[derive(Debug, Error)]
pub enum GatError {
    #[error("training needs at least {want} timestamps, panel has {got}")]
    TooFewTimestamps { got: usize, want: usize },
    #[error("panel is missing ({node}, {metric}) at t={t}; training needs full coverage")]
    MissingCell {
        node: String,
        metric: String,
        t: usize,
    },
    #[error("training diverged at epoch {epoch} (non-finite loss, learning rate {lr})")]
    Diverged { epoch: usize, lr: f64 },
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("model file: {0}")]
    Parse(String),
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GatConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub val_fraction: f64,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for GatConfig {
    fn default() -> Self {
        GatConfig {
            embed_dim: 8,
            heads: 8,
            epochs: 1000,
            learning_rate: 5e-4,
            patience: 50,
            val_fraction: 0.2,
            leaky_slope: 0.2,
            seed: 0,
        }
    }
}

impl GatConfig {
    fn check(&self) -> Result<(), GatError> {
        if self.heads == 0 || self.embed_dim == 0 {
            return Err(GatError::BadConfig(
                "heads and embed_dim must be at least 1".into(),
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(GatError::BadConfig(
                "val_fraction must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Per-feature standardization. Scales are floored so they stay positive;
/// normalize-then-denormalize is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-12;

impl Normalizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty());
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for row in rows {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for row in rows {
            for (s, (v, m)) in var.iter_mut().zip(row.iter().zip(&mean)) {
                let d = v - m;
                *s += d * d;
            }
        }
        let std = var
            .into_iter()
            .map(|s| (s / n).sqrt().max(STD_FLOOR))
            .collect();
        Normalizer { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, norm: &[f64]) -> Vec<f64> {
        norm.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

/// Offsets into the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    feat: usize,
    embed: usize,
    heads: usize,
    hidden: usize,
    out: usize,
    w1_off: usize,
    b1_off: usize,
    w2_off: usize,
    b2_off: usize,
    total: usize,
}

impl Layout {
    fn new(feat: usize, embed: usize, heads: usize, out: usize) -> Self {
        let hidden = heads * embed;
        let per_head = embed * feat + 2 * embed;
        let w1_off = heads * per_head;
        let b1_off = w1_off + hidden * hidden;
        let w2_off = b1_off + hidden;
        let b2_off = w2_off + out * hidden;
        let total = b2_off + out;
        Layout {
            feat,
            embed,
            heads,
            hidden,
            out,
            w1_off,
            b1_off,
            w2_off,
            b2_off,
            total,
        }
    }

    fn w(&self, head: usize) -> Range<usize> {
        let per_head = self.embed * self.feat + 2 * self.embed;
        let start = head * per_head;
        start..start + self.embed * self.feat
    }

    fn theta(&self, head: usize) -> Range<usize> {
        let per_head = self.embed * self.feat + 2 * self.embed;
        let start = head * per_head + self.embed * self.feat;
        start..start + 2 * self.embed
    }

    fn w1(&self) -> Range<usize> {
        self.w1_off..self.w1_off + self.hidden * self.hidden
    }

    fn b1(&self) -> Range<usize> {
        self.b1_off..self.b1_off + self.hidden
    }

    fn w2(&self) -> Range<usize> {
        self.w2_off..self.w2_off + self.out * self.hidden
    }

    fn b2(&self) -> Range<usize> {
        self.b2_off..self.b2_off + self.out
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// One training example: a subtree's raw child features and the raw
/// observed parent metrics.
#[derive(Debug, Clone)]
pub struct SubtreeSample {
    /// Per child: P fundamentals followed by the child's depth.
    pub child_features: Vec<Vec<f64>>,
    /// Parent's P fundamentals followed by Q deriveds.
    pub target: Vec<f64>,
}

/// The learned relationship: per-head projection and attention parameters,
/// an MLP output head, and the input/output normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct GatModel {
    p_fund: usize,
    q_derived: usize,
    heads: usize,
    embed_dim: usize,
    leaky_slope: f64,
    seed: u64,
    fingerprint: u64,
    input_norm: Normalizer,
    output_norm: Normalizer,
    layout: Layout,
    params: Vec<f64>,
}

struct ForwardCache {
    xs: Vec<Vec<f64>>,
    query: Vec<f64>,
    // per head
    hq: Vec<Vec<f64>>,
    hjs: Vec<Vec<Vec<f64>>>,
    pre: Vec<Vec<f64>>,
    alpha: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    z: Vec<f64>,
    a_pre: Vec<f64>,
    a: Vec<f64>,
    y_norm: Vec<f64>,
}

impl GatModel {
    /// Fresh model with seeded uniform Glorot-style init.
    pub fn init(
        config: &GatConfig,
        p_fund: usize,
        q_derived: usize,
        input_norm: Normalizer,
        output_norm: Normalizer,
        fingerprint: u64,
    ) -> Result<Self, GatError> {
        config.check()?;
        let feat = p_fund + 1;
        let out = p_fund + q_derived;
        assert_eq!(input_norm.mean.len(), feat);
        assert_eq!(output_norm.mean.len(), out);
        let layout = Layout::new(feat, config.embed_dim, config.heads, out);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = vec![0.0; layout.total];
        let mut fill = |range: Range<usize>, fan_in: usize, fan_out: usize, p: &mut Vec<f64>| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for slot in &mut p[range] {
                *slot = rng.random_range(-bound..bound);
            }
        };
        for k in 0..config.heads {
            fill(layout.w(k), feat, config.embed_dim, &mut params);
            fill(layout.theta(k), 2 * config.embed_dim, 1, &mut params);
        }
        fill(layout.w1(), layout.hidden, layout.hidden, &mut params);
        fill(layout.w2(), layout.hidden, out, &mut params);
        // b1, b2 start at zero
        Ok(GatModel {
            p_fund,
            q_derived,
            heads: config.heads,
            embed_dim: config.embed_dim,
            leaky_slope: config.leaky_slope,
            seed: config.seed,
            fingerprint,
            input_norm,
            output_norm,
            layout,
            params,
        })
    }

    pub fn num_fundamentals(&self) -> usize {
        self.p_fund
    }

    pub fn num_derived(&self) -> usize {
        self.q_derived
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn input_norm(&self) -> &Normalizer {
        &self.input_norm
    }

    pub fn output_norm(&self) -> &Normalizer {
        &self.output_norm
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn matvec(&self, range: Range<usize>, rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let w = &self.params[range];
        let mut out = vec![0.0; rows];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &w[r * cols..(r + 1) * cols];
            let mut acc = 0.0;
            for (wv, xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            *o = acc;
        }
        out
    }

    /// Attention weights per head over `children`, computed from raw
    /// feature vectors (normalized internally). Each head's weights are a
    /// softmax over leaky-rectified scores, so they are nonnegative and sum
    /// to one.
    pub fn attention_coefficients(
        &self,
        parent_features: &[f64],
        child_features: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        assert!(!child_features.is_empty(), "attention needs >= 1 child");
        let q = self.input_norm.normalize(parent_features);
        let xs: Vec<Vec<f64>> = child_features
            .iter()
            .map(|c| self.input_norm.normalize(c))
            .collect();
        (0..self.heads)
            .map(|k| self.head_attention(k, &q, &xs).1)
            .collect()
    }

    /// (pre-activation scores, softmax weights) of one head.
    fn head_attention(&self, head: usize, q: &[f64], xs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let l = &self.layout;
        let hq = self.matvec(l.w(head), l.embed, l.feat, q);
        let theta = &self.params[l.theta(head)];
        let (tq, tj) = theta.split_at(l.embed);
        let base: f64 = tq.iter().zip(&hq).map(|(a, b)| a * b).sum();
        let pre: Vec<f64> = xs
            .iter()
            .map(|x| {
                let hj = self.matvec(l.w(head), l.embed, l.feat, x);
                let score = base + tj.iter().zip(&hj).map(|(a, b)| a * b).sum::<f64>();
                if score > 0.0 {
                    score
                } else {
                    self.leaky_slope * score
                }
            })
            .collect();
        let max = pre.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = pre.iter().map(|s| (s - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let alpha = exps.into_iter().map(|e| e / sum).collect();
        (pre, alpha)
    }

    fn forward(&self, child_features: &[Vec<f64>]) -> ForwardCache {
        assert!(!child_features.is_empty(), "subtree needs >= 1 child");
        let l = &self.layout;
        let xs: Vec<Vec<f64>> = child_features
            .iter()
            .map(|c| self.input_norm.normalize(c))
            .collect();
        let n = xs.len() as f64;
        let mut query = vec![0.0; l.feat];
        for x in &xs {
            for (qv, xv) in query.iter_mut().zip(x) {
                *qv += xv / n;
            }
        }

        let mut hq = Vec::with_capacity(l.heads);
        let mut hjs = Vec::with_capacity(l.heads);
        let mut pre = Vec::with_capacity(l.heads);
        let mut alpha = Vec::with_capacity(l.heads);
        let mut u = Vec::with_capacity(l.heads);
        let mut z = vec![0.0; l.hidden];
        for k in 0..l.heads {
            let hq_k = self.matvec(l.w(k), l.embed, l.feat, &query);
            let hj_k: Vec<Vec<f64>> = xs
                .iter()
                .map(|x| self.matvec(l.w(k), l.embed, l.feat, x))
                .collect();
            let theta = &self.params[l.theta(k)];
            let (tq, tj) = theta.split_at(l.embed);
            let base: f64 = tq.iter().zip(&hq_k).map(|(a, b)| a * b).sum();
            let pre_k: Vec<f64> = hj_k
                .iter()
                .map(|hj| {
                    let s = base + tj.iter().zip(hj).map(|(a, b)| a * b).sum::<f64>();
                    if s > 0.0 {
                        s
                    } else {
                        self.leaky_slope * s
                    }
                })
                .collect();
            let max = pre_k.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = pre_k.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let alpha_k: Vec<f64> = exps.into_iter().map(|e| e / sum).collect();
            let mut u_k = vec![0.0; l.embed];
            for (a, hj) in alpha_k.iter().zip(&hj_k) {
                for (uv, hv) in u_k.iter_mut().zip(hj) {
                    *uv += a * hv;
                }
            }
            for (e, uv) in u_k.iter().enumerate() {
                z[k * l.embed + e] = elu(*uv);
            }
            hq.push(hq_k);
            hjs.push(hj_k);
            pre.push(pre_k);
            alpha.push(alpha_k);
            u.push(u_k);
        }

        let mut a_pre = self.matvec(l.w1(), l.hidden, l.hidden, &z);
        for (v, b) in a_pre.iter_mut().zip(&self.params[l.b1()]) {
            *v += b;
        }
        let a: Vec<f64> = a_pre.iter().map(|&v| elu(v)).collect();
        let mut y_norm = self.matvec(l.w2(), l.out, l.hidden, &a);
        for (v, b) in y_norm.iter_mut().zip(&self.params[l.b2()]) {
            *v += b;
        }
        ForwardCache {
            xs,
            query,
            hq,
            hjs,
            pre,
            alpha,
            u,
            z,
            a_pre,
            a,
            y_norm,
        }
    }

    /// Predict a parent's metrics (P fundamentals then Q deriveds, raw
    /// units) from its children's raw feature vectors.
    pub fn forward_subtree(&self, child_features: &[Vec<f64>]) -> Vec<f64> {
        let cache = self.forward(child_features);
        self.output_norm.denormalize(&cache.y_norm)
    }

    /// Mean-over-heads attention of one subtree, used for leaf importance.
    fn mean_attention(&self, child_features: &[Vec<f64>]) -> Vec<f64> {
        let cache = self.forward(child_features);
        let n = child_features.len();
        let mut out = vec![0.0; n];
        for alpha_k in &cache.alpha {
            for (o, a) in out.iter_mut().zip(alpha_k) {
                *o += a / self.heads as f64;
            }
        }
        out
    }

    /// Sum of squared normalized errors over a batch, plus the analytic
    /// gradient with respect to every parameter.
    pub fn batch_loss_and_grad(&self, batch: &[SubtreeSample]) -> (f64, Vec<f64>) {
        let l = &self.layout;
        let mut grad = vec![0.0; l.total];
        let mut loss = 0.0;
        for sample in batch {
            let cache = self.forward(&sample.child_features);
            let target = self.output_norm.normalize(&sample.target);
            let mut dy = vec![0.0; l.out];
            for (i, (yv, tv)) in cache.y_norm.iter().zip(&target).enumerate() {
                let d = yv - tv;
                loss += d * d;
                dy[i] = 2.0 * d;
            }
            self.backward(&cache, &dy, &mut grad);
        }
        (loss, grad)
    }

    /// Forward-only batch loss (used by validation and finite differences).
    pub fn batch_loss(&self, batch: &[SubtreeSample]) -> f64 {
        let mut loss = 0.0;
        for sample in batch {
            let cache = self.forward(&sample.child_features);
            let target = self.output_norm.normalize(&sample.target);
            for (yv, tv) in cache.y_norm.iter().zip(&target) {
                let d = yv - tv;
                loss += d * d;
            }
        }
        loss
    }

    fn backward(&self, cache: &ForwardCache, dy: &[f64], grad: &mut [f64]) {
        let l = &self.layout;
        // output layer
        let w2 = l.w2();
        for (o, dyo) in dy.iter().enumerate() {
            for (h, av) in cache.a.iter().enumerate() {
                grad[w2.start + o * l.hidden + h] += dyo * av;
            }
            grad[l.b2().start + o] += dyo;
        }
        let mut da = vec![0.0; l.hidden];
        let w2s = &self.params[l.w2()];
        for (o, dyo) in dy.iter().enumerate() {
            for (h, dav) in da.iter_mut().enumerate() {
                *dav += dyo * w2s[o * l.hidden + h];
            }
        }
        // hidden layer
        let mut dz = vec![0.0; l.hidden];
        let w1 = l.w1();
        let w1s = &self.params[l.w1()];
        for h in 0..l.hidden {
            let d = da[h] * elu_grad(cache.a_pre[h]);
            for (zi, zv) in cache.z.iter().enumerate() {
                grad[w1.start + h * l.hidden + zi] += d * zv;
                dz[zi] += d * w1s[h * l.hidden + zi];
            }
            grad[l.b1().start + h] += d;
        }
        // attention heads
        let n_children = cache.xs.len();
        for k in 0..l.heads {
            let theta = &self.params[l.theta(k)];
            let (tq, tj) = theta.split_at(l.embed);
            let alpha = &cache.alpha[k];
            let hjs = &cache.hjs[k];
            let u = &cache.u[k];
            // du = dz_k ⊙ elu'(u)
            let du: Vec<f64> = (0..l.embed)
                .map(|e| dz[k * l.embed + e] * elu_grad(u[e]))
                .collect();
            // u = Σ_j α_j h_j
            let mut dalpha = vec![0.0; n_children];
            let mut dhj: Vec<Vec<f64>> = vec![vec![0.0; l.embed]; n_children];
            for j in 0..n_children {
                let hj = &hjs[j];
                let mut acc = 0.0;
                for e in 0..l.embed {
                    acc += du[e] * hj[e];
                    dhj[j][e] += alpha[j] * du[e];
                }
                dalpha[j] = acc;
            }
            // softmax backward
            let dot: f64 = alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
            let de: Vec<f64> = alpha
                .iter()
                .zip(&dalpha)
                .map(|(a, d)| a * (d - dot))
                .collect();
            // leaky-relu backward into the raw scores
            let mut dhq = vec![0.0; l.embed];
            let mut dtheta = vec![0.0; 2 * l.embed];
            for j in 0..n_children {
                let slope = if cache.pre[k][j] > 0.0 {
                    1.0
                } else {
                    self.leaky_slope
                };
                let dpre = de[j] * slope;
                for e in 0..l.embed {
                    dtheta[e] += dpre * cache.hq[k][e];
                    dtheta[l.embed + e] += dpre * hjs[j][e];
                    dhq[e] += dpre * tq[e];
                    dhj[j][e] += dpre * tj[e];
                }
            }
            let th = l.theta(k);
            for (e, d) in dtheta.iter().enumerate() {
                grad[th.start + e] += d;
            }
            // projections: hq = W q, h_j = W x_j
            let w = l.w(k);
            for e in 0..l.embed {
                for f in 0..l.feat {
                    let mut acc = dhq[e] * cache.query[f];
                    for j in 0..n_children {
                        acc += dhj[j][e] * cache.xs[j][f];
                    }
                    grad[w.start + e * l.feat + f] += acc;
                }
            }
        }
    }
}

/// Per-epoch training statistics; losses are mean squared error per output
/// term in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

/// Extract one timestamp's subtree samples from a full panel.
fn subtree_batch(
    tree: &DimensionTree,
    panel: &MetricPanel,
    metric_ids: &[usize],
    p: usize,
    t: usize,
    node_rows: &[usize],
) -> Result<Vec<SubtreeSample>, GatError> {
    let cell = |node: NodeId, m: usize| -> Result<f64, GatError> {
        panel
            .get_by_index(node_rows[node], metric_ids[m], t)
            .filter(|v| v.is_finite())
            .ok_or_else(|| GatError::MissingCell {
                node: tree.key(node).to_string(),
                metric: panel.metrics()[metric_ids[m]].clone(),
                t,
            })
    };
    let mut batch = Vec::new();
    for id in tree.internal_bottom_up() {
        let mut child_features = Vec::with_capacity(tree.children(id).len());
        for &child in tree.children(id) {
            let mut feats = Vec::with_capacity(p + 1);
            for m in 0..p {
                feats.push(cell(child, m)?);
            }
            feats.push(tree.depth(child) as f64);
            child_features.push(feats);
        }
        let mut target = Vec::with_capacity(metric_ids.len());
        for m in 0..metric_ids.len() {
            target.push(cell(id, m)?);
        }
        batch.push(SubtreeSample {
            child_features,
            target,
        });
    }
    Ok(batch)
}

/// Train on every (timestamp, internal node) subtree of a full panel. One
/// optimizer step per timestamp (the batch is all internal subtrees at that
/// timestamp); the final `val_fraction` of timestamps (chronological) form
/// the validation split used for early stopping.
pub fn train(
    config: &GatConfig,
    tree: &DimensionTree,
    metrics: &MetricSchema,
    panel: &MetricPanel,
) -> Result<(GatModel, TrainingLog), GatError> {
    config.check()?;
    let t_len = panel.t_len();
    if t_len < 10 {
        return Err(GatError::TooFewTimestamps {
            got: t_len,
            want: 10,
        });
    }
    let p = metrics.num_fundamentals();
    let out_dim = p + metrics.num_derived();
    let metric_ids: Vec<usize> = metrics
        .metric_names()
        .iter()
        .map(|n| {
            panel
                .metric_index(n)
                .ok_or_else(|| GatError::Parse(format!("panel lacks metric {n}")))
        })
        .collect::<Result<_, _>>()?;
    let node_rows: Vec<usize> = (0..tree.num_nodes())
        .map(|id| {
            panel
                .key_index(tree.key(id))
                .ok_or_else(|| GatError::MissingCell {
                    node: tree.key(id).to_string(),
                    metric: "*".into(),
                    t: 0,
                })
        })
        .collect::<Result<_, _>>()?;

    let val_len = ((t_len as f64 * config.val_fraction).round() as usize).clamp(1, t_len - 1);
    let train_len = t_len - val_len;

    let mut train_batches = Vec::with_capacity(train_len);
    for t in 0..train_len {
        train_batches.push(subtree_batch(tree, panel, &metric_ids, p, t, &node_rows)?);
    }
    let mut val_batches = Vec::with_capacity(val_len);
    for t in train_len..t_len {
        val_batches.push(subtree_batch(tree, panel, &metric_ids, p, t, &node_rows)?);
    }

    // normalization statistics from the training split only
    let mut input_rows = Vec::new();
    let mut output_rows = Vec::new();
    for batch in &train_batches {
        for sample in batch {
            input_rows.extend(sample.child_features.iter().cloned());
            output_rows.push(sample.target.clone());
        }
    }
    let input_norm = Normalizer::fit(&input_rows);
    let output_norm = Normalizer::fit(&output_rows);

    let fingerprint = metrics.fingerprint(tree.schema());
    let mut model = GatModel::init(
        config,
        p,
        metrics.num_derived(),
        input_norm,
        output_norm,
        fingerprint,
    )?;

    let train_terms: usize = train_batches.iter().map(|b| b.len() * out_dim).sum();
    let val_terms: usize = val_batches.iter().map(|b| b.len() * out_dim).sum();

    let mut adam = Adam::new(model.params.len(), config.learning_rate);
    let mut log = TrainingLog {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best_val = f64::INFINITY;
    let mut best_params = model.params.clone();
    let mut stale = 0usize;

    for epoch in 0..config.epochs {
        let mut train_sse = 0.0;
        for batch in &train_batches {
            let (loss, grad) = model.batch_loss_and_grad(batch);
            if !loss.is_finite() {
                return Err(GatError::Diverged {
                    epoch,
                    lr: config.learning_rate,
                });
            }
            train_sse += loss;
            adam.step(&mut model.params, &grad);
        }
        let val_sse: f64 = val_batches.iter().map(|b| model.batch_loss(b)).sum();
        if !val_sse.is_finite() {
            return Err(GatError::Diverged {
                epoch,
                lr: config.learning_rate,
            });
        }
        let stats = EpochStats {
            epoch,
            train_mse: train_sse / train_terms as f64,
            val_mse: val_sse / val_terms.max(1) as f64,
        };
        log.epochs.push(stats);
        if val_sse < best_val {
            best_val = val_sse;
            best_params.copy_from_slice(&model.params);
            log.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    model.params = best_params;
    Ok((model, log))
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

impl Relationship for GatModel {
    /// Bottom-up composition: each internal node is predicted from its
    /// children's features; predicted fundamentals feed the next level.
    fn propagate(
        &self,
        tree: &DimensionTree,
        leaves: &LeafValues,
    ) -> Result<NodePredictions, RelationError> {
        if leaves.rows.len() != tree.leaves().len() {
            return Err(RelationError::WrongLeafCount {
                want: tree.leaves().len(),
                got: leaves.rows.len(),
            });
        }
        let p = self.p_fund;
        let mut fundamentals: Vec<Option<Vec<f64>>> = vec![None; tree.num_nodes()];
        for (pos, &leaf) in tree.leaves().iter().enumerate() {
            if leaves.rows[pos].len() != p {
                return Err(RelationError::WrongFeatureCount {
                    want: p,
                    got: leaves.rows[pos].len(),
                });
            }
            fundamentals[leaf] = Some(leaves.rows[pos].clone());
        }
        let mut values: Vec<Option<Vec<f64>>> = vec![None; tree.num_nodes()];
        for id in tree.internal_bottom_up() {
            let child_features: Vec<Vec<f64>> = tree
                .children(id)
                .iter()
                .map(|&c| {
                    let mut feats = fundamentals[c].clone().expect("bottom-up order");
                    feats.push(tree.depth(c) as f64);
                    feats
                })
                .collect();
            let pred = self.forward_subtree(&child_features);
            fundamentals[id] = Some(pred[..p].to_vec());
            values[id] = Some(pred);
        }
        Ok(NodePredictions { values })
    }

    /// Edge weight = mean-over-heads attention; a leaf's importance is the
    /// product of edge weights along its path to the root, renormalized to
    /// sum to 1 over leaves.
    fn leaf_importance(
        &self,
        tree: &DimensionTree,
        leaves: &LeafValues,
    ) -> Result<Vec<f64>, RelationError> {
        if leaves.rows.len() != tree.leaves().len() {
            return Err(RelationError::WrongLeafCount {
                want: tree.leaves().len(),
                got: leaves.rows.len(),
            });
        }
        let p = self.p_fund;
        let mut fundamentals: Vec<Option<Vec<f64>>> = vec![None; tree.num_nodes()];
        for (pos, &leaf) in tree.leaves().iter().enumerate() {
            fundamentals[leaf] = Some(leaves.rows[pos].clone());
        }
        let mut edge = vec![0.0; tree.num_nodes()];
        for id in tree.internal_bottom_up() {
            let child_features: Vec<Vec<f64>> = tree
                .children(id)
                .iter()
                .map(|&c| {
                    let mut feats = fundamentals[c].clone().expect("bottom-up order");
                    feats.push(tree.depth(c) as f64);
                    feats
                })
                .collect();
            let mean_alpha = self.mean_attention(&child_features);
            for (&c, a) in tree.children(id).iter().zip(&mean_alpha) {
                edge[c] = *a;
            }
            let pred = self.forward_subtree(&child_features);
            fundamentals[id] = Some(pred[..p].to_vec());
        }
        let mut path = vec![0.0; tree.num_nodes()];
        path[tree.root()] = 1.0;
        let mut order: Vec<NodeId> = (0..tree.num_nodes()).collect();
        order.sort_by_key(|&id| tree.depth(id));
        for id in order {
            if let Some(parent) = tree.parent(id) {
                path[id] = path[parent] * edge[id];
            }
        }
        let mut importance: Vec<f64> = tree.leaves().iter().map(|&l| path[l]).collect();
        let sum: f64 = importance.iter().sum();
        if sum > 0.0 {
            for v in &mut importance {
                *v /= sum;
            }
        }
        Ok(importance)
    }
}

// ---------------------------------------------------------------------------
// serialization

const MODEL_HEADER: &str = "rca-gat-model v1";

impl GatModel {
    /// Versioned self-describing text form; floats carry 17 significant
    /// digits so values round-trip bit-exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MODEL_HEADER}");
        let _ = writeln!(s, "p {}", self.p_fund);
        let _ = writeln!(s, "q {}", self.q_derived);
        let _ = writeln!(s, "heads {}", self.heads);
        let _ = writeln!(s, "embed {}", self.embed_dim);
        let _ = writeln!(s, "leaky_slope {:.17e}", self.leaky_slope);
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "fingerprint {:016x}", self.fingerprint);
        let vecline = |name: &str, v: &[f64], s: &mut String| {
            let _ = write!(s, "{name}");
            for x in v {
                let _ = write!(s, " {x:.17e}");
            }
            let _ = writeln!(s);
        };
        vecline("input_mean", &self.input_norm.mean, &mut s);
        vecline("input_std", &self.input_norm.std, &mut s);
        vecline("output_mean", &self.output_norm.mean, &mut s);
        vecline("output_std", &self.output_norm.std, &mut s);
        vecline("params", &self.params, &mut s);
        let _ = writeln!(s, "end");
        s
    }

    pub fn from_text(text: &str) -> Result<Self, GatError> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header.trim() != MODEL_HEADER {
            return Err(GatError::Parse(format!(
                "expected header `{MODEL_HEADER}`, got `{header}`"
            )));
        }
        let mut p = None;
        let mut q = None;
        let mut heads = None;
        let mut embed = None;
        let mut leaky = None;
        let mut seed = None;
        let mut fingerprint = None;
        let mut input_mean = None;
        let mut input_std = None;
        let mut output_mean = None;
        let mut output_std = None;
        let mut params: Option<Vec<f64>> = None;
        for line in lines {
            let line = line.trim();
            if line.is_empty() || line == "end" {
                continue;
            }
            let (key, rest) = line.split_once(' ').ok_or_else(|| {
                GatError::Parse(format!("bad line `{line}`"))
            })?;
            let floats = || -> Result<Vec<f64>, GatError> {
                rest.split_whitespace()
                    .map(|tok| {
                        tok.parse::<f64>()
                            .map_err(|_| GatError::Parse(format!("bad float `{tok}`")))
                    })
                    .collect()
            };
            match key {
                "p" => p = rest.trim().parse().ok(),
                "q" => q = rest.trim().parse().ok(),
                "heads" => heads = rest.trim().parse().ok(),
                "embed" => embed = rest.trim().parse().ok(),
                "leaky_slope" => leaky = rest.trim().parse().ok(),
                "seed" => seed = rest.trim().parse().ok(),
                "fingerprint" => fingerprint = u64::from_str_radix(rest.trim(), 16).ok(),
                "input_mean" => input_mean = Some(floats()?),
                "input_std" => input_std = Some(floats()?),
                "output_mean" => output_mean = Some(floats()?),
                "output_std" => output_std = Some(floats()?),
                "params" => params = Some(floats()?),
                other => return Err(GatError::Parse(format!("unknown key `{other}`"))),
            }
        }
        let missing = |k: &str| GatError::Parse(format!("missing `{k}`"));
        let p: usize = p.ok_or_else(|| missing("p"))?;
        let q: usize = q.ok_or_else(|| missing("q"))?;
        let heads: usize = heads.ok_or_else(|| missing("heads"))?;
        let embed: usize = embed.ok_or_else(|| missing("embed"))?;
        let layout = Layout::new(p + 1, embed, heads, p + q);
        let params = params.ok_or_else(|| missing("params"))?;
        if params.len() != layout.total {
            return Err(GatError::Parse(format!(
                "expected {} parameters, file has {}",
                layout.total,
                params.len()
            )));
        }
        let input_norm = Normalizer {
            mean: input_mean.ok_or_else(|| missing("input_mean"))?,
            std: input_std.ok_or_else(|| missing("input_std"))?,
        };
        let output_norm = Normalizer {
            mean: output_mean.ok_or_else(|| missing("output_mean"))?,
            std: output_std.ok_or_else(|| missing("output_std"))?,
        };
        if input_norm.mean.len() != p + 1 || input_norm.std.len() != p + 1 {
            return Err(GatError::Parse("input normalizer has wrong arity".into()));
        }
        if output_norm.mean.len() != p + q || output_norm.std.len() != p + q {
            return Err(GatError::Parse("output normalizer has wrong arity".into()));
        }
        if output_norm.std.iter().chain(&input_norm.std).any(|s| *s <= 0.0) {
            return Err(GatError::Parse("normalizer scales must be positive".into()));
        }
        Ok(GatModel {
            p_fund: p,
            q_derived: q,
            heads,
            embed_dim: embed,
            leaky_slope: leaky.ok_or_else(|| missing("leaky_slope"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            fingerprint: fingerprint.ok_or_else(|| missing("fingerprint"))?,
            input_norm,
            output_norm,
            layout,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn small_model(seed: u64) -> GatModel {
        let config = GatConfig {
            embed_dim: 3,
            heads: 2,
            seed,
            ..GatConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        let dim_in = 3; // p=2 plus depth
        let dim_out = 3; // p=2, q=1
        let input_norm = Normalizer {
            mean: (0..dim_in).map(|_| rng.random_range(-1.0..1.0)).collect(),
            std: (0..dim_in).map(|_| rng.random_range(0.5..2.0)).collect(),
        };
        let output_norm = Normalizer {
            mean: (0..dim_out).map(|_| rng.random_range(-1.0..1.0)).collect(),
            std: (0..dim_out).map(|_| rng.random_range(0.5..2.0)).collect(),
        };
        GatModel::init(&config, 2, 1, input_norm, output_norm, 7).unwrap()
    }

    fn random_batch(seed: u64, samples: usize) -> Vec<SubtreeSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..samples)
            .map(|_| {
                let n = rng.random_range(1..5usize);
                SubtreeSample {
                    child_features: (0..n)
                        .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
                        .collect(),
                    target: (0..3).map(|_| rng.random_range(-2.0..2.0)).collect(),
                }
            })
            .collect()
    }

    #[test]
    fn identical_children_get_equal_attention() {
        let model = small_model(1);
        let child = vec![1.0, 2.0, 2.0];
        let alphas = model.attention_coefficients(&[1.0, 2.0, 2.0], &[child.clone(), child]);
        for head in alphas {
            assert_relative_eq!(head[0], 0.5, max_relative = 1e-12);
            assert_relative_eq!(head[1], 0.5, max_relative = 1e-12);
        }
    }

    #[test]
    fn singleton_child_gets_full_attention() {
        let model = small_model(2);
        let alphas = model.attention_coefficients(&[0.5, -1.0, 2.0], &[vec![3.0, 1.0, 2.0]]);
        for head in alphas {
            assert_eq!(head, vec![1.0]);
        }
    }

    #[test]
    fn attention_matches_independent_softmax_and_sums_to_one() {
        let model = small_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let children: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let parent: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let alphas = model.attention_coefficients(&parent, &children);

        // recompute each head's softmax by hand from raw scores
        let q = model.input_norm.normalize(&parent);
        let xs: Vec<Vec<f64>> = children
            .iter()
            .map(|c| model.input_norm.normalize(c))
            .collect();
        for (k, head) in alphas.iter().enumerate() {
            let (pre, _) = model.head_attention(k, &q, &xs);
            let exps: Vec<f64> = pre.iter().map(|s| s.exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (a, e) in head.iter().zip(&exps) {
                assert_relative_eq!(*a, e / sum, max_relative = 1e-10);
            }
            let total: f64 = head.iter().sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_output_head_predicts_output_mean() {
        let mut model = small_model(4);
        let (w2, b2) = (model.layout.w2(), model.layout.b2());
        for i in w2.chain(b2) {
            model.params[i] = 0.0;
        }
        let pred = model.forward_subtree(&[vec![1.0, 2.0, 1.0], vec![0.5, -1.0, 1.0]]);
        for (p, m) in pred.iter().zip(&model.output_norm.mean) {
            assert_relative_eq!(p, m, max_relative = 1e-12);
        }
    }

    #[test]
    fn forward_is_invariant_to_child_permutation() {
        let model = small_model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let children: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..3).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let base = model.forward_subtree(&children);
        let mut shuffled = children.clone();
        shuffled.reverse();
        shuffled.swap(0, 3);
        let permuted = model.forward_subtree(&shuffled);
        for (a, b) in base.iter().zip(&permuted) {
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for instance in 0..20u64 {
            let mut model = small_model(instance);
            let batch = random_batch(instance * 31 + 7, 3);
            let (_, grad) = model.batch_loss_and_grad(&batch);
            let h = 1e-5;
            for i in (0..model.params.len()).step_by(7) {
                let orig = model.params[i];
                model.params[i] = orig + h;
                let up = model.batch_loss(&batch);
                model.params[i] = orig - h;
                let down = model.batch_loss(&batch);
                model.params[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let denom = grad[i].abs().max(fd.abs()).max(1e-6);
                assert!(
                    (grad[i] - fd).abs() / denom <= 1e-4,
                    "instance {instance} param {i}: analytic {} vs fd {fd}",
                    grad[i]
                );
            }
        }
    }

    fn tiny_tree(dim_values: &[usize]) -> crate::tree::DimensionTree {
        use std::collections::BTreeSet;
        let schema = crate::schema::DimensionSchema::new(
            (0..dim_values.len()).map(|d| format!("d{d}")).collect(),
            dim_values
                .iter()
                .map(|&k| (0..k).map(|v| format!("v{v}")).collect())
                .collect(),
        )
        .unwrap();
        let mut all: Vec<Vec<String>> = vec![Vec::new()];
        for dim in 0..schema.num_dims() {
            let mut next = Vec::new();
            for partial in all {
                for value in schema.values_of(dim) {
                    let mut p = partial.clone();
                    p.push(value.clone());
                    next.push(p);
                }
            }
            all = next;
        }
        let keys: BTreeSet<crate::tree::NodeKey> = all
            .into_iter()
            .map(crate::tree::NodeKey::leaf)
            .collect();
        crate::tree::build_tree(&schema, &keys).unwrap()
    }

    #[test]
    fn depth_one_propagation_is_a_single_subtree_forward() {
        let model = small_model(21);
        let tree = tiny_tree(&[3]);
        let rows = vec![vec![1.0, 2.0], vec![0.5, 1.5], vec![2.0, 0.25]];
        let pred = model
            .propagate(&tree, &LeafValues::new(rows.clone()))
            .unwrap();
        let child_features: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let mut f = r.clone();
                f.push(1.0); // leaf depth in a one-dimension tree
                f
            })
            .collect();
        assert_eq!(pred.root(), model.forward_subtree(&child_features));
    }

    #[test]
    fn depth_one_importance_equals_mean_head_attention() {
        let model = small_model(22);
        let tree = tiny_tree(&[3]);
        let rows = vec![vec![1.0, 2.0], vec![0.5, 1.5], vec![2.0, 0.25]];
        let importance = model
            .leaf_importance(&tree, &LeafValues::new(rows.clone()))
            .unwrap();
        let child_features: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let mut f = r.clone();
                f.push(1.0);
                f
            })
            .collect();
        let alphas = model.attention_coefficients(
            &{
                // the internal query is the mean of the child features
                let mut q = vec![0.0; 3];
                for f in &child_features {
                    for (qv, fv) in q.iter_mut().zip(f) {
                        *qv += fv / 3.0;
                    }
                }
                q
            },
            &child_features,
        );
        let mean_heads: Vec<f64> = (0..3)
            .map(|j| alphas.iter().map(|head| head[j]).sum::<f64>() / alphas.len() as f64)
            .collect();
        for (imp, want) in importance.iter().zip(&mean_heads) {
            assert_relative_eq!(imp, want, max_relative = 1e-10);
        }
    }

    #[test]
    fn importance_is_a_normalized_product_of_path_attentions() {
        let model = small_model(23);
        let tree = tiny_tree(&[2, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|_| vec![rng.random_range(0.5..4.0), rng.random_range(0.5..4.0)])
            .collect();
        let importance = model
            .leaf_importance(&tree, &LeafValues::new(rows.clone()))
            .unwrap();
        let total: f64 = importance.iter().sum();
        assert!((total - 1.0).abs() < 1e-10);

        // recompute the path products by hand from per-subtree attentions
        let pred = model.propagate(&tree, &LeafValues::new(rows.clone())).unwrap();
        let mut by_hand = vec![0.0; 8];
        let root_children: Vec<Vec<f64>> = tree
            .children(tree.root())
            .iter()
            .map(|&c| {
                let mut f = pred.values[c].as_ref().unwrap()[..2].to_vec();
                f.push(tree.depth(c) as f64);
                f
            })
            .collect();
        let root_alphas = mean_heads_for(&model, &root_children);
        for (branch_pos, &branch) in tree.children(tree.root()).iter().enumerate() {
            let leaf_children: Vec<Vec<f64>> = tree
                .children(branch)
                .iter()
                .map(|&l| {
                    let pos = tree.leaf_position(l).unwrap();
                    let mut f = rows[pos].clone();
                    f.push(tree.depth(l) as f64);
                    f
                })
                .collect();
            let leaf_alphas = mean_heads_for(&model, &leaf_children);
            for (leaf_pos_in_branch, &l) in tree.children(branch).iter().enumerate() {
                let pos = tree.leaf_position(l).unwrap();
                by_hand[pos] = root_alphas[branch_pos] * leaf_alphas[leaf_pos_in_branch];
            }
        }
        let sum: f64 = by_hand.iter().sum();
        for v in &mut by_hand {
            *v /= sum;
        }
        for (got, want) in importance.iter().zip(&by_hand) {
            assert_relative_eq!(got, want, max_relative = 1e-10);
        }
    }

    fn mean_heads_for(model: &GatModel, children: &[Vec<f64>]) -> Vec<f64> {
        let mut q = vec![0.0; children[0].len()];
        for f in children {
            for (qv, fv) in q.iter_mut().zip(f) {
                *qv += fv / children.len() as f64;
            }
        }
        let alphas = model.attention_coefficients(&q, children);
        (0..children.len())
            .map(|j| alphas.iter().map(|head| head[j]).sum::<f64>() / alphas.len() as f64)
            .collect()
    }

    #[test]
    fn normalizer_round_trip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..4).map(|_| rng.random_range(-100.0..100.0)).collect())
            .collect();
        let norm = Normalizer::fit(&rows);
        for row in &rows {
            let back = norm.denormalize(&norm.normalize(row));
            for (a, b) in row.iter().zip(&back) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn serialization_round_trips_bitwise() {
        let model = small_model(11);
        let text = model.to_text();
        let reloaded = GatModel::from_text(&text).unwrap();
        assert_eq!(model, reloaded);
        let input = vec![vec![0.3, -1.7, 2.0], vec![2.2, 0.1, 2.0]];
        let a = model.forward_subtree(&input);
        let b = reloaded.forward_subtree(&input);
        assert_eq!(a, b, "predictions must be bitwise equal after reload");
    }

    #[test]
    fn rejects_garbled_model_file() {
        assert!(GatModel::from_text("not a model").is_err());
        let model = small_model(12);
        let text = model.to_text().replace("params", "parms");
        assert!(GatModel::from_text(&text).is_err());
    }
}
