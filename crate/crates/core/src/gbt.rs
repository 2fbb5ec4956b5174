//! Depth-limited second-order gradient-boosted regression trees with a
//! pluggable loss contract.
//!
//! Each round computes per-observation gradients and Hessians at the current
//! raw scores and grows one greedy tree per output coordinate. Split search
//! is exact: every feature, every midpoint between consecutive distinct
//! sorted values, ties broken toward the lower feature index and lower
//! threshold. Determinism is load-bearing here — the consistency experiments
//! compare uncertainty estimates across refits.

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-observation Hessians are floored before aggregation; NLL losses have
/// vanishing curvature at degenerate points and the leaf formulas divide by
/// the Hessian sum.
pub const HESSIAN_FLOOR: f64 = 1e-6;

/// Hyperparameters of the learning pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// Split penalty: a split is kept only when its gain exceeds zero after
    /// subtracting `gamma`.
    pub gamma: f64,
    /// L2 leaf regularizer in the weight and gain denominators.
    pub ridge: f64,
    /// Per-round row sampling fraction; sampling is with replacement.
    /// 1.0 disables sampling entirely.
    pub bag_fraction: f64,
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n_trees: 150,
            max_depth: 3,
            learning_rate: 0.1,
            gamma: 0.0,
            ridge: 1.0,
            bag_fraction: 1.0,
            min_leaf: 5,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 {
            return Err(Error::config("max_depth", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::config("learning_rate", "must lie in (0,1]"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config("gamma", "must be nonnegative"));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::config("ridge", "must be nonnegative"));
        }
        if !(self.bag_fraction > 0.0 && self.bag_fraction <= 1.0) {
            return Err(Error::config("bag_fraction", "must lie in (0,1]"));
        }
        if self.min_leaf == 0 {
            return Err(Error::config("min_leaf", "must be at least 1"));
        }
        Ok(())
    }
}

/// Twice-differentiable per-observation objective over one or two raw scores.
///
/// `gradient`/`hessian` fill one entry per output coordinate (diagonal
/// Hessian approximation); `link` maps raw scores to prediction space
/// `(mu, sigma)` with `sigma >= 0`.
pub trait Loss: Send + Sync {
    fn name(&self) -> &'static str;
    fn n_outputs(&self) -> usize;
    fn value(&self, y: f64, scores: &[f64]) -> f64;
    fn gradient(&self, y: f64, scores: &[f64], out: &mut [f64]);
    fn hessian(&self, y: f64, scores: &[f64], out: &mut [f64]);
    fn link(&self, scores: &[f64]) -> (f64, f64);
    /// Per-coordinate loss-minimizing constants used as the round-0 scores.
    fn base_score(&self, targets: &[f64]) -> Vec<f64>;
}

/// Optimal leaf weight for aggregated gradient/Hessian sums.
pub fn leaf_weight(g_sum: f64, h_sum: f64, ridge: f64) -> Result<f64> {
    let denom = h_sum + ridge;
    if !(denom > 0.0) {
        return Err(Error::numerical(format!(
            "leaf weight denominator must be positive, got {denom}"
        )));
    }
    Ok(-g_sum / denom)
}

/// Gain of splitting a node into (left, right) children, minus the split
/// penalty `gamma`.
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, ridge: f64, gamma: f64) -> Result<f64> {
    let (dl, dr, dt) = (hl + ridge, hr + ridge, hl + hr + ridge);
    if !(dl > 0.0 && dr > 0.0 && dt > 0.0) {
        return Err(Error::numerical(format!(
            "split gain denominators must be positive, got ({dl}, {dr}, {dt})"
        )));
    }
    let gt = gl + gr;
    Ok(0.5 * (gl * gl / dl + gr * gr / dr - gt * gt / dt) - gamma)
}

/// Draws `max(1, round(fraction * n))` row indices uniformly with
/// replacement. This is the resampling primitive behind both per-round
/// bagging and the bootstrap ensembles.
pub fn bootstrap_indices(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with_replacement(n, fraction, &mut rng)
}

fn sample_with_replacement(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let m = ((n as f64 * fraction).round() as usize).max(1);
    (0..m).map(|_| rng.gen_range(0..n)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Branch {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        weight: f64,
    },
}

/// A single regression tree. Rows route left when `x[feature] < threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
    pub root: usize,
}

impl Tree {
    pub fn leaf(weight: f64) -> Tree {
        Tree {
            nodes: vec![Node::Leaf { weight }],
            root: 0,
        }
    }

    /// Raw (unscaled) leaf value for one row of column-major features.
    pub fn value_for_row(&self, columns: &[Vec<f64>], row: usize) -> f64 {
        let mut at = self.root;
        loop {
            match self.nodes[at] {
                Node::Leaf { weight } => return weight,
                Node::Branch {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if columns[feature][row] < threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Branch { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, self.root)
    }
}

/// An additive tree ensemble per output coordinate.
///
/// Raw prediction for coordinate `k` is
/// `base_score[k] + learning_rate * sum of tree values`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedModel {
    pub n_outputs: usize,
    pub n_features: usize,
    pub base_score: Vec<f64>,
    pub learning_rate: f64,
    /// `trees[k]` is the tree sequence for output coordinate `k`.
    pub trees: Vec<Vec<Tree>>,
    /// Mean training loss recorded after each boosting round.
    pub training_loss: Vec<f64>,
}

const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    format_version: u32,
    model: BoostedModel,
}

impl BoostedModel {
    fn check_dims(&self, columns: &[Vec<f64>]) -> Result<()> {
        if columns.len() != self.n_features {
            return Err(Error::domain(format!(
                "feature dimension mismatch: model expects {}, got {}",
                self.n_features,
                columns.len()
            )));
        }
        Ok(())
    }

    /// Raw scores for every row; result is `[coordinate][row]`.
    pub fn predict_scores(&self, columns: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.check_dims(columns)?;
        let n = columns.first().map_or(0, |c| c.len());
        let mut out = Vec::with_capacity(self.n_outputs);
        for k in 0..self.n_outputs {
            let mut scores = vec![self.base_score[k]; n];
            for tree in &self.trees[k] {
                for (i, s) in scores.iter_mut().enumerate() {
                    *s += self.learning_rate * tree.value_for_row(columns, i);
                }
            }
            out.push(scores);
        }
        Ok(out)
    }

    /// Raw scores for a single row.
    pub fn predict_row(&self, columns: &[Vec<f64>], row: usize) -> Result<Vec<f64>> {
        self.check_dims(columns)?;
        Ok((0..self.n_outputs)
            .map(|k| {
                self.base_score[k]
                    + self.learning_rate
                        * self.trees[k]
                            .iter()
                            .map(|t| t.value_for_row(columns, row))
                            .sum::<f64>()
            })
            .collect())
    }

    /// Predictions mapped through the loss link: one `(mu, sigma)` per row.
    pub fn predict_linked(&self, columns: &[Vec<f64>], loss: &dyn Loss) -> Result<Vec<(f64, f64)>> {
        let scores = self.predict_scores(columns)?;
        let n = scores.first().map_or(0, |s| s.len());
        let mut buf = vec![0.0; self.n_outputs];
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            for (b, col) in buf.iter_mut().zip(&scores) {
                *b = col[i];
            }
            out.push(loss.link(&buf));
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<BoostedModel> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::schema(format!(
                "unsupported model format version {}",
                doc.format_version
            )));
        }
        Ok(doc.model)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<BoostedModel> {
        BoostedModel::from_json(&std::fs::read_to_string(path)?)
    }
}

struct GrowContext<'a> {
    columns: &'a [Vec<f64>],
    /// Per-row bag multiplicity as f64; all ones without row sampling.
    weight: &'a [f64],
    count: &'a [u32],
    grad: &'a [f64],
    hess: &'a [f64],
    config: &'a PipelineConfig,
    /// True when every row carries multiplicity one (no bagging), which
    /// lets scans skip the weight lookups.
    uniform: bool,
    /// Scaled leaf updates applied to training scores at leaf creation;
    /// absent when row bagging leaves out-of-bag rows to a post-pass.
    apply_rate: Option<f64>,
}

#[derive(Clone, Copy)]
struct SplitChoice {
    feature: usize,
    threshold: f64,
    gain: f64,
    left_positions: usize,
}

/// Grows one tree from per-feature row lists presorted by feature value.
fn grow_tree(
    ctx: &GrowContext,
    lists: Vec<Vec<u32>>,
    side: &mut [u8],
    scores: &mut [f64],
) -> Result<Tree> {
    let mut nodes = Vec::new();
    let root = grow_node(ctx, lists, 0, &mut nodes, side, scores)?;
    Ok(Tree { nodes, root })
}

fn node_sums(ctx: &GrowContext, rows: &[u32]) -> (f64, f64, usize) {
    let mut g = 0.0;
    let mut h = 0.0;
    if ctx.uniform {
        for &r in rows {
            let i = r as usize;
            g += ctx.grad[i];
            h += ctx.hess[i];
        }
        return (g, h, rows.len());
    }
    let mut c = 0usize;
    for &r in rows {
        let i = r as usize;
        g += ctx.weight[i] * ctx.grad[i];
        h += ctx.weight[i] * ctx.hess[i];
        c += ctx.count[i] as usize;
    }
    (g, h, c)
}

fn grow_node(
    ctx: &GrowContext,
    lists: Vec<Vec<u32>>,
    depth: usize,
    nodes: &mut Vec<Node>,
    side: &mut [u8],
    scores: &mut [f64],
) -> Result<usize> {
    let (g_sum, h_sum, count) = node_sums(ctx, &lists[0]);
    let cfg = ctx.config;
    let can_split = depth < cfg.max_depth && count >= 2 * cfg.min_leaf;
    let choice = if can_split {
        best_split(ctx, &lists, g_sum, h_sum, count)?
    } else {
        None
    };
    match choice {
        None => {
            let weight = leaf_weight(g_sum, h_sum, cfg.ridge)?;
            if !weight.is_finite() {
                return Err(Error::numerical("non-finite leaf weight".to_string()));
            }
            if let Some(rate) = ctx.apply_rate {
                for &r in &lists[0] {
                    scores[r as usize] += rate * weight;
                }
            }
            nodes.push(Node::Leaf { weight });
            Ok(nodes.len() - 1)
        }
        Some(best) => {
            // Mark the side of each row of this node, then partition every
            // feature list with one sequential pass each.
            for (pos, &r) in lists[best.feature].iter().enumerate() {
                side[r as usize] = u8::from(pos < best.left_positions);
            }
            let mut left_lists = Vec::with_capacity(lists.len());
            let mut right_lists = Vec::with_capacity(lists.len());
            for (f, rows) in lists.into_iter().enumerate() {
                if f == best.feature {
                    let (l, r) = rows.split_at(best.left_positions);
                    left_lists.push(l.to_vec());
                    right_lists.push(r.to_vec());
                } else {
                    let mut l = Vec::with_capacity(best.left_positions);
                    let mut r = Vec::with_capacity(rows.len() - best.left_positions);
                    for row in rows {
                        if side[row as usize] == 1 {
                            l.push(row);
                        } else {
                            r.push(row);
                        }
                    }
                    left_lists.push(l);
                    right_lists.push(r);
                }
            }
            let left = grow_node(ctx, left_lists, depth + 1, nodes, side, scores)?;
            let right = grow_node(ctx, right_lists, depth + 1, nodes, side, scores)?;
            nodes.push(Node::Branch {
                feature: best.feature,
                threshold: best.threshold,
                left,
                right,
            });
            Ok(nodes.len() - 1)
        }
    }
}

fn best_split(
    ctx: &GrowContext,
    lists: &[Vec<u32>],
    g_total: f64,
    h_total: f64,
    count_total: usize,
) -> Result<Option<SplitChoice>> {
    let cfg = ctx.config;
    let mut best: Option<SplitChoice> = None;
    let mut best_gain = 0.0f64; // only strictly positive gains split
    for (feature, rows) in lists.iter().enumerate() {
        let col = &ctx.columns[feature];
        // the parent's own term of the gain is constant across candidates
        let parent_term = {
            let dt = h_total + cfg.ridge;
            if !(dt > 0.0) {
                return Err(Error::numerical(format!(
                    "split gain denominator must be positive, got {dt}"
                )));
            }
            g_total * g_total / dt
        };
        let mut gl = 0.0;
        let mut hl = 0.0;
        let mut cl = 0usize;
        let mut v = col[rows[0] as usize];
        for (pos, &row) in rows.iter().enumerate() {
            let i = row as usize;
            if ctx.uniform {
                gl += ctx.grad[i];
                hl += ctx.hess[i];
                cl += 1;
            } else {
                gl += ctx.weight[i] * ctx.grad[i];
                hl += ctx.weight[i] * ctx.hess[i];
                cl += ctx.count[i] as usize;
            }
            if pos + 1 == rows.len() {
                break;
            }
            let v_next = col[rows[pos + 1] as usize];
            if v_next <= v {
                continue; // same distinct value group
            }
            let boundary = v;
            v = v_next;
            if cl < cfg.min_leaf || count_total - cl < cfg.min_leaf {
                continue;
            }
            let gr = g_total - gl;
            let gain = 0.5
                * (gl * gl / (hl + cfg.ridge) + gr * gr / ((h_total - hl) + cfg.ridge)
                    - parent_term)
                - cfg.gamma;
            if gain > best_gain {
                best_gain = gain;
                let mut threshold = 0.5 * (boundary + v_next);
                if threshold <= boundary {
                    threshold = v_next; // adjacent floats: keep the boundary value left
                }
                best = Some(SplitChoice {
                    feature,
                    threshold,
                    gain,
                    left_positions: pos + 1,
                });
            }
        }
    }
    Ok(best)
}

/// Per-feature argsort of the training columns; ties keep row order.
fn presort(columns: &[Vec<f64>]) -> Vec<Vec<u32>> {
    columns
        .iter()
        .map(|col| {
            let mut idx: Vec<u32> = (0..col.len() as u32).collect();
            idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]));
            idx
        })
        .collect()
}

/// Trains a boosted model. Deterministic given `(columns, targets, loss,
/// config)`; each round grows one tree per output coordinate, holding the
/// other coordinate's scores fixed.
pub fn fit(
    columns: &[Vec<f64>],
    targets: &[f64],
    loss: &dyn Loss,
    config: &PipelineConfig,
) -> Result<BoostedModel> {
    config.validate()?;
    let n = targets.len();
    if n == 0 {
        return Err(Error::domain("empty training set"));
    }
    if columns.is_empty() {
        return Err(Error::domain("training set has no feature columns"));
    }
    for col in columns {
        if col.len() != n {
            return Err(Error::domain("feature column length mismatch"));
        }
    }
    let n_outputs = loss.n_outputs();
    let base = loss.base_score(targets);
    debug_assert_eq!(base.len(), n_outputs);

    let mut scores: Vec<Vec<f64>> = base.iter().map(|&b| vec![b; n]).collect();
    let mut trees: Vec<Vec<Tree>> = vec![Vec::with_capacity(config.n_trees); n_outputs];
    let mut training_loss = Vec::with_capacity(config.n_trees);

    let global_sorted = presort(columns);
    let mut bag_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut counts: Vec<u32> = vec![1; n];
    let mut weight: Vec<f64> = vec![1.0; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut side = vec![0u8; n];
    let mut score_buf = vec![0.0; n_outputs];

    for round in 0..config.n_trees {
        let bagging = config.bag_fraction < 1.0;
        if bagging {
            counts.iter_mut().for_each(|c| *c = 0);
            for i in sample_with_replacement(n, config.bag_fraction, &mut bag_rng) {
                counts[i] += 1;
            }
            for (w, &c) in weight.iter_mut().zip(&counts) {
                *w = c as f64;
            }
        }
        for k in 0..n_outputs {
            let mut gbuf = vec![0.0; n_outputs];
            let mut hbuf = vec![0.0; n_outputs];
            for i in 0..n {
                for c in 0..n_outputs {
                    score_buf[c] = scores[c][i];
                }
                loss.gradient(targets[i], &score_buf, &mut gbuf);
                loss.hessian(targets[i], &score_buf, &mut hbuf);
                grad[i] = gbuf[k];
                hess[i] = hbuf[k].max(HESSIAN_FLOOR);
                if !grad[i].is_finite() || !hess[i].is_finite() {
                    return Err(Error::numerical(format!(
                        "non-finite gradient or Hessian at round {round}"
                    )));
                }
            }
            let lists: Vec<Vec<u32>> = if bagging {
                global_sorted
                    .iter()
                    .map(|order| {
                        order
                            .iter()
                            .copied()
                            .filter(|&r| counts[r as usize] > 0)
                            .collect()
                    })
                    .collect()
            } else {
                global_sorted.clone()
            };
            let ctx = GrowContext {
                columns,
                weight: &weight,
                count: &counts,
                grad: &grad,
                hess: &hess,
                config,
                uniform: !bagging,
                // in-bag rows get their score update at leaf creation; with
                // row sampling the out-of-bag rows need a traversal anyway
                apply_rate: (!bagging).then_some(config.learning_rate),
            };
            let tree = grow_tree(&ctx, lists, &mut side, &mut scores[k])?;
            if bagging {
                for (i, s) in scores[k].iter_mut().enumerate() {
                    *s += config.learning_rate * tree.value_for_row(columns, i);
                }
            }
            trees[k].push(tree);
        }
        let mut total = 0.0;
        for i in 0..n {
            for c in 0..n_outputs {
                score_buf[c] = scores[c][i];
            }
            total += loss.value(targets[i], &score_buf);
        }
        let mean = total / n as f64;
        if !mean.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite training loss at round {round}"
            )));
        }
        training_loss.push(mean);
    }

    Ok(BoostedModel {
        n_outputs,
        n_features: columns.len(),
        base_score: base,
        learning_rate: config.learning_rate,
        trees,
        training_loss,
    })
}

/// Hyperparameters eligible for consistency sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    MaxDepth,
    Gamma,
}

impl SweepParam {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "max_depth" => Ok(SweepParam::MaxDepth),
            "gamma" => Ok(SweepParam::Gamma),
            other => Err(Error::config(
                "hyperparam",
                format!("unknown sweep hyperparameter `{other}` (expected max_depth or gamma)"),
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::MaxDepth => "max_depth",
            SweepParam::Gamma => "gamma",
        }
    }

    /// Returns `base` with this hyperparameter set to `value`; everything
    /// else, including the seed, stays fixed.
    pub fn apply(&self, base: &PipelineConfig, value: f64) -> Result<PipelineConfig> {
        let mut config = base.clone();
        match self {
            SweepParam::MaxDepth => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::config(
                        "grid",
                        format!("max_depth grid value {value} is not a positive integer"),
                    ));
                }
                config.max_depth = value as usize;
            }
            SweepParam::Gamma => {
                if !(value >= 0.0) {
                    return Err(Error::config("grid", "gamma grid values must be nonnegative"));
                }
                config.gamma = value;
            }
        }
        Ok(config)
    }

    pub fn base_value(&self, base: &PipelineConfig) -> f64 {
        match self {
            SweepParam::MaxDepth => base.max_depth as f64,
            SweepParam::Gamma => base.gamma,
        }
    }
}

/// Per-setting sweep output: the resolved config and its linked `(mu,
/// sigma)` test predictions.
pub type SweepPredictions = Vec<(PipelineConfig, Vec<(f64, f64)>)>;

/// Trains one model per grid value (seed and all other hyperparameters held
/// fixed) and returns the linked test-set predictions per setting.
pub fn sweep(
    train_columns: &[Vec<f64>],
    train_targets: &[f64],
    test_columns: &[Vec<f64>],
    loss: &dyn Loss,
    base: &PipelineConfig,
    param: SweepParam,
    grid: &[f64],
) -> Result<SweepPredictions> {
    if grid.is_empty() {
        return Err(Error::config("grid", "sweep grid must be nonempty"));
    }
    let configs: Vec<PipelineConfig> = grid
        .iter()
        .map(|&v| param.apply(base, v))
        .collect::<Result<_>>()?;
    configs
        .into_par_iter()
        .map(|config| {
            let model = fit(train_columns, train_targets, loss, &config)?;
            let preds = model.predict_linked(test_columns, loss)?;
            Ok((config, preds))
        })
        .collect()
}
