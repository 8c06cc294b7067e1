//! Complexity predictor: gradient-boosted regression trees over pooled h1
//! features, trained on oracle depth labels with Huber loss plus a quadratic
//! distillation pull toward an h3-based ridge teacher.
//!
//! Leaf values minimize the actual Huber+distillation objective over the leaf
//! (1-D convex problem solved by derivative bisection), so each added tree
//! can only lower the training loss.

use crate::backbone::{self, BackboneParams};
use crate::error::{CoreError, Result};
use crate::tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthLabel(pub usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbtConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub huber_delta: f64,
    /// λ on the squared pull toward the teacher target.
    pub distill_weight: f64,
    pub min_samples_split: usize,
}

impl Default for GbtConfig {
    fn default() -> Self {
        GbtConfig {
            n_trees: 100,
            max_depth: 3,
            learning_rate: 0.1,
            huber_delta: 1.0,
            distill_weight: 0.5,
            min_samples_split: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeNode {
    pub feature: usize,
    pub threshold: f64,
    /// Child indices; -1 marks a leaf.
    pub left: i64,
    pub right: i64,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0usize;
        loop {
            let n = &self.nodes[i];
            if n.left < 0 {
                return n.value;
            }
            i = if x[n.feature] <= n.threshold {
                n.left as usize
            } else {
                n.right as usize
            };
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbtModel {
    pub trees: Vec<RegressionTree>,
    pub learning_rate: f64,
    pub base_prediction: f64,
    pub n_features: usize,
}

impl GbtModel {
    pub fn raw_predict(&self, x: &[f64]) -> f64 {
        let mut pred = self.base_prediction;
        for t in &self.trees {
            pred += self.learning_rate * t.predict(x);
        }
        pred
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictorReport {
    pub training_mae: f64,
    /// Set when the first boosting stage found no usable split.
    pub degenerate_features: bool,
    pub stage_losses: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct DepthPrediction {
    pub l_pred: usize,
    pub confidence: f64,
}

pub fn huber(residual: f64, delta: f64) -> f64 {
    let a = residual.abs();
    if a <= delta {
        0.5 * residual * residual
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn huber_grad(residual: f64, delta: f64) -> f64 {
    if residual.abs() <= delta {
        residual
    } else {
        delta * residual.signum()
    }
}

fn objective(preds: &[f64], labels: &[f64], teacher: &[f64], cfg: &GbtConfig) -> f64 {
    let mut total = 0.0;
    for i in 0..preds.len() {
        let r = preds[i] - labels[i];
        let d = preds[i] - teacher[i];
        total += huber(r, cfg.huber_delta) + cfg.distill_weight * d * d;
    }
    total / preds.len() as f64
}

/// Minimize Σ Huber(pred+v−y) + λ(pred+v−t)² over the leaf offset v.
/// The derivative is monotone, so bisection suffices.
fn leaf_offset(idx: &[usize], preds: &[f64], labels: &[f64], teacher: &[f64], cfg: &GbtConfig) -> f64 {
    let deriv = |v: f64| -> f64 {
        let mut d = 0.0;
        for &i in idx {
            d += huber_grad(preds[i] + v - labels[i], cfg.huber_delta)
                + 2.0 * cfg.distill_weight * (preds[i] + v - teacher[i]);
        }
        d
    };
    let mut lo = -64.0;
    let mut hi = 64.0;
    if deriv(lo) > 0.0 {
        return lo;
    }
    if deriv(hi) < 0.0 {
        return hi;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if deriv(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Candidate split thresholds: midpoints of consecutive distinct values, or
/// quantile cuts once there are more than 32 distinct values.
fn thresholds_for(values: &mut Vec<f64>) -> Vec<f64> {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();
    if values.len() < 2 {
        return Vec::new();
    }
    if values.len() <= 32 {
        values
            .windows(2)
            .map(|w| 0.5 * (w[0] + w[1]))
            .collect()
    } else {
        (1..32)
            .map(|q| {
                let pos = q * (values.len() - 1) / 32;
                0.5 * (values[pos] + values[pos + 1])
            })
            .collect()
    }
}

struct TreeBuilder<'a> {
    features: &'a [Vec<f64>],
    targets: &'a [f64],
    cfg: &'a GbtConfig,
    nodes: Vec<TreeNode>,
}

impl<'a> TreeBuilder<'a> {
    /// Greedy variance-reduction split on the pseudo-residual targets.
    fn best_split(&self, idx: &[usize]) -> Option<(usize, f64, f64)> {
        let n = idx.len() as f64;
        let sum: f64 = idx.iter().map(|&i| self.targets[i]).sum();
        let base_sse: f64 = idx
            .iter()
            .map(|&i| {
                let d = self.targets[i] - sum / n;
                d * d
            })
            .sum();
        let n_features = self.features[idx[0]].len();
        let mut best: Option<(usize, f64, f64)> = None;
        for f in 0..n_features {
            let mut vals: Vec<f64> = idx.iter().map(|&i| self.features[i][f]).collect();
            for thr in thresholds_for(&mut vals) {
                let (mut ls, mut ln, mut rs, mut rn) = (0.0, 0.0, 0.0, 0.0);
                let (mut lss, mut rss) = (0.0, 0.0);
                for &i in idx {
                    let t = self.targets[i];
                    if self.features[i][f] <= thr {
                        ls += t;
                        lss += t * t;
                        ln += 1.0;
                    } else {
                        rs += t;
                        rss += t * t;
                        rn += 1.0;
                    }
                }
                if ln < 1.0 || rn < 1.0 {
                    continue;
                }
                let sse = (lss - ls * ls / ln) + (rss - rs * rs / rn);
                let gain = base_sse - sse;
                if gain > 1e-12 && best.map_or(true, |(_, _, g)| gain > g) {
                    best = Some((f, thr, gain));
                }
            }
        }
        best
    }

    fn build(&mut self, idx: Vec<usize>, depth: usize) -> i64 {
        let make_leaf = depth >= self.cfg.max_depth || idx.len() < self.cfg.min_samples_split;
        let split = if make_leaf { None } else { self.best_split(&idx) };
        let node_id = self.nodes.len() as i64;
        self.nodes.push(TreeNode {
            feature: 0,
            threshold: 0.0,
            left: -1,
            right: -1,
            value: 0.0,
        });
        if let Some((f, thr, _)) = split {
            let (mut li, mut ri) = (Vec::new(), Vec::new());
            for &i in &idx {
                if self.features[i][f] <= thr {
                    li.push(i);
                } else {
                    ri.push(i);
                }
            }
            let left = self.build(li, depth + 1);
            let right = self.build(ri, depth + 1);
            let n = &mut self.nodes[node_id as usize];
            n.feature = f;
            n.threshold = thr;
            n.left = left;
            n.right = right;
        } else {
            // leaf offset is filled in afterwards from the true objective
            self.nodes[node_id as usize].value = f64::NAN;
        }
        node_id
    }
}

fn leaf_assignment(tree: &RegressionTree, x: &[f64]) -> usize {
    let mut i = 0usize;
    loop {
        let n = &tree.nodes[i];
        if n.left < 0 {
            return i;
        }
        i = if x[n.feature] <= n.threshold {
            n.left as usize
        } else {
            n.right as usize
        };
    }
}

pub fn train_predictor(
    features: &[Vec<f64>],
    labels: &[DepthLabel],
    teacher_targets: &[f64],
    cfg: &GbtConfig,
) -> Result<(GbtModel, PredictorReport)> {
    if features.len() != labels.len() || features.len() != teacher_targets.len() {
        return Err(CoreError::Input(format!(
            "feature/label/teacher counts disagree: {}/{}/{}",
            features.len(),
            labels.len(),
            teacher_targets.len()
        )));
    }
    if features.len() < 10 {
        return Err(CoreError::Input(format!(
            "need at least 10 training samples, got {}",
            features.len()
        )));
    }
    let n = features.len();
    let n_features = features[0].len();
    let y: Vec<f64> = labels.iter().map(|l| l.0 as f64).collect();
    let base = y.iter().sum::<f64>() / n as f64;
    let mut preds = vec![base; n];
    let mut trees = Vec::with_capacity(cfg.n_trees);
    let mut stage_losses = vec![objective(&preds, &y, teacher_targets, cfg)];
    let mut degenerate = false;

    for stage in 0..cfg.n_trees {
        // pseudo-residuals: negative gradient of the full objective
        let targets: Vec<f64> = (0..n)
            .map(|i| {
                -(huber_grad(preds[i] - y[i], cfg.huber_delta)
                    + 2.0 * cfg.distill_weight * (preds[i] - teacher_targets[i]))
            })
            .collect();
        let mut builder = TreeBuilder {
            features,
            targets: &targets,
            cfg,
            nodes: Vec::new(),
        };
        builder.build((0..n).collect(), 0);
        let mut tree = RegressionTree {
            nodes: builder.nodes,
        };
        if stage == 0 && tree.nodes.len() == 1 {
            degenerate = true;
        }
        // per-leaf exact minimization of the boosted objective
        let mut leaf_members: Vec<Vec<usize>> = vec![Vec::new(); tree.nodes.len()];
        for i in 0..n {
            leaf_members[leaf_assignment(&tree, &features[i])].push(i);
        }
        for (node_id, members) in leaf_members.iter().enumerate() {
            if tree.nodes[node_id].left < 0 {
                tree.nodes[node_id].value = if members.is_empty() {
                    0.0
                } else {
                    leaf_offset(members, &preds, &y, teacher_targets, cfg)
                };
            }
        }
        for i in 0..n {
            preds[i] += cfg.learning_rate * tree.predict(&features[i]);
        }
        stage_losses.push(objective(&preds, &y, teacher_targets, cfg));
        trees.push(tree);
    }

    let mae = (0..n).map(|i| (preds[i] - y[i]).abs()).sum::<f64>() / n as f64;
    Ok((
        GbtModel {
            trees,
            learning_rate: cfg.learning_rate,
            base_prediction: base,
            n_features,
        },
        PredictorReport {
            training_mae: mae,
            degenerate_features: degenerate,
            stage_losses,
        },
    ))
}

pub fn predict_depth(model: &GbtModel, pooled_h1: &[f64], max_depth: usize) -> Result<DepthPrediction> {
    if pooled_h1.len() != model.n_features {
        return Err(CoreError::Input(format!(
            "feature length {} does not match training length {}",
            pooled_h1.len(),
            model.n_features
        )));
    }
    let raw = model.raw_predict(pooled_h1);
    let l_pred = (raw.round() as i64).clamp(1, max_depth as i64) as usize;
    Ok(DepthPrediction {
        l_pred,
        confidence: 1.0 / (1.0 + (raw - l_pred as f64).abs()),
    })
}

/// Smallest depth whose exit is correct with loss within (1+slack) of the
/// full-depth loss; falls back to the maximum depth when no exit qualifies.
pub fn oracle_l_opt(
    tokens: &[usize],
    label: usize,
    params: &BackboneParams,
    slack: f64,
) -> Result<DepthLabel> {
    let max_depth = params.config.num_layers;
    let out = backbone::forward_to_depth(tokens, params, max_depth)?;
    let ce = |logits: &[f64]| -> f64 {
        -tensor::log_softmax_t(logits, 1.0)[label]
    };
    // additive slack in nats: a multiplicative bound collapses once the
    // full-depth loss gets small, dragging every label toward max depth
    let full_loss = ce(&out.logits_per_exit[max_depth - 1]);
    let bound = full_loss + slack;
    for (i, exit) in out.logits_per_exit.iter().enumerate() {
        let mut best = 0usize;
        for c in 1..exit.len() {
            if exit[c] > exit[best] {
                best = c;
            }
        }
        let correct = best == label;
        if correct && ce(exit.as_slice()) <= bound {
            return Ok(DepthLabel(i + 1));
        }
    }
    Ok(DepthLabel(max_depth))
}

// ---- h3 ridge teacher -----------------------------------------------------

pub const RIDGE_LAMBDA: f64 = 1e-3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RidgeTeacher {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl RidgeTeacher {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept
            + self
                .weights
                .iter()
                .zip(x)
                .map(|(w, v)| w * v)
                .sum::<f64>()
    }
}

/// Closed-form ridge on centered data; λ keeps the normal equations solvable.
pub fn train_h3_teacher(h3_pooled: &[Vec<f64>], labels: &[DepthLabel]) -> Result<RidgeTeacher> {
    if h3_pooled.len() != labels.len() {
        return Err(CoreError::Input("feature/label counts disagree".into()));
    }
    let n = h3_pooled.len();
    if n < 10 {
        return Err(CoreError::Input(format!(
            "need at least 10 teacher samples, got {n}"
        )));
    }
    let d = h3_pooled[0].len();
    let y_mean = labels.iter().map(|l| l.0 as f64).sum::<f64>() / n as f64;
    let mut x_mean = vec![0.0; d];
    for row in h3_pooled {
        for j in 0..d {
            x_mean[j] += row[j];
        }
    }
    for v in &mut x_mean {
        *v /= n as f64;
    }
    // normal equations on centered data: (XᵀX + λI) w = Xᵀ y
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    for (row, l) in h3_pooled.iter().zip(labels) {
        let yc = l.0 as f64 - y_mean;
        let xc: Vec<f64> = (0..d).map(|j| row[j] - x_mean[j]).collect();
        for i in 0..d {
            b[i] += xc[i] * yc;
            for j in i..d {
                a[i * d + j] += xc[i] * xc[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            a[i * d + j] = a[j * d + i];
        }
        a[i * d + i] += RIDGE_LAMBDA;
    }
    let w = solve_spd(&mut a, &mut b, d)?;
    let intercept = y_mean - w.iter().zip(&x_mean).map(|(wi, xi)| wi * xi).sum::<f64>();
    Ok(RidgeTeacher {
        weights: w,
        intercept,
    })
}

/// Gaussian elimination with partial pivoting; a is d×d row-major, consumed.
fn solve_spd(a: &mut [f64], b: &mut [f64], d: usize) -> Result<Vec<f64>> {
    for col in 0..d {
        let mut pivot = col;
        for r in col + 1..d {
            if a[r * d + col].abs() > a[pivot * d + col].abs() {
                pivot = r;
            }
        }
        if a[pivot * d + col].abs() < 1e-300 {
            return Err(CoreError::Evaluation("singular ridge system".into()));
        }
        if pivot != col {
            for j in 0..d {
                a.swap(col * d + j, pivot * d + j);
            }
            b.swap(col, pivot);
        }
        let pv = a[col * d + col];
        for r in col + 1..d {
            let factor = a[r * d + col] / pv;
            if factor == 0.0 {
                continue;
            }
            for j in col..d {
                a[r * d + j] -= factor * a[col * d + j];
            }
            b[r] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; d];
    for col in (0..d).rev() {
        let mut acc = b[col];
        for j in col + 1..d {
            acc -= a[col * d + j] * x[j];
        }
        x[col] = acc / a[col * d + col];
    }
    Ok(x)
}
