//! Closed-form expected-compute bounds for the depth-selection sampling
//! model, Monte Carlo verification, live-system measurement, and the
//! exponential error-propagation bound with an empirical Lipschitz estimate.

use crate::backbone::{self, BackboneParams};
use crate::controller::{self, PolicyParams};
use crate::error::{CoreError, Result};
use crate::features::{self, ExtractorParams};
use crate::predictor::GbtModel;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy)]
pub struct BoundParams {
    pub alpha: f64,
    pub epsilon: f64,
    pub p_explore: f64,
    pub flops_lopt: f64,
    pub flops_full: f64,
    pub per_layer_cost: f64,
    pub l_opt: usize,
    pub max_depth: usize,
}

impl BoundParams {
    pub fn from_depths(
        alpha: f64,
        epsilon: f64,
        p_explore: f64,
        per_layer_cost: f64,
        l_opt: usize,
        max_depth: usize,
    ) -> Result<Self> {
        let p = BoundParams {
            alpha,
            epsilon,
            p_explore,
            flops_lopt: per_layer_cost * l_opt as f64,
            flops_full: per_layer_cost * max_depth as f64,
            per_layer_cost,
            l_opt,
            max_depth,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("epsilon", self.epsilon),
            ("p_explore", self.p_explore),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CoreError::Parameter(format!(
                    "{name} must lie in [0,1], got {v}"
                )));
            }
        }
        if self.flops_lopt > self.flops_full || self.flops_lopt < 0.0 {
            return Err(CoreError::Parameter(format!(
                "need 0 <= flops_lopt <= flops_full, got {} vs {}",
                self.flops_lopt, self.flops_full
            )));
        }
        Ok(())
    }

    fn p_optimal(&self) -> f64 {
        self.alpha * (1.0 - self.epsilon) + self.epsilon * self.p_explore
    }
}

/// α(1−ε)·F_opt + (1 − α(1−ε))·F_full.
pub fn bound_tight(p: &BoundParams) -> Result<f64> {
    p.validate()?;
    let q = p.alpha * (1.0 - p.epsilon);
    Ok(q * p.flops_lopt + (1.0 - q) * p.flops_full)
}

/// (α·F_opt + (1−α)·F_full)/(1−ε); undefined at ε = 1.
pub fn bound_loose(p: &BoundParams) -> Result<f64> {
    p.validate()?;
    if p.epsilon >= 1.0 {
        return Err(CoreError::Parameter(
            "bound is undefined at epsilon = 1 (division by zero)".into(),
        ));
    }
    Ok((p.alpha * p.flops_lopt + (1.0 - p.alpha) * p.flops_full) / (1.0 - p.epsilon))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NonOptimalMode {
    /// Non-optimal selections pay full depth, the proof's worst case.
    WorstCase,
    /// Strictly easier regime: uniform over [1, L].
    Uniform,
}

#[derive(Debug, Clone, Copy)]
pub struct SimResult {
    pub mean: f64,
    pub sem: f64,
}

pub fn simulate_expected_flops(
    p: &BoundParams,
    trials: usize,
    mode: NonOptimalMode,
    rng: &mut ChaCha8Rng,
) -> Result<SimResult> {
    p.validate()?;
    if trials < 1000 {
        return Err(CoreError::Parameter(format!(
            "need at least 1000 trials, got {trials}"
        )));
    }
    let p_opt = p.p_optimal();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..trials {
        let flops = if rng.gen::<f64>() < p_opt {
            p.flops_lopt
        } else {
            match mode {
                NonOptimalMode::WorstCase => p.flops_full,
                NonOptimalMode::Uniform => {
                    p.per_layer_cost * rng.gen_range(1..=p.max_depth) as f64
                }
            }
        };
        sum += flops;
        sum_sq += flops * flops;
    }
    let n = trials as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    Ok(SimResult {
        mean,
        sem: (var / n).sqrt(),
    })
}

// ---- live-system measurement ----------------------------------------------

/// One evaluated sample of the running system.
#[derive(Debug, Clone, Copy)]
pub struct LiveObservation {
    pub l_opt: usize,
    pub l_pred: usize,
    pub chosen: usize,
    /// Whether the step that ended the trajectory was an exploration step.
    pub exit_explored: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LiveBoundReport {
    pub alpha: f64,
    pub epsilon: f64,
    pub p_explore: f64,
    pub mean_flops: f64,
    pub mean_oracle_flops: f64,
    pub flops_full: f64,
    pub bound_tight: f64,
    pub bound_loose: f64,
    pub satisfied: bool,
}

/// Bound check from already-collected observations. α̂ is predictor-vs-oracle
/// agreement; ε̂ is the fraction of trajectories ended by an exploration step;
/// p̂_explore is the fraction of those that still landed on l_opt.
pub fn live_bound_from_observations(
    obs: &[LiveObservation],
    config: &backbone::BackboneConfig,
) -> Result<LiveBoundReport> {
    if obs.is_empty() {
        return Err(CoreError::Input("no observations".into()));
    }
    let n = obs.len() as f64;
    let alpha = obs.iter().filter(|o| o.l_pred == o.l_opt).count() as f64 / n;
    let explored = obs.iter().filter(|o| o.exit_explored).count();
    let epsilon = explored as f64 / n;
    let p_explore = if explored == 0 {
        0.0
    } else {
        obs.iter()
            .filter(|o| o.exit_explored && o.chosen == o.l_opt)
            .count() as f64
            / explored as f64
    };
    let mean_flops = obs
        .iter()
        .map(|o| backbone::flops_of_depth(config, o.chosen))
        .sum::<f64>()
        / n;
    let mean_oracle_flops = obs
        .iter()
        .map(|o| backbone::flops_of_depth(config, o.l_opt))
        .sum::<f64>()
        / n;
    let flops_full = backbone::flops_of_depth(config, config.num_layers);
    let params = BoundParams {
        alpha,
        epsilon,
        p_explore,
        flops_lopt: mean_oracle_flops,
        flops_full,
        per_layer_cost: backbone::per_layer_flops(config),
        l_opt: 0,
        max_depth: config.num_layers,
    };
    let tight = bound_tight(&params)?;
    let loose = bound_loose(&params)?;
    Ok(LiveBoundReport {
        alpha,
        epsilon,
        p_explore,
        mean_flops,
        mean_oracle_flops,
        flops_full,
        bound_tight: tight,
        bound_loose: loose,
        satisfied: mean_flops <= loose,
    })
}

/// Run the real predictor + controller over an eval set with known oracle
/// depths and check the bound against what was actually executed.
pub fn measure_live_bound(
    backbone_params: &BackboneParams,
    extractor: &ExtractorParams,
    gbt: &GbtModel,
    policy: &PolicyParams,
    records: &[(Vec<usize>, Option<usize>)],
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LiveBoundReport> {
    let max_depth = backbone_params.config.num_layers;
    let mut obs = Vec::with_capacity(records.len());
    for (tokens, oracle) in records {
        let l_opt = oracle.ok_or_else(|| {
            CoreError::Input("eval record is missing its oracle depth".into())
        })?;
        let feats = features::extract(tokens, extractor)?;
        let pred = crate::predictor::predict_depth(gbt, &feats.pooled1, max_depth)?;
        let traj = controller::select_depth(
            policy,
            &feats.pooled2,
            pred.l_pred,
            max_depth,
            epsilon,
            rng,
        )?;
        obs.push(LiveObservation {
            l_opt,
            l_pred: pred.l_pred,
            chosen: traj.chosen_depth,
            exit_explored: *traj.explored.last().unwrap(),
        });
    }
    live_bound_from_observations(&obs, &backbone_params.config)
}

// ---- error propagation -----------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct PropagationParams {
    pub gamma: f64,
    pub l_delta: usize,
    pub h_norm: f64,
}

/// γ^{l_Δ}·‖h‖₂.
pub fn propagation_bound(p: &PropagationParams) -> Result<f64> {
    if p.gamma <= 0.0 {
        return Err(CoreError::Parameter(format!(
            "gamma must be positive, got {}",
            p.gamma
        )));
    }
    Ok(p.gamma.powi(p.l_delta as i32) * p.h_norm)
}

/// Empirical per-layer Lipschitz estimate: max over sampled input pairs and
/// layers of ‖Δx_l‖/‖Δx_{l−1}‖. An estimate, not a certificate.
pub fn estimate_gamma(
    params: &BackboneParams,
    n_pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let cfg = &params.config;
    let len = cfg.max_len;
    let mut gamma: f64 = 0.0;
    for _ in 0..n_pairs {
        let a: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
        let mut b = a.clone();
        // perturb one token so the pair stays close
        let pos = rng.gen_range(0..len);
        b[pos] = rng.gen_range(0..cfg.vocab_size);
        let ta = backbone::forward_trace(&a, params, cfg.num_layers)?;
        let tb = backbone::forward_trace(&b, params, cfg.num_layers)?;
        for l in 1..ta.len() {
            let prev = diff_norm(&ta[l - 1], &tb[l - 1]);
            let cur = diff_norm(&ta[l], &tb[l]);
            if prev > 1e-12 {
                gamma = gamma.max(cur / prev);
            }
        }
    }
    if gamma <= 0.0 {
        return Err(CoreError::Evaluation(
            "all sampled pairs were identical; cannot estimate gamma".into(),
        ));
    }
    Ok(gamma)
}

fn diff_norm(a: &crate::Tensor, b: &crate::Tensor) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
