//! Depth-selection policy: an LSTM cell over per-layer context emitting
//! continue/exit decisions, trained with clipped PPO against the hierarchical
//! reward (accuracy, compute penalty, smoothness).

use crate::autodiff::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::opt::Adam;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const POLICY_HIDDEN: usize = 128;

/// Untrained policies start continue-biased so depth reduction is learned,
/// not an artifact of a 50/50 exit coin.
const EXIT_BIAS_INIT: f64 = -2.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyParams {
    /// Gate order along the 4H axis: input, forget, cell, output.
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
    pub policy_w: Tensor,
    pub policy_b: Tensor,
    pub value_w: Tensor,
    pub value_b: Tensor,
    pub input_dim: usize,
}

impl PolicyParams {
    pub fn init(pooled_dim: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input_dim = pooled_dim + 2;
        let h = POLICY_HIDDEN;
        let mut gauss = |shape: &[usize], scale: f64| -> Tensor {
            let n: usize = shape.iter().product();
            Tensor {
                shape: shape.to_vec(),
                data: (0..n)
                    .map(|_| {
                        let u1: f64 = rng.gen_range(1e-12..1.0);
                        let u2: f64 = rng.gen_range(0.0..1.0);
                        scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                    })
                    .collect(),
            }
        };
        let in_scale = 1.0 / (input_dim as f64).sqrt();
        let h_scale = 1.0 / (h as f64).sqrt();
        let mut bias = Tensor::zeros(&[1, 4 * h]);
        // unit forget-gate bias, the usual LSTM stabilizer
        for j in h..2 * h {
            bias.data[j] = 1.0;
        }
        let mut policy_b = Tensor::zeros(&[1, 2]);
        policy_b.data[1] = EXIT_BIAS_INIT;
        PolicyParams {
            w_ih: gauss(&[input_dim, 4 * h], in_scale),
            w_hh: gauss(&[h, 4 * h], h_scale),
            bias,
            policy_w: gauss(&[h, 2], h_scale),
            policy_b,
            value_w: gauss(&[h, 1], h_scale),
            value_b: Tensor::zeros(&[1, 1]),
            input_dim,
        }
    }

    pub fn visit_tensors<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("policy.w_ih".into(), &self.w_ih);
        f("policy.w_hh".into(), &self.w_hh);
        f("policy.bias".into(), &self.bias);
        f("policy.head_w".into(), &self.policy_w);
        f("policy.head_b".into(), &self.policy_b);
        f("policy.value_w".into(), &self.value_w);
        f("policy.value_b".into(), &self.value_b);
    }

    pub fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("policy.w_ih".into(), &mut self.w_ih);
        f("policy.w_hh".into(), &mut self.w_hh);
        f("policy.bias".into(), &mut self.bias);
        f("policy.head_w".into(), &mut self.policy_w);
        f("policy.head_b".into(), &mut self.policy_b);
        f("policy.value_w".into(), &mut self.value_w);
        f("policy.value_b".into(), &mut self.value_b);
    }

    pub fn content_hash(&self) -> u64 {
        let mut h = 1469598103934665603u64;
        self.visit_tensors(&mut |name, t| {
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(1099511628211);
            }
            for v in &t.data {
                for b in v.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(1099511628211);
                }
            }
        });
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepthAction {
    Continue,
    Exit,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Policy input per taken step, kept so PPO can re-run the cell.
    pub inputs: Vec<Vec<f64>>,
    pub actions: Vec<DepthAction>,
    pub logprobs: Vec<f64>,
    pub values: Vec<f64>,
    pub explored: Vec<bool>,
    pub chosen_depth: usize,
    pub max_depth: usize,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

fn lstm_step_plain(p: &PolicyParams, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hd = POLICY_HIDDEN;
    let mut gates = p.bias.data.clone();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &p.w_ih.data[i * 4 * hd..(i + 1) * 4 * hd];
        for j in 0..4 * hd {
            gates[j] += xi * row[j];
        }
    }
    for (k, &hk) in h.iter().enumerate() {
        if hk == 0.0 {
            continue;
        }
        let row = &p.w_hh.data[k * 4 * hd..(k + 1) * 4 * hd];
        for j in 0..4 * hd {
            gates[j] += hk * row[j];
        }
    }
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut h_new = vec![0.0; hd];
    let mut c_new = vec![0.0; hd];
    for j in 0..hd {
        let i_g = sig(gates[j]);
        let f_g = sig(gates[hd + j]);
        let g_g = gates[2 * hd + j].tanh();
        let o_g = sig(gates[3 * hd + j]);
        c_new[j] = f_g * c[j] + i_g * g_g;
        h_new[j] = o_g * c_new[j].tanh();
    }
    (h_new, c_new)
}

fn heads_plain(p: &PolicyParams, h: &[f64]) -> ([f64; 2], f64) {
    let mut logits = [p.policy_b.data[0], p.policy_b.data[1]];
    let mut value = p.value_b.data[0];
    for (k, &hk) in h.iter().enumerate() {
        logits[0] += hk * p.policy_w.data[k * 2];
        logits[1] += hk * p.policy_w.data[k * 2 + 1];
        value += hk * p.value_w.data[k];
    }
    (logits, value)
}

fn log_softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let z = ((logits[0] - m).exp() + (logits[1] - m).exp()).ln() + m;
    [logits[0] - z, logits[1] - z]
}

/// Roll the policy over layers 1..=max_depth. Each step explores uniformly
/// with probability epsilon; logprobs are always the policy's own, so PPO
/// sees the true behavior distribution mismatch through the ratio clip.
pub fn select_depth(
    policy: &PolicyParams,
    pooled_h2: &[f64],
    l_pred: usize,
    max_depth: usize,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(CoreError::Parameter(format!(
            "epsilon must lie in [0,1], got {epsilon}"
        )));
    }
    if pooled_h2.len() + 2 != policy.input_dim {
        return Err(CoreError::Input(format!(
            "pooled input has {} features, policy expects {}",
            pooled_h2.len(),
            policy.input_dim - 2
        )));
    }
    let mut traj = Trajectory {
        inputs: Vec::new(),
        actions: Vec::new(),
        logprobs: Vec::new(),
        values: Vec::new(),
        explored: Vec::new(),
        chosen_depth: max_depth,
        max_depth,
        rewards: Vec::new(),
        advantages: Vec::new(),
        returns: Vec::new(),
    };
    let mut h = vec![0.0; POLICY_HIDDEN];
    let mut c = vec![0.0; POLICY_HIDDEN];
    for t in 1..=max_depth {
        let mut x = pooled_h2.to_vec();
        x.push(t as f64 / max_depth as f64);
        x.push(l_pred as f64 / max_depth as f64);
        let (h_new, c_new) = lstm_step_plain(policy, &x, &h, &c);
        let (logits, value) = heads_plain(policy, &h_new);
        let logp = log_softmax2(logits);
        let explore = rng.gen::<f64>() < epsilon;
        let action_idx = if explore {
            rng.gen_range(0..2usize)
        } else if rng.gen::<f64>() < logp[0].exp() {
            0
        } else {
            1
        };
        traj.inputs.push(x);
        traj.actions.push(if action_idx == 0 {
            DepthAction::Continue
        } else {
            DepthAction::Exit
        });
        traj.logprobs.push(logp[action_idx]);
        traj.values.push(value);
        traj.explored.push(explore);
        if action_idx == 1 {
            traj.chosen_depth = t;
            return Ok(traj);
        }
        h = h_new;
        c = c_new;
    }
    traj.chosen_depth = max_depth;
    Ok(traj)
}

/// Deterministic variant used at evaluation time: exits at the first layer
/// where Exit is the argmax action.
pub fn select_depth_greedy(
    policy: &PolicyParams,
    pooled_h2: &[f64],
    l_pred: usize,
    max_depth: usize,
) -> Result<usize> {
    if pooled_h2.len() + 2 != policy.input_dim {
        return Err(CoreError::Input(format!(
            "pooled input has {} features, policy expects {}",
            pooled_h2.len(),
            policy.input_dim - 2
        )));
    }
    let mut h = vec![0.0; POLICY_HIDDEN];
    let mut c = vec![0.0; POLICY_HIDDEN];
    for t in 1..=max_depth {
        let mut x = pooled_h2.to_vec();
        x.push(t as f64 / max_depth as f64);
        x.push(l_pred as f64 / max_depth as f64);
        let (h_new, c_new) = lstm_step_plain(policy, &x, &h, &c);
        let (logits, _) = heads_plain(policy, &h_new);
        if logits[1] > logits[0] {
            return Ok(t);
        }
        h = h_new;
        c = c_new;
    }
    Ok(max_depth)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RewardConfig {
    pub accuracy_coef: f64,
    pub compute_coef: f64,
    pub smoothness_coef: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            accuracy_coef: 1.0,
            compute_coef: 0.5,
            smoothness_coef: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RewardBreakdown {
    pub accuracy_term: f64,
    pub compute_term: f64,
    pub smoothness_term: f64,
    pub total: f64,
}

/// Terminal reward split into per-step shaping: every continue step pays the
/// marginal compute cost −b/L, the final step receives the remainder.
pub fn hierarchical_reward(
    traj: &mut Trajectory,
    correct: bool,
    flops_ratio: f64,
    l_pred: usize,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    if traj.chosen_depth < 1 || traj.chosen_depth > traj.max_depth {
        return Err(CoreError::Parameter(format!(
            "chosen depth {} outside [1, {}]",
            traj.chosen_depth, traj.max_depth
        )));
    }
    let accuracy_term = if correct {
        cfg.accuracy_coef
    } else {
        -cfg.accuracy_coef
    };
    let compute_term = -cfg.compute_coef * flops_ratio;
    let smooth = traj.chosen_depth.abs_diff(l_pred) <= 1;
    let smoothness_term = if smooth { cfg.smoothness_coef } else { 0.0 };
    let total = accuracy_term + compute_term + smoothness_term;
    let steps = traj.actions.len();
    let step_cost = -cfg.compute_coef / traj.max_depth as f64;
    traj.rewards = vec![step_cost; steps];
    traj.rewards[steps - 1] = total - step_cost * (steps as f64 - 1.0);
    Ok(RewardBreakdown {
        accuracy_term,
        compute_term,
        smoothness_term,
        total,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub lr: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            epochs: 4,
            value_coef: 0.5,
            entropy_coef: 0.01,
            lr: 3e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PpoStats {
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_reward: f64,
}

pub fn compute_gae(traj: &mut Trajectory, gamma: f64, lambda: f64) {
    let n = traj.rewards.len();
    traj.advantages = vec![0.0; n];
    traj.returns = vec![0.0; n];
    let mut gae = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { traj.values[t + 1] } else { 0.0 };
        let delta = traj.rewards[t] + gamma * next_v - traj.values[t];
        gae = delta + gamma * lambda * gae;
        traj.advantages[t] = gae;
        traj.returns[t] = gae + traj.values[t];
    }
}

pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

struct TapedPolicy {
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    policy_w: Var,
    policy_b: Var,
    value_w: Var,
    value_b: Var,
}

impl TapedPolicy {
    fn new(tape: &mut Tape, p: &PolicyParams) -> Self {
        TapedPolicy {
            w_ih: tape.leaf(p.w_ih.clone()),
            w_hh: tape.leaf(p.w_hh.clone()),
            bias: tape.leaf(p.bias.clone()),
            policy_w: tape.leaf(p.policy_w.clone()),
            policy_b: tape.leaf(p.policy_b.clone()),
            value_w: tape.leaf(p.value_w.clone()),
            value_b: tape.leaf(p.value_b.clone()),
        }
    }

    fn named(&self) -> Vec<(String, Var)> {
        vec![
            ("policy.w_ih".into(), self.w_ih),
            ("policy.w_hh".into(), self.w_hh),
            ("policy.bias".into(), self.bias),
            ("policy.head_w".into(), self.policy_w),
            ("policy.head_b".into(), self.policy_b),
            ("policy.value_w".into(), self.value_w),
            ("policy.value_b".into(), self.value_b),
        ]
    }

    /// One cell step on the tape; returns (h, c, logits, value).
    fn step(&self, tape: &mut Tape, x: Var, h: Var, c: Var) -> (Var, Var, Var, Var) {
        let hd = POLICY_HIDDEN;
        let xi = tape.matmul(x, self.w_ih);
        let hh = tape.matmul(h, self.w_hh);
        let pre = tape.add(xi, hh);
        let gates = tape.add_row(pre, self.bias);
        let i_g = tape.slice_cols(gates, 0, hd);
        let i_g = tape.sigmoid(i_g);
        let f_g = tape.slice_cols(gates, hd, hd);
        let f_g = tape.sigmoid(f_g);
        let g_g = tape.slice_cols(gates, 2 * hd, hd);
        let g_g = tape.tanh(g_g);
        let o_g = tape.slice_cols(gates, 3 * hd, hd);
        let o_g = tape.sigmoid(o_g);
        let fc = tape.mul(f_g, c);
        let ig = tape.mul(i_g, g_g);
        let c_new = tape.add(fc, ig);
        let tc = tape.tanh(c_new);
        let h_new = tape.mul(o_g, tc);
        let lp = tape.matmul(h_new, self.policy_w);
        let logits = tape.add_row(lp, self.policy_b);
        let vp = tape.matmul(h_new, self.value_w);
        let value = tape.add_row(vp, self.value_b);
        (h_new, c_new, logits, value)
    }
}

/// Clipped-surrogate PPO over a batch of trajectories. Advantages are
/// GAE-estimated then batch-normalized; normalization is skipped when the
/// batch has zero advantage variance.
pub fn ppo_update(
    policy: &mut PolicyParams,
    opt: &mut Adam,
    trajectories: &mut [Trajectory],
    cfg: &PpoConfig,
) -> Result<PpoStats> {
    if trajectories.is_empty() {
        return Err(CoreError::Input("empty trajectory batch".into()));
    }
    for traj in trajectories.iter_mut() {
        if traj.rewards.len() != traj.actions.len() {
            return Err(CoreError::Input(
                "trajectory missing rewards; score it before the update".into(),
            ));
        }
        compute_gae(traj, cfg.gamma, cfg.gae_lambda);
    }
    let mut all_adv: Vec<f64> = trajectories
        .iter()
        .flat_map(|t| t.advantages.iter().copied())
        .collect();
    let n_steps = all_adv.len() as f64;
    let mean = all_adv.iter().sum::<f64>() / n_steps;
    let var = all_adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n_steps;
    if var > 1e-12 {
        let sd = var.sqrt();
        for a in &mut all_adv {
            *a = (*a - mean) / sd;
        }
    }
    let mean_reward = trajectories
        .iter()
        .map(|t| t.rewards.iter().sum::<f64>())
        .sum::<f64>()
        / trajectories.len() as f64;

    opt.lr = cfg.lr;
    let mut first_stats = None;
    for _epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let taped = TapedPolicy::new(&mut tape, policy);
        let mut surrogates = Vec::new();
        let mut value_losses = Vec::new();
        let mut entropies = Vec::new();
        let mut ratio_sum = 0.0;
        let mut clipped = 0.0;
        let mut adv_iter = all_adv.iter();
        for traj in trajectories.iter() {
            let mut h = tape.leaf(Tensor::zeros(&[1, POLICY_HIDDEN]));
            let mut c = tape.leaf(Tensor::zeros(&[1, POLICY_HIDDEN]));
            for (t, x) in traj.inputs.iter().enumerate() {
                let xv = tape.leaf(Tensor::new(vec![1, x.len()], x.clone())?);
                let (h_new, c_new, logits, value) = taped.step(&mut tape, xv, h, c);
                let action_idx = match traj.actions[t] {
                    DepthAction::Continue => 0,
                    DepthAction::Exit => 1,
                };
                let adv = *adv_iter.next().unwrap();
                let logp_new = tape.log_prob(logits, action_idx);
                let delta = tape.add_const(logp_new, -traj.logprobs[t]);
                let ratio = tape.exp(delta);
                let r_val = tape.scalar_value(ratio);
                ratio_sum += r_val;
                if (r_val - 1.0).abs() > cfg.clip {
                    clipped += 1.0;
                }
                let unclipped = tape.scale(ratio, adv);
                let rc = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
                let clipped_term = tape.scale(rc, adv);
                let surr = tape.min2(unclipped, clipped_term);
                surrogates.push(surr);
                let verr = tape.add_const(value, -traj.returns[t]);
                let vsq = tape.square(verr);
                let vloss = tape.mean_all(vsq);
                value_losses.push(vloss);
                entropies.push(tape.entropy(logits));
                h = h_new;
                c = c_new;
            }
        }
        let surr_sum = tape.sum_scalars(&surrogates);
        let surr_mean = tape.scale(surr_sum, 1.0 / n_steps);
        let v_sum = tape.sum_scalars(&value_losses);
        let v_mean = tape.scale(v_sum, 1.0 / n_steps);
        let e_sum = tape.sum_scalars(&entropies);
        let e_mean = tape.scale(e_sum, 1.0 / n_steps);
        let neg_surr = tape.scale(surr_mean, -1.0);
        let v_term = tape.scale(v_mean, cfg.value_coef);
        let e_term = tape.scale(e_mean, -cfg.entropy_coef);
        let partial = tape.add(neg_surr, v_term);
        let loss = tape.add(partial, e_term);
        if !tape.scalar_value(loss).is_finite() {
            return Err(CoreError::Evaluation("non-finite PPO loss".into()));
        }
        if first_stats.is_none() {
            first_stats = Some(PpoStats {
                mean_ratio: ratio_sum / n_steps,
                clip_fraction: clipped / n_steps,
                policy_loss: tape.scalar_value(neg_surr),
                value_loss: tape.scalar_value(v_mean),
                entropy: tape.scalar_value(e_mean),
                mean_reward,
            });
        }
        let grads = tape.backward(loss);
        for (name, var) in taped.named() {
            if let Some(g) = grads.get(var) {
                let g = g.clone();
                policy.visit_tensors_mut(&mut |n, t| {
                    if n == name {
                        opt.step(&n, t, &g).unwrap();
                    }
                });
            }
        }
    }
    Ok(first_stats.unwrap())
}

/// Central-difference check of the clipped-surrogate gradient with respect to
/// the policy head weights, on one freshly sampled trajectory.
pub fn surrogate_grad_error(policy: &PolicyParams) -> Result<f64> {
    let pooled: Vec<f64> = (0..policy.input_dim - 2)
        .map(|i| 0.3 - 0.1 * i as f64)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut traj = select_depth(policy, &pooled, 6, 12, 0.3, &mut rng)?;
    let cfg = PpoConfig::default();
    let ratio = traj.chosen_depth as f64 / 12.0;
    hierarchical_reward(&mut traj, true, ratio, 6, &RewardConfig::default())?;
    compute_gae(&mut traj, cfg.gamma, cfg.gae_lambda);
    let p0 = policy.clone();
    let f = |w: &Tensor| -> Result<(f64, Tensor)> {
        let mut p = p0.clone();
        p.policy_w = w.clone();
        let mut tape = Tape::new();
        let taped = TapedPolicy::new(&mut tape, &p);
        let mut h = tape.leaf(Tensor::zeros(&[1, POLICY_HIDDEN]));
        let mut c = tape.leaf(Tensor::zeros(&[1, POLICY_HIDDEN]));
        let mut surrogates = Vec::new();
        for (i, x) in traj.inputs.iter().enumerate() {
            let xv = tape.leaf(Tensor::new(vec![1, x.len()], x.clone())?);
            let (h_new, c_new, logits, _) = taped.step(&mut tape, xv, h, c);
            let idx = match traj.actions[i] {
                DepthAction::Continue => 0,
                DepthAction::Exit => 1,
            };
            let lp = tape.log_prob(logits, idx);
            let d = tape.add_const(lp, -traj.logprobs[i]);
            let ratio = tape.exp(d);
            let un = tape.scale(ratio, traj.advantages[i]);
            let rc = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
            let cl = tape.scale(rc, traj.advantages[i]);
            surrogates.push(tape.min2(un, cl));
            h = h_new;
            c = c_new;
        }
        let total = tape.sum_scalars(&surrogates);
        let loss = tape.scale(total, -1.0);
        let grads = tape.backward(loss);
        let g = grads
            .get(taped.policy_w)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&w.shape));
        Ok((tape.scalar_value(loss), g))
    };
    crate::autodiff::grad_check(f, &policy.policy_w, 1e-5)
}
