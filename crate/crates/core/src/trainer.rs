//! Two-stage collaborative training loop: every epoch trains the depth
//! predictor against refreshed oracle labels, then alternates PPO on the
//! controller (every third epoch) with CE+KD on the backbone.

use crate::backbone::{
    self, task_loss_on_tape, BackboneConfig, BackboneParams, TapedBackbone,
};
use crate::checkpoint::Checkpoint;
use crate::controller::{
    compute_gae, hierarchical_reward, ppo_update, select_depth, select_depth_greedy,
    PolicyParams, PpoConfig, PpoStats, RewardConfig, Trajectory,
};
use crate::data::{Dataset, DatasetRecord, Difficulty};
use crate::engine::DepthDistribution;
use crate::error::{CoreError, Result};
use crate::features::{self, ExtractorConfig, ExtractorParams};
use crate::opt::Adam;
use crate::predictor::{
    oracle_l_opt, predict_depth, train_h3_teacher, train_predictor, DepthLabel, GbtConfig,
    GbtModel,
};
use crate::report::{DepthHistogram, EpochRecord};
use crate::autodiff::Tape;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub backbone: BackboneConfig,
    pub extractor: ExtractorConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_halving_period: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub kd_temperature: f64,
    pub kd_weight: f64,
    /// Exploration rate used during rollout collection.
    pub epsilon: f64,
    pub oracle_refresh_fraction: f64,
    pub oracle_slack: f64,
    /// Rollout batches (of batch_size trajectories) per PPO epoch.
    pub rollout_batches: usize,
    pub train_fraction: f64,
    /// Backbone batches per epoch; 0 means the whole training split.
    pub max_batches: usize,
    /// Validation samples used for per-epoch metrics; 0 means all.
    pub eval_subset: usize,
    /// Training samples used to fit the depth predictor each epoch; 0 means
    /// all. Tree fitting scans every candidate split, so this dominates the
    /// per-epoch cost on large datasets.
    pub predictor_subsample: usize,
    pub ppo: PpoConfig,
    pub predictor: GbtConfig,
    pub reward: RewardConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk_default() -> Self {
        TrainConfig {
            backbone: BackboneConfig::desk_default(),
            extractor: ExtractorConfig::default(),
            epochs: 30,
            batch_size: 32,
            base_lr: 1e-4,
            lr_halving_period: 10,
            patience: 5,
            min_delta: 1e-4,
            kd_temperature: 2.0,
            kd_weight: 0.5,
            epsilon: 0.1,
            oracle_refresh_fraction: 0.25,
            oracle_slack: 0.05,
            rollout_batches: 8,
            train_fraction: 0.8,
            max_batches: 0,
            eval_subset: 512,
            predictor_subsample: 0,
            ppo: PpoConfig::default(),
            predictor: GbtConfig::default(),
            reward: RewardConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_halving_period == 0 {
            return Err(CoreError::Parameter(
                "epochs, batch size, and halving period must be positive".into(),
            ));
        }
        if self.base_lr <= 0.0 || self.min_delta < 0.0 {
            return Err(CoreError::Parameter("bad learning-rate settings".into()));
        }
        if self.kd_temperature <= 0.0 || !(0.0..=1.0).contains(&self.kd_weight) {
            return Err(CoreError::Parameter("bad distillation settings".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon)
            || !(0.0..=1.0).contains(&self.oracle_refresh_fraction)
            || !(0.0..1.0).contains(&self.train_fraction)
        {
            return Err(CoreError::Parameter("bad fraction settings".into()));
        }
        self.backbone.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Ppo,
    Backbone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochPlan {
    pub epoch: usize,
    /// Stage 1 (predictor) runs every epoch; this is stage 2.
    pub phase: Phase,
}

pub fn schedule(epoch: usize) -> EpochPlan {
    EpochPlan {
        epoch,
        // backbone epochs lead each block so the exit heads have signal
        // before the controller prunes depth
        phase: if epoch % 4 == 3 {
            Phase::Ppo
        } else {
            Phase::Backbone
        },
    }
}

pub fn lr_at(epoch: usize, base: f64, halving_period: usize) -> f64 {
    base * 0.5f64.powi((epoch / halving_period) as i32)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub n: usize,
    pub accuracy: f64,
    pub mean_depth: f64,
    pub mean_flops: f64,
    pub flops_full: f64,
    pub flops_ratio: f64,
    pub histograms: Vec<DepthHistogram>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_DATA: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_ROLLOUT: u64 = 3;

fn finite_or(loss: f64, phase: &str, epoch: usize, step: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(CoreError::Evaluation(format!(
            "non-finite loss in {phase} stage, epoch {epoch}, step {step}"
        )))
    }
}

struct Precomputed {
    pooled1: Vec<Vec<f64>>,
    pooled2: Vec<Vec<f64>>,
    pooled3: Vec<Vec<f64>>,
}

fn precompute(records: &[DatasetRecord], extractor: &ExtractorParams) -> Result<Precomputed> {
    let mut pooled1 = Vec::with_capacity(records.len());
    let mut pooled2 = Vec::with_capacity(records.len());
    let mut pooled3 = Vec::with_capacity(records.len());
    for r in records {
        let f = features::extract(&r.tokens, extractor)?;
        pooled1.push(f.pooled1);
        pooled2.push(f.pooled2);
        pooled3.push(f.pooled3);
    }
    Ok(Precomputed {
        pooled1,
        pooled2,
        pooled3,
    })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Runs the adaptive pipeline greedily over `records` and aggregates
/// accuracy, depth, and FLOPs; histogram counts sum to n per bucket.
pub fn evaluate(
    backbone_params: &BackboneParams,
    extractor: &ExtractorParams,
    gbt: &GbtModel,
    policy: &PolicyParams,
    records: &[DatasetRecord],
) -> Result<EvalSummary> {
    if records.is_empty() {
        return Err(CoreError::Input("empty evaluation set".into()));
    }
    let cfg = &backbone_params.config;
    let max_depth = cfg.num_layers;
    let flops_full = backbone::flops_of_depth(cfg, max_depth);
    let mut hists = vec![
        DepthHistogram::new(Difficulty::Easy, max_depth),
        DepthHistogram::new(Difficulty::Medium, max_depth),
        DepthHistogram::new(Difficulty::Hard, max_depth),
    ];
    let mut correct = 0usize;
    let mut depth_sum = 0usize;
    let mut flops_sum = 0.0;
    for r in records {
        let f = features::extract(&r.tokens, extractor)?;
        let pred = predict_depth(gbt, &f.pooled1, max_depth)?;
        let depth = select_depth_greedy(policy, &f.pooled2, pred.l_pred, max_depth)?;
        let out = backbone::forward_to_depth(&r.tokens, backbone_params, depth)?;
        let logits = out.logits_per_exit.last().unwrap();
        if argmax(logits) == r.label {
            correct += 1;
        }
        depth_sum += depth;
        flops_sum += backbone::flops_of_depth(cfg, depth);
        let bucket = match r.difficulty {
            Difficulty::Easy => 0,
            Difficulty::Medium => 1,
            Difficulty::Hard => 2,
        };
        hists[bucket].record(depth)?;
    }
    let n = records.len();
    Ok(EvalSummary {
        n,
        accuracy: correct as f64 / n as f64,
        mean_depth: depth_sum as f64 / n as f64,
        mean_flops: flops_sum / n as f64,
        flops_full,
        flops_ratio: flops_sum / n as f64 / flops_full,
        histograms: hists,
    })
}

fn refresh_oracles(
    records: &[DatasetRecord],
    labels: &mut [usize],
    indices: &[usize],
    params: &BackboneParams,
    slack: f64,
) -> Result<()> {
    for &i in indices {
        labels[i] = oracle_l_opt(&records[i].tokens, records[i].label, params, slack)?.0;
    }
    Ok(())
}

fn apply_grads_to_backbone(
    params: &mut BackboneParams,
    taped: &TapedBackbone,
    tape: &Tape,
    grads: &crate::autodiff::Gradients,
    opt: &mut Adam,
) -> Result<()> {
    let _ = tape;
    let mut name_to_grad = std::collections::HashMap::new();
    taped.visit_vars(&mut |name, var| {
        if let Some(g) = grads.get(var) {
            name_to_grad.insert(name, g.clone());
        }
    });
    let mut err = None;
    params.visit_tensors_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        if let Some(g) = name_to_grad.get(&name) {
            if let Err(e) = opt.step(&name, t, g) {
                err = Some(e);
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// One rollout, reward, and execution pass for a single training sample.
fn rollout_one(
    i: usize,
    records: &[DatasetRecord],
    pre: &Precomputed,
    gbt: &GbtModel,
    policy: &PolicyParams,
    params: &BackboneParams,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let max_depth = params.config.num_layers;
    let pred = predict_depth(gbt, &pre.pooled1[i], max_depth)?;
    let mut traj = select_depth(
        policy,
        &pre.pooled2[i],
        pred.l_pred,
        max_depth,
        cfg.epsilon,
        rng,
    )?;
    let out = backbone::forward_to_depth(&records[i].tokens, params, traj.chosen_depth)?;
    let correct = argmax(out.logits_per_exit.last().unwrap()) == records[i].label;
    let ratio = backbone::flops_of_depth(&params.config, traj.chosen_depth)
        / backbone::flops_of_depth(&params.config, max_depth);
    hierarchical_reward(&mut traj, correct, ratio, pred.l_pred, &cfg.reward)?;
    compute_gae(&mut traj, cfg.ppo.gamma, cfg.ppo.gae_lambda);
    Ok(traj)
}

/// Mean CE at the greedily selected exit over a validation subset.
fn validation_pass(
    records: &[DatasetRecord],
    pre: &Precomputed,
    params: &BackboneParams,
    gbt: &GbtModel,
    policy: &PolicyParams,
    oracle_slack: f64,
    cap: usize,
) -> Result<(f64, f64, f64, f64, f64, Vec<usize>)> {
    let n = if cap == 0 {
        records.len()
    } else {
        records.len().min(cap)
    };
    let max_depth = params.config.num_layers;
    let flops_full = backbone::flops_of_depth(&params.config, max_depth);
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut depth_sum = 0usize;
    let mut flops_sum = 0.0;
    let mut alpha_hits = 0usize;
    let mut depths = Vec::with_capacity(n);
    for i in 0..n {
        let r = &records[i];
        let pred = predict_depth(gbt, &pre.pooled1[i], max_depth)?;
        let depth = select_depth_greedy(policy, &pre.pooled2[i], pred.l_pred, max_depth)?;
        let out = backbone::forward_to_depth(&r.tokens, params, depth)?;
        let logits = out.logits_per_exit.last().unwrap();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
        loss_sum += z.ln() + m - logits[r.label];
        if argmax(logits) == r.label {
            correct += 1;
        }
        depth_sum += depth;
        flops_sum += backbone::flops_of_depth(&params.config, depth);
        let oracle = oracle_l_opt(&r.tokens, r.label, params, oracle_slack)?.0;
        if pred.l_pred == oracle {
            alpha_hits += 1;
        }
        depths.push(depth);
    }
    Ok((
        loss_sum / n as f64,
        correct as f64 / n as f64,
        depth_sum as f64 / n as f64,
        flops_sum / n as f64 / flops_full,
        alpha_hits as f64 / n as f64,
        depths,
    ))
}

pub fn run(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.records.is_empty() {
        return Err(CoreError::Input("empty dataset".into()));
    }
    if dataset.header.vocab_size > cfg.backbone.vocab_size
        || dataset.header.seq_len > cfg.backbone.max_len
        || dataset.header.num_classes != cfg.backbone.num_classes
    {
        return Err(CoreError::Configuration(format!(
            "dataset (vocab {}, len {}, classes {}) does not fit backbone config",
            dataset.header.vocab_size, dataset.header.seq_len, dataset.header.num_classes
        )));
    }
    let (train, val) = dataset.split(cfg.train_fraction);
    if cfg.batch_size > train.len() {
        return Err(CoreError::Parameter(format!(
            "batch size {} exceeds training-split size {}",
            cfg.batch_size,
            train.len()
        )));
    }
    if val.is_empty() {
        return Err(CoreError::Input("validation split is empty".into()));
    }

    let mut init_rng = stream_rng(cfg.seed, STREAM_INIT);
    let mut backbone_params = BackboneParams::init(cfg.backbone.clone(), init_rng.gen())?;
    let extractor = ExtractorParams::init(cfg.extractor.clone(), init_rng.gen());
    let pooled2_dim = features::extract(&train[0].tokens, &extractor)?.pooled2.len();
    let mut policy = PolicyParams::init(pooled2_dim, init_rng.gen());
    let mut policy_opt = Adam::new(cfg.ppo.lr);
    let mut backbone_opt = Adam::new(cfg.base_lr);
    let mut depth_dist = DepthDistribution::uniform(cfg.backbone.num_layers);

    let pre_train = precompute(&train, &extractor)?;
    let pre_val = precompute(&val, &extractor)?;

    let mut data_rng = stream_rng(cfg.seed, STREAM_DATA);
    let mut rollout_rng = stream_rng(cfg.seed, STREAM_ROLLOUT);

    // initial oracle labels: one full pass with the fresh backbone
    let mut oracle_labels = vec![cfg.backbone.num_layers; train.len()];
    let all: Vec<usize> = (0..train.len()).collect();
    refresh_oracles(&train, &mut oracle_labels, &all, &backbone_params, cfg.oracle_slack)?;

    let mut report: Vec<EpochRecord> = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_ck: Option<Checkpoint> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;
    let mut last_stats: Option<PpoStats> = None;

    for epoch in 0..cfg.epochs {
        let plan = schedule(epoch);
        let lr = lr_at(epoch, cfg.base_lr, cfg.lr_halving_period);

        // stage 1: controller and backbone frozen, predictor retrained
        let policy_hash = policy.content_hash();
        let backbone_hash = backbone_params.content_hash();
        if epoch > 0 && cfg.oracle_refresh_fraction > 0.0 {
            let k = ((train.len() as f64) * cfg.oracle_refresh_fraction).round() as usize;
            let mut idx: Vec<usize> = (0..train.len()).collect();
            idx.shuffle(&mut data_rng);
            idx.truncate(k.max(1));
            refresh_oracles(&train, &mut oracle_labels, &idx, &backbone_params, cfg.oracle_slack)?;
        }
        let labels: Vec<DepthLabel> = oracle_labels.iter().map(|&l| DepthLabel(l)).collect();
        let ridge = train_h3_teacher(&pre_train.pooled3, &labels)?;
        let teacher_targets: Vec<f64> =
            pre_train.pooled3.iter().map(|p| ridge.predict(p)).collect();
        let (model, pred_report) = if cfg.predictor_subsample == 0
            || cfg.predictor_subsample >= train.len()
        {
            train_predictor(&pre_train.pooled1, &labels, &teacher_targets, &cfg.predictor)?
        } else {
            let mut idx: Vec<usize> = (0..train.len()).collect();
            idx.shuffle(&mut data_rng);
            idx.truncate(cfg.predictor_subsample);
            let f: Vec<Vec<f64>> = idx.iter().map(|&i| pre_train.pooled1[i].clone()).collect();
            let l: Vec<DepthLabel> = idx.iter().map(|&i| labels[i].clone()).collect();
            let t: Vec<f64> = idx.iter().map(|&i| teacher_targets[i]).collect();
            train_predictor(&f, &l, &t, &cfg.predictor)?
        };
        finite_or(pred_report.training_mae, "predictor", epoch, 0)?;
        debug_assert_eq!(policy.content_hash(), policy_hash);
        debug_assert_eq!(backbone_params.content_hash(), backbone_hash);
        let gbt_ref = &model;

        // stage 2
        match plan.phase {
            Phase::Ppo => {
                let pred_hash_guard = backbone_params.content_hash();
                for batch_i in 0..cfg.rollout_batches {
                    let mut batch: Vec<Trajectory> = Vec::with_capacity(cfg.batch_size);
                    for _ in 0..cfg.batch_size {
                        let i = data_rng.gen_range(0..train.len());
                        batch.push(rollout_one(
                            i,
                            &train,
                            &pre_train,
                            gbt_ref,
                            &policy,
                            &backbone_params,
                            cfg,
                            &mut rollout_rng,
                        )?);
                    }
                    for t in &batch {
                        depth_dist.update(t.chosen_depth)?;
                    }
                    let stats = ppo_update(&mut policy, &mut policy_opt, &mut batch, &cfg.ppo)?;
                    finite_or(stats.policy_loss + stats.value_loss, "ppo", epoch, batch_i)?;
                    last_stats = Some(stats);
                }
                debug_assert_eq!(backbone_params.content_hash(), pred_hash_guard);
            }
            Phase::Backbone => {
                backbone_opt.lr = lr;
                let policy_hash_guard = policy.content_hash();
                // teacher logits come from the epoch-start full-depth snapshot
                let snapshot = backbone_params.clone();
                let full = cfg.backbone.num_layers;
                let mut order: Vec<usize> = (0..train.len()).collect();
                order.shuffle(&mut data_rng);
                let n_batches = {
                    let all = train.len() / cfg.batch_size;
                    if cfg.max_batches == 0 {
                        all.max(1)
                    } else {
                        all.max(1).min(cfg.max_batches)
                    }
                };
                for b in 0..n_batches {
                    let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
                    let mut tape = Tape::new();
                    let taped = TapedBackbone::new(&mut tape, &backbone_params);
                    let mut losses = Vec::with_capacity(2 * idx.len());
                    for &i in idx {
                        let r = &train[i];
                        let exits = taped.forward(&mut tape, &r.tokens, full);
                        // the final head trains on plain cross-entropy, the
                        // same objective the full-depth baseline uses
                        losses.push(tape.cross_entropy(*exits.last().unwrap(), r.label));
                        // the exit the frozen controller currently picks and
                        // the exit the depth predictor suggests both get the
                        // task loss with the snapshot's final head as the
                        // knowledge-distillation teacher
                        let pred = predict_depth(gbt_ref, &pre_train.pooled1[i], full)?;
                        let chosen =
                            select_depth_greedy(&policy, &pre_train.pooled2[i], pred.l_pred, full)?;
                        let mut aux = vec![chosen, pred.l_pred];
                        aux.sort_unstable();
                        aux.dedup();
                        aux.retain(|&d| d != full);
                        if !aux.is_empty() {
                            let t_out = backbone::forward_to_depth(&r.tokens, &snapshot, full)?;
                            let teacher_logits = crate::tensor::Tensor {
                                shape: vec![cfg.backbone.num_classes],
                                data: t_out.logits_per_exit.last().unwrap().clone(),
                            };
                            for d in aux {
                                losses.push(task_loss_on_tape(
                                    &mut tape,
                                    exits[d - 1],
                                    r.label,
                                    &teacher_logits,
                                    cfg.kd_weight,
                                    cfg.kd_temperature,
                                ));
                            }
                        }
                    }
                    let total = tape.sum_scalars(&losses);
                    let loss = tape.scale(total, 1.0 / idx.len() as f64);
                    finite_or(tape.scalar_value(loss), "backbone", epoch, b)?;
                    let grads = tape.backward(loss);
                    apply_grads_to_backbone(
                        &mut backbone_params,
                        &taped,
                        &tape,
                        &grads,
                        &mut backbone_opt,
                    )?;
                }
                debug_assert_eq!(policy.content_hash(), policy_hash_guard);
            }
        }

        // per-epoch metrics on the validation split
        let (val_loss, val_acc, mean_depth, flops_ratio, alpha, depths) = validation_pass(
            &val,
            &pre_val,
            &backbone_params,
            gbt_ref,
            &policy,
            cfg.oracle_slack,
            cfg.eval_subset,
        )?;
        finite_or(val_loss, "validation", epoch, 0)?;
        for d in depths {
            depth_dist.update(d)?;
        }
        let (mean_reward, entropy) = last_stats
            .as_ref()
            .map(|s| (s.mean_reward, s.entropy))
            .unwrap_or((0.0, 0.0));
        report.push(EpochRecord {
            epoch,
            phase: match plan.phase {
                Phase::Ppo => "ppo".into(),
                Phase::Backbone => "backbone".into(),
            },
            lr,
            train_loss: f64::NAN,
            val_loss,
            val_accuracy: val_acc,
            alpha,
            mean_depth,
            flops_ratio,
            mean_reward,
            policy_entropy: entropy,
        });
        // train_loss is reported as the predictor stage objective to keep the
        // record complete without a second training-set pass
        report.last_mut().unwrap().train_loss = pred_report.training_mae;

        let improved = val_loss < best_val - cfg.min_delta;
        if improved || best_ck.is_none() {
            best_val = val_loss.min(best_val);
            best_epoch = epoch;
            since_best = 0;
            best_ck = Some(Checkpoint {
                backbone: backbone_params.clone(),
                extractor: extractor.clone(),
                gbt: model.clone(),
                teacher: ridge.clone(),
                policy: policy.clone(),
                depth_dist: depth_dist.clone(),
            });
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(TrainOutcome {
        checkpoint: best_ck.expect("at least one epoch ran"),
        report,
        best_epoch,
        best_val_loss: best_val,
        stopped_early,
    })
}

/// Full-depth baseline trained with the same budget: CE only, no adaptive
/// machinery, identical lr schedule and early stopping.
pub fn run_baseline(dataset: &Dataset, cfg: &TrainConfig) -> Result<(BackboneParams, Vec<f64>)> {
    cfg.validate()?;
    if dataset.records.is_empty() {
        return Err(CoreError::Input("empty dataset".into()));
    }
    let (train, val) = dataset.split(cfg.train_fraction);
    if val.is_empty() {
        return Err(CoreError::Input("validation split is empty".into()));
    }
    let mut init_rng = stream_rng(cfg.seed, STREAM_INIT);
    let mut params = BackboneParams::init(cfg.backbone.clone(), init_rng.gen())?;
    let mut opt = Adam::new(cfg.base_lr);
    let mut data_rng = stream_rng(cfg.seed, STREAM_DATA);
    let full = cfg.backbone.num_layers;
    let mut val_curve = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best: Option<BackboneParams> = None;
    let mut since_best = 0usize;
    for epoch in 0..cfg.epochs {
        opt.lr = lr_at(epoch, cfg.base_lr, cfg.lr_halving_period);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut data_rng);
        let n_batches = {
            let all = train.len() / cfg.batch_size;
            if cfg.max_batches == 0 {
                all.max(1)
            } else {
                all.max(1).min(cfg.max_batches)
            }
        };
        for b in 0..n_batches {
            let idx = &order[b * cfg.batch_size..b * cfg.batch_size + cfg.batch_size];
            let mut tape = Tape::new();
            let taped = TapedBackbone::new(&mut tape, &params);
            let mut losses = Vec::with_capacity(idx.len());
            for &i in idx {
                let exits = taped.forward(&mut tape, &train[i].tokens, full);
                losses.push(tape.cross_entropy(*exits.last().unwrap(), train[i].label));
            }
            let total = tape.sum_scalars(&losses);
            let loss = tape.scale(total, 1.0 / losses.len() as f64);
            finite_or(tape.scalar_value(loss), "baseline", epoch, b)?;
            let grads = tape.backward(loss);
            apply_grads_to_backbone(&mut params, &taped, &tape, &grads, &mut opt)?;
        }
        let cap = if cfg.eval_subset == 0 {
            val.len()
        } else {
            val.len().min(cfg.eval_subset)
        };
        let mut loss_sum = 0.0;
        for r in val.iter().take(cap) {
            let out = backbone::forward_to_depth(&r.tokens, &params, full)?;
            let logits = out.logits_per_exit.last().unwrap();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
            loss_sum += z.ln() + m - logits[r.label];
        }
        let val_loss = loss_sum / cap as f64;
        finite_or(val_loss, "baseline-validation", epoch, 0)?;
        val_curve.push(val_loss);
        if val_loss < best_val - cfg.min_delta || best.is_none() {
            best_val = val_loss.min(best_val);
            best = Some(params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok((best.expect("at least one epoch ran"), val_curve))
}

/// Accuracy of a plain full-depth forward pass.
pub fn full_depth_accuracy(params: &BackboneParams, records: &[DatasetRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(CoreError::Input("empty evaluation set".into()));
    }
    let full = params.config.num_layers;
    let mut correct = 0usize;
    for r in records {
        let out = backbone::forward_to_depth(&r.tokens, params, full)?;
        if argmax(out.logits_per_exit.last().unwrap()) == r.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / records.len() as f64)
}
