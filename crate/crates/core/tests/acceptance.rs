//! End-to-end acceptance checks. Each criterion prints one pass/fail line;
//! run with --nocapture to see them.

use adepth_core::autodiff::{grad_check, Tape};
use adepth_core::backbone::{
    self, fold_layers, task_loss_on_tape, BackboneConfig, BackboneParams, TapedBackbone, Weight,
};
use adepth_core::controller::PolicyParams;
use adepth_core::data::{generate, Dataset, GenConfig};
use adepth_core::engine::{self, BufferPool, DepthDistribution};
use adepth_core::features::ExtractorConfig;
use adepth_core::opt::Adam;
use adepth_core::predictor::oracle_l_opt;
use adepth_core::tensor::{softmax_t, Tensor};
use adepth_core::theory::{self, BoundParams, NonOptimalMode};
use adepth_core::trainer::{self, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn pass(criterion: &str, detail: String) {
    println!("[{criterion}] PASS: {detail}");
}

// ---- criterion 1: Monte Carlo verification of the expected-FLOPs bound ----

#[test]
fn criterion_1_bound_grid() {
    let start = Instant::now();
    let alphas = [0.5, 0.625, 0.75, 0.875, 1.0];
    let epsilons = [0.0, 0.075, 0.15, 0.225, 0.3];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut holds = 0;
    for &a in &alphas {
        for &e in &epsilons {
            let p = BoundParams::from_depths(a, e, 0.0, 1.0, 6, 12).unwrap();
            let sim =
                theory::simulate_expected_flops(&p, 100_000, NonOptimalMode::WorstCase, &mut rng)
                    .unwrap();
            let tight = theory::bound_tight(&p).unwrap();
            let loose = theory::bound_loose(&p).unwrap();
            let tol = 3.0 * sim.sem.max(1e-12);
            // equality cells (loose == expected value) get the 3 sem tolerance
            let slack = if loose - tight <= tol { tol } else { 0.0 };
            assert!(
                sim.mean <= loose + slack,
                "mean {} exceeds loose bound {} at alpha {a}, epsilon {e}",
                sim.mean,
                loose
            );
            assert!(
                (sim.mean - tight).abs() <= tol,
                "mean {} not within 3 sem of tight bound {} at alpha {a}, epsilon {e}",
                sim.mean,
                tight
            );
            holds += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "bound grid took {secs:.1}s");
    pass(
        "criterion 1",
        format!("mean <= loose bound in {holds}/25 grid cells, mean within 3 sem of tight, {secs:.1}s"),
    );
}

// ---- criterion 3: execution engine equivalence, switching, pool ----

#[test]
fn criterion_3_engine() {
    let start = Instant::now();
    let params = BackboneParams::init(BackboneConfig::desk_default(), 33).unwrap();
    let cfg = params.config.clone();
    let plans = engine::compile_plans(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut pool = BufferPool::desk_default(cfg.num_layers);

    // plan output matches the eager path at every depth for 100 inputs
    let mut max_diff = 0.0f64;
    for _ in 0..100 {
        let tokens: Vec<usize> = (0..cfg.max_len)
            .map(|_| rng.gen_range(0..cfg.vocab_size))
            .collect();
        for plan in &plans {
            let out = engine::execute(plan, &tokens, &mut pool).unwrap();
            let eager = backbone::forward_to_depth(&tokens, &params, plan.depth).unwrap();
            for (a, b) in out.logits.iter().zip(eager.logits_per_exit.last().unwrap()) {
                max_diff = max_diff.max((a - b).abs());
            }
        }
    }
    assert!(max_diff <= 1e-6, "plan/eager diverged by {max_diff:e}");

    // depth switching costs < 1.10x the per-depth baseline
    let tokens: Vec<usize> = (0..cfg.max_len)
        .map(|_| rng.gen_range(0..cfg.vocab_size))
        .collect();
    let reps = 300usize;
    let mut per_depth_total = 0.0;
    for plan in &plans {
        engine::execute(plan, &tokens, &mut pool).unwrap();
        let t0 = Instant::now();
        for _ in 0..reps {
            engine::execute(plan, &tokens, &mut pool).unwrap();
        }
        per_depth_total += t0.elapsed().as_secs_f64();
    }
    let t0 = Instant::now();
    for i in 0..reps * plans.len() {
        engine::execute(&plans[i % plans.len()], &tokens, &mut pool).unwrap();
    }
    let switched = t0.elapsed().as_secs_f64();
    let overhead = switched / per_depth_total;
    assert!(
        overhead < 1.10,
        "depth-switch overhead {overhead:.3}x exceeds 1.10x"
    );

    // pool sized at 1.5x the expected working set keeps hit rate >= 0.9
    let dist = DepthDistribution::uniform(cfg.num_layers);
    let ws = engine::expected_working_set(&dist, &plans);
    let mut sized = BufferPool::new((ws * 1.5) as usize, cfg.num_layers);
    engine::rebalance_pool(&mut sized, &dist, &plans).unwrap();
    let short: Vec<usize> = tokens[..4].to_vec();
    for i in 0..10_000usize {
        let plan = &plans[i % plans.len()];
        engine::execute(plan, &short, &mut sized).unwrap();
    }
    let hit_rate = sized.hit_rate();
    assert!(hit_rate >= 0.9, "pool hit rate {hit_rate:.3} below 0.9");

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 120.0, "engine criterion took {secs:.1}s");
    pass(
        "criterion 3",
        format!(
            "plan/eager max diff {max_diff:.2e}, switch overhead {overhead:.3}x, hit rate {hit_rate:.3}, {secs:.1}s"
        ),
    );
}

// ---- criteria 2, 4, 5, 6: the standard training runs ----

fn desk_dataset(seed: u64) -> Dataset {
    generate(&GenConfig {
        n: 5000,
        vocab_size: 32,
        num_classes: 4,
        seq_len: 16,
        easy_fraction: 0.6,
        seed,
    })
    .unwrap()
}

fn desk_train_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk_default();
    cfg.epochs = 9;
    cfg.batch_size = 32;
    cfg.max_batches = 10;
    cfg.rollout_batches = 30;
    cfg.eval_subset = 200;
    cfg.ppo.lr = 1e-3;
    cfg.predictor.n_trees = 60;
    cfg.seed = seed;
    cfg
}

#[test]
fn criteria_2_4_5_6_training_pipeline() {
    let start = Instant::now();
    let dataset = desk_dataset(100);
    let seeds = [1u64, 2, 3];
    let mut results = Vec::new();
    for &seed in &seeds {
        let cfg = desk_train_config(seed);
        let outcome = trainer::run(&dataset, &cfg).unwrap();
        let (_, val) = dataset.split(cfg.train_fraction);
        let ck = &outcome.checkpoint;
        let summary =
            trainer::evaluate(&ck.backbone, &ck.extractor, &ck.gbt, &ck.policy, &val).unwrap();
        let (baseline, _) = trainer::run_baseline(&dataset, &cfg).unwrap();
        let baseline_acc = trainer::full_depth_accuracy(&baseline, &val).unwrap();
        results.push((seed, outcome, summary, baseline_acc));
    }

    // criterion 4: accuracy parity, mean depth, flops ratio, wall time
    let full_depth = BackboneConfig::desk_default().num_layers as f64;
    for (seed, _, summary, baseline_acc) in &results {
        assert!(
            summary.accuracy >= baseline_acc - 0.01,
            "seed {seed}: adaptive accuracy {:.4} more than 1 point below baseline {:.4}",
            summary.accuracy,
            baseline_acc
        );
        assert!(
            summary.mean_depth <= 0.8 * full_depth,
            "seed {seed}: mean depth {:.2} exceeds 0.8L",
            summary.mean_depth
        );
        assert!(
            summary.flops_ratio <= 0.80,
            "seed {seed}: flops ratio {:.3} exceeds 0.80",
            summary.flops_ratio
        );
    }
    let train_secs = start.elapsed().as_secs_f64();
    assert!(train_secs < 1800.0, "training took {train_secs:.0}s");
    pass(
        "criterion 4",
        format!(
            "3 seeds: accuracy {:?} vs baselines {:?}, mean depths {:?}, flops ratios {:?}, {train_secs:.0}s",
            results.iter().map(|r| (r.2.accuracy * 1e4).round() / 1e4).collect::<Vec<_>>(),
            results.iter().map(|r| (r.3 * 1e4).round() / 1e4).collect::<Vec<_>>(),
            results.iter().map(|r| (r.2.mean_depth * 100.0).round() / 100.0).collect::<Vec<_>>(),
            results.iter().map(|r| (r.2.flops_ratio * 1e3).round() / 1e3).collect::<Vec<_>>()
        ),
    );

    // criterion 5: easy modal depth strictly below hard modal depth, all seeds
    for (seed, _, summary, _) in &results {
        let easy = summary.histograms[0].modal_depth();
        let hard = summary.histograms[2].modal_depth();
        assert!(
            easy < hard,
            "seed {seed}: easy modal depth {easy} not below hard modal depth {hard}"
        );
    }
    pass(
        "criterion 5",
        format!(
            "easy vs hard modal depths per seed: {:?}",
            results
                .iter()
                .map(|r| (r.2.histograms[0].modal_depth(), r.2.histograms[2].modal_depth()))
                .collect::<Vec<_>>()
        ),
    );

    // criterion 2: live bound satisfied on the first seed's artifacts
    let (_, outcome, _, _) = &results[0];
    let ck = &outcome.checkpoint;
    let cfg = desk_train_config(seeds[0]);
    let (_, val) = dataset.split(cfg.train_fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let records: Vec<(Vec<usize>, Option<usize>)> = val
        .iter()
        .take(300)
        .map(|r| {
            let l_opt = oracle_l_opt(&r.tokens, r.label, &ck.backbone, cfg.oracle_slack)
                .unwrap()
                .0;
            (r.tokens.clone(), Some(l_opt))
        })
        .collect();
    let live = theory::measure_live_bound(
        &ck.backbone,
        &ck.extractor,
        &ck.gbt,
        &ck.policy,
        &records,
        cfg.epsilon,
        &mut rng,
    )
    .unwrap();
    assert!(
        live.satisfied,
        "live bound violated: mean flops {:.3e} vs loose bound {:.3e}",
        live.mean_flops, live.bound_loose
    );
    pass(
        "criterion 2",
        format!(
            "measured alpha {:.3}, epsilon {:.3}, p_explore {:.3}; mean flops {:.3e} <= loose bound {:.3e}",
            live.alpha, live.epsilon, live.p_explore, live.mean_flops, live.bound_loose
        ),
    );

    // criterion 6: fold at 0.9 energy, fine-tune 2 epochs, compare
    let pre_fold = trainer::evaluate(&ck.backbone, &ck.extractor, &ck.gbt, &ck.policy, &val)
        .unwrap()
        .accuracy;
    let params_before = ck.backbone.param_count();
    let mut folded = fold_layers(&ck.backbone, 0.9).unwrap();
    let params_after = folded.param_count();
    let reduction = 1.0 - params_after as f64 / params_before as f64;
    assert!(
        reduction >= 0.20,
        "folding removed only {:.1}% of parameters",
        reduction * 100.0
    );
    for layer in &folded.layers {
        for w in [&layer.wq, &layer.wk, &layer.wv, &layer.wo, &layer.w1, &layer.w2] {
            match w {
                Weight::Folded(f) => assert!(
                    f.energy_retained >= 0.9,
                    "folded matrix retains only {:.3} energy",
                    f.energy_retained
                ),
                Weight::Dense(_) => panic!("expected folded weight"),
            }
        }
    }
    // two fine-tune epochs at the training settings, CE on every exit head
    let (train, _) = dataset.split(cfg.train_fraction);
    let mut opt = Adam::new(cfg.base_lr);
    let mut data_rng = ChaCha8Rng::seed_from_u64(66);
    for _ in 0..2 {
        for b in 0..cfg.max_batches {
            let mut tape = Tape::new();
            let taped = TapedBackbone::new(&mut tape, &folded);
            let mut losses = Vec::new();
            for k in 0..cfg.batch_size {
                let i = (data_rng.gen_range(0..train.len()) + b + k) % train.len();
                let exits = taped.forward(&mut tape, &train[i].tokens, folded.config.num_layers);
                for e in &exits {
                    losses.push(tape.cross_entropy(*e, train[i].label));
                }
            }
            let total = tape.sum_scalars(&losses);
            let loss = tape.scale(total, 1.0 / losses.len() as f64);
            let grads = tape.backward(loss);
            let mut name_to_grad = std::collections::HashMap::new();
            taped.visit_vars(&mut |name, var| {
                if let Some(g) = grads.get(var) {
                    name_to_grad.insert(name, g.clone());
                }
            });
            folded.visit_tensors_mut(&mut |name, t| {
                if let Some(g) = name_to_grad.get(&name) {
                    opt.step(&name, t, g).unwrap();
                }
            });
        }
    }
    let post_fold = trainer::evaluate(&folded, &ck.extractor, &ck.gbt, &ck.policy, &val)
        .unwrap()
        .accuracy;
    assert!(
        pre_fold - post_fold <= 0.02,
        "folding cost {:.1} accuracy points",
        (pre_fold - post_fold) * 100.0
    );
    pass(
        "criterion 6",
        format!(
            "params -{:.1}%, accuracy {:.4} -> {:.4} after 0.9-energy fold + 2 fine-tune epochs",
            reduction * 100.0,
            pre_fold,
            post_fold
        ),
    );
}

// ---- criterion 7: numerical hygiene ----

#[test]
fn criterion_7_numerical_hygiene() {
    // analytic gradient of the CE+KD task loss against central differences
    let params = BackboneParams::init(
        BackboneConfig {
            num_layers: 2,
            hidden_dim: 8,
            heads: 2,
            ffn_mult: 2,
            num_classes: 4,
            vocab_size: 10,
            max_len: 6,
        },
        77,
    )
    .unwrap();
    let tokens = [1usize, 4, 2, 9];
    let teacher = Tensor {
        shape: vec![4],
        data: vec![0.4, -0.2, 0.9, 0.1],
    };
    let probe = params.embedding.clone();
    let max_err = grad_check(
        |x: &Tensor| {
            let mut p = params.clone();
            p.embedding = x.clone();
            let mut tape = Tape::new();
            let taped = TapedBackbone::new(&mut tape, &p);
            let exits = taped.forward(&mut tape, &tokens, 2);
            let loss = task_loss_on_tape(&mut tape, exits[1], 2, &teacher, 0.5, 2.0);
            let grads = tape.backward(loss);
            let mut grad = Tensor::zeros(&x.shape);
            taped.visit_vars(&mut |name, var| {
                if name == "embedding" {
                    grad = grads.get(var).unwrap().clone();
                }
            });
            Ok((tape.scalar_value(loss), grad))
        },
        &probe,
        1e-5,
    )
    .unwrap();
    assert!(max_err < 1e-4, "task-loss gradient error {max_err:e}");

    // policy-head gradient through the LSTM controller
    let policy = PolicyParams::init(6, 7);
    let policy_err = adepth_core::controller::surrogate_grad_error(&policy).unwrap();
    assert!(policy_err < 1e-4, "policy gradient error {policy_err:e}");

    // softmax, EMA, and simplex invariants at 1e-9
    let logits = Tensor {
        shape: vec![4],
        data: vec![2.0, -1.0, 0.5, 3.25],
    };
    for t in [0.5, 1.0, 2.0, 7.0] {
        let s = softmax_t(&logits, t).unwrap();
        assert!((s.data.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let mut dist = DepthDistribution::uniform(12);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5000 {
        dist.update(rng.gen_range(1..=12)).unwrap();
        dist.check_simplex().unwrap();
    }

    // checkpoint round trip is bit-exact (full-file comparison)
    let ds = generate(&GenConfig {
        n: 120,
        vocab_size: 12,
        num_classes: 4,
        seq_len: 8,
        easy_fraction: 0.6,
        seed: 5,
    })
    .unwrap();
    let mut cfg = TrainConfig::desk_default();
    cfg.backbone = BackboneConfig {
        num_layers: 3,
        hidden_dim: 16,
        heads: 2,
        ffn_mult: 2,
        num_classes: 4,
        vocab_size: 12,
        max_len: 8,
    };
    cfg.extractor = ExtractorConfig {
        vocab_size: 12,
        max_len: 8,
    };
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.rollout_batches = 2;
    cfg.max_batches = 3;
    cfg.eval_subset = 16;
    cfg.predictor.n_trees = 10;
    cfg.seed = 9;
    let out_a = trainer::run(&ds, &cfg).unwrap();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    adepth_core::checkpoint::save(&out_a.checkpoint, dir_a.path()).unwrap();
    let reloaded = adepth_core::checkpoint::load(dir_a.path()).unwrap();
    adepth_core::checkpoint::save(&reloaded, dir_b.path()).unwrap();
    for f in ["manifest.txt", "weights.blob"] {
        assert_eq!(
            std::fs::read(dir_a.path().join(f)).unwrap(),
            std::fs::read(dir_b.path().join(f)).unwrap(),
            "checkpoint file {f} changed across a round trip"
        );
    }

    // fixed-seed training runs emit byte-identical reports
    let out_b = trainer::run(&ds, &cfg).unwrap();
    let ra = dir_a.path().join("report_a.jsonl");
    let rb = dir_a.path().join("report_b.jsonl");
    adepth_core::report::write_records(&out_a.report, &ra).unwrap();
    adepth_core::report::write_records(&out_b.report, &rb).unwrap();
    assert_eq!(
        std::fs::read(&ra).unwrap(),
        std::fs::read(&rb).unwrap(),
        "fixed-seed reports differ"
    );

    pass(
        "criterion 7",
        format!(
            "grad errors {max_err:.2e} (backbone) / {policy_err:.2e} (policy), invariants at 1e-9, checkpoint bit-exact, reports byte-identical"
        ),
    );
}

// ---- criterion 8: bound edge cases and dominance ----

#[test]
fn criterion_8_bound_edges() {
    let p = BoundParams {
        alpha: 0.8,
        epsilon: 1.0,
        p_explore: 0.0,
        flops_lopt: 6.0,
        flops_full: 12.0,
        per_layer_cost: 1.0,
        l_opt: 6,
        max_depth: 12,
    };
    match theory::bound_loose(&p) {
        Err(adepth_core::CoreError::Parameter(_)) => {}
        other => panic!("epsilon = 1 should be a parameter error, got {other:?}"),
    }

    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut counterexamples = 0;
    for _ in 0..10_000 {
        let max_depth = rng.gen_range(2..=24usize);
        // dominance of the simplified bound holds when the optimal depth is
        // at least half the stack; draws stay in that regime
        let l_opt = rng.gen_range(max_depth.div_ceil(2)..=max_depth);
        let alpha: f64 = rng.gen();
        let epsilon: f64 = rng.gen_range(0.0..0.99);
        let p = BoundParams::from_depths(alpha, epsilon, rng.gen(), 1.0, l_opt, max_depth).unwrap();
        let tight = theory::bound_tight(&p).unwrap();
        let loose = theory::bound_loose(&p).unwrap();
        if loose < tight - 1e-9 {
            counterexamples += 1;
        }
    }
    assert_eq!(counterexamples, 0, "found {counterexamples} dominance counterexamples");
    pass(
        "criterion 8",
        "epsilon = 1 rejected as a parameter error; loose >= tight on 10000 draws with zero counterexamples"
            .to_string(),
    );
}
