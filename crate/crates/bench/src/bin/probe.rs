use adepth_core::data::{generate, GenConfig};
use adepth_core::trainer::{self, TrainConfig};
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let dataset = generate(&GenConfig {
        n: 5000, vocab_size: 32, num_classes: 4, seq_len: 16,
        easy_fraction: 0.6, seed: 100,
    }).unwrap();
    println!("dataset: {:?} probes easy {:.3} med {:.3} hard {:.3}",
        t0.elapsed(), dataset.header.probe_easy_accuracy,
        dataset.header.probe_medium_accuracy, dataset.header.probe_hard_accuracy);
    let mut cfg = TrainConfig::desk_default();
    cfg.epochs = 10;
    cfg.batch_size = 32;
    cfg.max_batches = 14;
    cfg.rollout_batches = 30;
    cfg.eval_subset = 150;
    cfg.base_lr = 2e-3;
    cfg.ppo.lr = 3e-3;
    cfg.epsilon = 0.25;
    cfg.predictor.n_trees = 70;
    cfg.predictor.max_depth = 5;
    cfg.predictor.distill_weight = 0.05;
    cfg.predictor.huber_delta = 0.5;
    cfg.predictor_subsample = 1200;
    cfg.oracle_slack = 0.5;
    cfg.oracle_refresh_fraction = 0.15;
    cfg.reward.compute_coef = 0.3;
    cfg.reward.smoothness_coef = 0.5;
    cfg.seed = 1;
    let t1 = Instant::now();
    let outcome = trainer::run(&dataset, &cfg).unwrap();
    println!("adaptive run: {:?}", t1.elapsed());
    for r in &outcome.report {
        println!("epoch {} [{:8}] lr {:.1e} val_loss {:.4} acc {:.3} alpha {:.3} depth {:.2} flops {:.3} reward {:.3} pred_mae {:.3}",
            r.epoch, r.phase, r.lr, r.val_loss, r.val_accuracy, r.alpha, r.mean_depth, r.flops_ratio, r.mean_reward, r.train_loss);
    }
    let (_, val) = dataset.split(cfg.train_fraction);
    let ck = &outcome.checkpoint;
    let summary = trainer::evaluate(&ck.backbone, &ck.extractor, &ck.gbt, &ck.policy, &val).unwrap();
    println!("eval: acc {:.4} mean_depth {:.2} flops_ratio {:.3}", summary.accuracy, summary.mean_depth, summary.flops_ratio);
    for h in &summary.histograms {
        println!("{:?}: {:?} mode {}", h.bucket, h.counts, h.modal_depth());
    }
    // bucket-level diagnostics on the adaptive checkpoint
    {
        use adepth_core::data::Difficulty;
        use adepth_core::features;
        use adepth_core::predictor::{oracle_l_opt, predict_depth};
        let full = cfg.backbone.num_layers;
        for bucket in [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard] {
            let rs: Vec<_> = val.iter().filter(|r| r.difficulty == bucket).take(80).collect();
            let mut oracle_sum = 0.0;
            let mut pred_sum = 0.0;
            let mut exit_acc = vec![0.0; full];
            for r in &rs {
                let o = oracle_l_opt(&r.tokens, r.label, &ck.backbone, cfg.oracle_slack).unwrap();
                oracle_sum += o.0 as f64;
                let f = features::extract(&r.tokens, &ck.extractor).unwrap();
                pred_sum += predict_depth(&ck.gbt, &f.pooled1, full).unwrap().l_pred as f64;
                let out =
                    adepth_core::backbone::forward_to_depth(&r.tokens, &ck.backbone, full).unwrap();
                for (d, logits) in out.logits_per_exit.iter().enumerate() {
                    let best = (0..logits.len()).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
                    if best == r.label {
                        exit_acc[d] += 1.0;
                    }
                }
            }
            let n = rs.len() as f64;
            let accs: Vec<String> = exit_acc.iter().map(|a| format!("{:.2}", a / n)).collect();
            println!(
                "{bucket:?}: oracle {:.2} l_pred {:.2} exit_acc {:?}",
                oracle_sum / n,
                pred_sum / n,
                accs
            );
        }
    }
    let t2 = Instant::now();
    let (baseline, curve) = trainer::run_baseline(&dataset, &cfg).unwrap();
    let bacc = trainer::full_depth_accuracy(&baseline, &val).unwrap();
    println!("baseline run: {:?} acc {:.4} curve {:?}", t2.elapsed(), bacc, curve);
    println!("total {:?}", t0.elapsed());
}
