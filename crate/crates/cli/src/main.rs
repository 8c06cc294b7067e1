//! `adepth`: data generation, training, evaluation, bound simulation, engine
//! benchmarking, and report rendering for the adaptive-depth transformer.

use adepth_core::backbone::{self, BackboneConfig};
use adepth_core::checkpoint;
use adepth_core::data::{self, Dataset, GenConfig};
use adepth_core::engine::{self, BufferPool, DepthDistribution};
use adepth_core::features::ExtractorConfig;
use adepth_core::report::{self, render_histograms, EpochRecord};
use adepth_core::theory::{self, BoundParams, NonOptimalMode};
use adepth_core::trainer::{self, EvalSummary, TrainConfig};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "adepth", about = "adaptive-depth transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic mixed-difficulty dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        vocab: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0.6)]
        easy: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        seq_len: usize,
    },
    /// Run the two-stage training loop and write a run directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Monte Carlo check of the expected-FLOPs bound.
    SimulateBound {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.0)]
        p_explore: f64,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 1.0)]
        per_layer_cost: f64,
        #[arg(long, default_value_t = 6)]
        l_opt: usize,
        #[arg(long, default_value_t = 12)]
        max_depth: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Plan/eager equivalence, switch overhead, and pool hit rate.
    BenchEngine {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        executions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render per-difficulty depth histograms for a finished run.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

#[derive(Serialize)]
struct BoundRecord {
    alpha: f64,
    epsilon: f64,
    p_explore: f64,
    mean: f64,
    sem: f64,
    bound_tight: f64,
    bound_loose: f64,
    satisfied: bool,
}

fn require_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        bail!("non-finite metric {name}: {v}")
    }
}

fn load_dataset(path: &PathBuf) -> Result<Dataset> {
    data::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn config_for(dataset: &Dataset, config_path: &Option<PathBuf>) -> Result<TrainConfig> {
    match config_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            let cfg: TrainConfig =
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            Ok(cfg)
        }
        None => {
            let mut cfg = TrainConfig::desk_default();
            cfg.backbone = BackboneConfig {
                vocab_size: dataset.header.vocab_size,
                max_len: dataset.header.seq_len,
                num_classes: dataset.header.num_classes,
                ..cfg.backbone
            };
            cfg.extractor = ExtractorConfig {
                vocab_size: dataset.header.vocab_size,
                max_len: dataset.header.seq_len,
            };
            Ok(cfg)
        }
    }
}

fn cmd_train(data_path: PathBuf, config_path: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let dataset = load_dataset(&data_path)?;
    let cfg = config_for(&dataset, &config_path)?;
    let outcome = trainer::run(&dataset, &cfg)?;
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating run dir {}", out.display()))?;
    checkpoint::save(&outcome.checkpoint, &out.join("checkpoint"))?;
    report::write_records(&outcome.report, &out.join("report.jsonl"))?;
    let (_, val) = dataset.split(cfg.train_fraction);
    let ck = &outcome.checkpoint;
    let summary = trainer::evaluate(&ck.backbone, &ck.extractor, &ck.gbt, &ck.policy, &val)?;
    require_finite("val accuracy", summary.accuracy)?;
    let eval_json = serde_json::to_string_pretty(&summary)?;
    std::fs::write(out.join("eval.json"), eval_json)?;
    println!(
        "trained {} epochs (best epoch {}, val loss {:.4}{})",
        outcome.report.len(),
        outcome.best_epoch,
        outcome.best_val_loss,
        if outcome.stopped_early {
            ", stopped early"
        } else {
            ""
        }
    );
    print_summary(&summary);
    Ok(())
}

fn print_summary(s: &EvalSummary) {
    println!("accuracy      {:.4}", s.accuracy);
    println!("mean depth    {:.3}", s.mean_depth);
    println!("mean flops    {:.3e}", s.mean_flops);
    println!("flops ratio   {:.3} of full depth", s.flops_ratio);
}

fn cmd_eval(ck_path: PathBuf, data_path: PathBuf) -> Result<()> {
    let ck = checkpoint::load(&ck_path)?;
    let dataset = load_dataset(&data_path)?;
    let summary = trainer::evaluate(&ck.backbone, &ck.extractor, &ck.gbt, &ck.policy, &dataset.records)?;
    require_finite("accuracy", summary.accuracy)?;
    require_finite("mean depth", summary.mean_depth)?;
    print_summary(&summary);
    let plans = engine::compile_plans(&ck.backbone);
    let peak = plans
        .iter()
        .map(|p| p.total_buffer_bytes)
        .max()
        .unwrap_or(0);
    println!("peak memory   {peak} bytes");
    Ok(())
}

fn cmd_simulate_bound(
    alpha: f64,
    epsilon: f64,
    p_explore: f64,
    trials: usize,
    per_layer_cost: f64,
    l_opt: usize,
    max_depth: usize,
    seed: u64,
) -> Result<()> {
    let p = BoundParams::from_depths(alpha, epsilon, p_explore, per_layer_cost, l_opt, max_depth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sim = theory::simulate_expected_flops(&p, trials, NonOptimalMode::WorstCase, &mut rng)?;
    let tight = theory::bound_tight(&p)?;
    let loose = theory::bound_loose(&p)?;
    let rec = BoundRecord {
        alpha,
        epsilon,
        p_explore,
        mean: require_finite("mean", sim.mean)?,
        sem: sim.sem,
        bound_tight: tight,
        bound_loose: loose,
        satisfied: sim.mean <= loose,
    };
    println!("{}", serde_json::to_string(&rec)?);
    Ok(())
}

fn cmd_bench_engine(ck_path: PathBuf, executions: usize, seed: u64) -> Result<()> {
    let ck = checkpoint::load(&ck_path)?;
    let cfg = ck.backbone.config.clone();
    let plans = engine::compile_plans(&ck.backbone);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<usize>> = (0..executions.max(1))
        .map(|_| (0..cfg.max_len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect())
        .collect();

    // plan/eager equivalence across all depths on a sample of inputs
    let mut pool = BufferPool::desk_default(cfg.num_layers);
    let mut max_diff = 0.0f64;
    for tokens in inputs.iter().take(20) {
        for plan in &plans {
            let out = engine::execute(plan, tokens, &mut pool)?;
            let eager = backbone::forward_to_depth(tokens, &ck.backbone, plan.depth)?;
            let reference = eager.logits_per_exit.last().unwrap();
            for (a, b) in out.logits.iter().zip(reference) {
                max_diff = max_diff.max((a - b).abs());
            }
        }
    }
    let equivalent = max_diff <= 1e-6;
    println!("plan/eager equivalence: max |diff| = {max_diff:.3e} ({})",
        if equivalent { "ok" } else { "FAILED" });

    // switch overhead: alternate depths every call vs. one fixed depth
    let fixed = &plans[plans.len() - 1];
    let start = Instant::now();
    for tokens in &inputs {
        engine::execute(fixed, tokens, &mut pool)?;
    }
    let fixed_time = start.elapsed().as_secs_f64();
    let start = Instant::now();
    for (i, tokens) in inputs.iter().enumerate() {
        let plan = &plans[i % plans.len()];
        engine::execute(plan, tokens, &mut pool)?;
    }
    let switch_time = start.elapsed().as_secs_f64();
    // alternating plans also average shallower depths, so normalize by flops
    let mean_flops: f64 =
        plans.iter().map(|p| p.total_flops).sum::<f64>() / plans.len() as f64;
    let overhead = (switch_time / fixed_time) * (fixed.total_flops / mean_flops);
    println!("switch overhead ratio: {overhead:.3}");

    // pool hit rate with a rebalanced pool at 1.5x the expected working set
    let dist = DepthDistribution::uniform(cfg.num_layers);
    let ws = engine::expected_working_set(&dist, &plans);
    let mut sized = BufferPool::new((ws * 1.5) as usize, cfg.num_layers);
    engine::rebalance_pool(&mut sized, &dist, &plans)?;
    for (i, tokens) in inputs.iter().enumerate() {
        let plan = &plans[i % plans.len()];
        engine::execute(plan, tokens, &mut sized)?;
    }
    println!("pool hit rate: {:.4}", sized.hit_rate());
    if !equivalent {
        bail!("plan and eager outputs diverged beyond 1e-6");
    }
    Ok(())
}

fn cmd_report(run_dir: PathBuf) -> Result<()> {
    let eval_path = run_dir.join("eval.json");
    let text = std::fs::read_to_string(&eval_path)
        .with_context(|| format!("reading {}", eval_path.display()))?;
    let summary: serde_json::Value = serde_json::from_str(&text)?;
    let hists: Vec<adepth_core::report::DepthHistogram> =
        serde_json::from_value(summary["histograms"].clone())?;
    print!("{}", render_histograms(&hists));
    for h in &hists {
        println!("{}", serde_json::to_string(h)?);
    }
    let report_path = run_dir.join("report.jsonl");
    if report_path.exists() {
        let records: Vec<EpochRecord> = report::read_records(&report_path)?;
        if let Some(last) = records.last() {
            println!(
                "final epoch {}: val accuracy {:.4}, mean depth {:.3}, flops ratio {:.3} of full depth",
                last.epoch, last.val_accuracy, last.mean_depth, last.flops_ratio
            );
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData {
            out,
            n,
            vocab,
            classes,
            easy,
            seed,
            seq_len,
        } => {
            let ds = data::generate(&GenConfig {
                n,
                vocab_size: vocab,
                num_classes: classes,
                seq_len,
                easy_fraction: easy,
                seed,
            })?;
            data::save(&ds, &out)?;
            println!(
                "wrote {} records to {} (probe accuracy easy {:.3}, medium {:.3}, hard {:.3})",
                ds.records.len(),
                out.display(),
                ds.header.probe_easy_accuracy,
                ds.header.probe_medium_accuracy,
                ds.header.probe_hard_accuracy
            );
            Ok(())
        }
        Command::Train { data, config, out } => cmd_train(data, config, out),
        Command::Eval { checkpoint, data } => cmd_eval(checkpoint, data),
        Command::SimulateBound {
            alpha,
            epsilon,
            p_explore,
            trials,
            per_layer_cost,
            l_opt,
            max_depth,
            seed,
        } => cmd_simulate_bound(
            alpha,
            epsilon,
            p_explore,
            trials,
            per_layer_cost,
            l_opt,
            max_depth,
            seed,
        ),
        Command::BenchEngine {
            checkpoint,
            executions,
            seed,
        } => cmd_bench_engine(checkpoint, executions, seed),
        Command::Report { run_dir } => cmd_report(run_dir),
    }
}
