use adepth_core::data::{generate, GenConfig};
use adepth_core::trainer::{self, TrainConfig};
use std::time::Instant;

fn main() {
    let dataset = generate(&GenConfig {
        n: 5000, vocab_size: 32, num_classes: 4, seq_len: 16,
        easy_fraction: 0.6, seed: 100,
    }).unwrap();
    let (_, val) = dataset.split(0.8);
    for (lr, mb) in [(3e-4, 10), (1e-3, 10), (1e-3, 25), (3e-3, 25)] {
        let mut cfg = TrainConfig::desk_default();
        cfg.epochs = 9;
        cfg.batch_size = 32;
        cfg.max_batches = mb;
        cfg.eval_subset = 200;
        cfg.base_lr = lr;
        cfg.seed = 1;
        let t = Instant::now();
        let (params, curve) = trainer::run_baseline(&dataset, &cfg).unwrap();
        let acc = trainer::full_depth_accuracy(&params, &val).unwrap();
        let c: Vec<String> = curve.iter().map(|v| format!("{v:.3}")).collect();
        println!("lr {lr:.0e} mb {mb}: {:?} acc {acc:.4} curve {:?}", t.elapsed(), c);
    }
}
