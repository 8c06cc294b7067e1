use adepth_core::autodiff::Tape;
use adepth_core::backbone::{self, task_loss_on_tape, BackboneConfig, BackboneParams, TapedBackbone};
use adepth_core::tensor::Tensor;
use std::time::Instant;

fn main() {
    let cfg = BackboneConfig {
        num_layers: 12, hidden_dim: 64, heads: 4, ffn_mult: 4,
        num_classes: 4, vocab_size: 32, max_len: 16,
    };
    let params = BackboneParams::init(cfg.clone(), 1).unwrap();
    let tokens: Vec<Vec<usize>> = (0..32).map(|i| (0..16).map(|j| (i * 7 + j * 3) % 32).collect()).collect();
    // plain forward timing
    let t0 = Instant::now();
    for t in &tokens { backbone::forward_to_depth(t, &params, 12).unwrap(); }
    println!("plain forward x32: {:?}", t0.elapsed());
    // taped batch with deep supervision
    let t0 = Instant::now();
    let mut tape = Tape::new();
    let taped = TapedBackbone::new(&mut tape, &params);
    let mut losses = Vec::new();
    for t in &tokens {
        let teacher = Tensor { shape: vec![4], data: vec![0.1, 0.2, 0.3, 0.4] };
        let exits = taped.forward(&mut tape, t, 12);
        for e in &exits {
            losses.push(task_loss_on_tape(&mut tape, *e, 0, &teacher, 0.5, 2.0));
        }
    }
    let total = tape.sum_scalars(&losses);
    let loss = tape.scale(total, 1.0 / losses.len() as f64);
    println!("taped forward batch32: {:?}", t0.elapsed());
    let t1 = Instant::now();
    let _g = tape.backward(loss);
    println!("backward: {:?}", t1.elapsed());
    println!("total batch: {:?}", t0.elapsed());
}
