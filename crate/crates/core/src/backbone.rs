//! L-layer transformer encoder with a classifier exit head after every layer.
//!
//! Pre-LN blocks: x += attn(ln1(x)); x += ffn(ln2(x)). Exit head l mean-pools
//! the layer-l output over positions and projects to class logits, so the
//! logits at depth l never depend on layers beyond l.
//!
//! Two forward routes exist on purpose: a plain eval path (used for oracle
//! labelling, rollouts and as the reference the execution engine is checked
//! against) and a tape path used for training. A test pins them bitwise equal.

use crate::autodiff::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::svd::{truncated_svd, LowRankFactors};
use crate::tensor::{self, matmul, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub num_classes: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl BackboneConfig {
    pub fn desk_default() -> Self {
        BackboneConfig {
            num_layers: 12,
            hidden_dim: 64,
            heads: 4,
            ffn_mult: 4,
            num_classes: 4,
            vocab_size: 32,
            max_len: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim % self.heads != 0 {
            return Err(CoreError::Configuration(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.num_layers == 0 || self.num_layers > 64 {
            return Err(CoreError::Configuration(format!(
                "num_layers must lie in [1, 64], got {}",
                self.num_layers
            )));
        }
        Ok(())
    }
}

/// A weight matrix, either dense or replaced by its rank-truncated factors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Weight {
    Dense(Tensor),
    Folded(LowRankFactors),
}

impl Weight {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            Weight::Dense(w) => matmul(x, w).unwrap(),
            Weight::Folded(f) => matmul(&matmul(x, &f.left).unwrap(), &f.right).unwrap(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Weight::Dense(w) => w.len(),
            Weight::Folded(f) => f.param_count(),
        }
    }

    fn fold(&self, energy_ratio: f64) -> Result<Weight> {
        match self {
            Weight::Dense(w) => Ok(Weight::Folded(truncated_svd(w, energy_ratio)?)),
            Weight::Folded(_) => Err(CoreError::Parameter("weight already folded".into())),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerParams {
    pub wq: Weight,
    pub wk: Weight,
    pub wv: Weight,
    pub wo: Weight,
    pub bq: Tensor,
    pub bk: Tensor,
    pub bv: Tensor,
    pub bo: Tensor,
    pub w1: Weight,
    pub b1: Tensor,
    pub w2: Weight,
    pub b2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_shift: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_shift: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub embedding: Tensor,
    pub pos_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub exit_heads: Vec<HeadParams>,
}

fn gauss(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
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
}

/// Spectrally biased init: the product of two rank-d/2 Gaussian factors.
/// Keeps trained weights foldable at the 0.9 energy ratio with a real
/// parameter saving (a flat-spectrum init would make folding non-compressive).
fn low_rank_gauss(rng: &mut ChaCha8Rng, m: usize, n: usize, entry_std: f64) -> Tensor {
    let r = m.min(n) / 2;
    let factor_std = (entry_std * entry_std / r as f64).sqrt().sqrt();
    let a = gauss(rng, &[m, r], factor_std);
    let b = gauss(rng, &[r, n], factor_std);
    matmul(&a, &b).unwrap()
}

impl BackboneParams {
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let f = d * config.ffn_mult;
        let scale = 0.02;
        let embedding = gauss(&mut rng, &[config.vocab_size, d], scale);
        let pos_embedding = gauss(&mut rng, &[config.max_len, d], scale);
        let mut layers = Vec::with_capacity(config.num_layers);
        let mut exit_heads = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(LayerParams {
                wq: Weight::Dense(low_rank_gauss(&mut rng, d, d, scale)),
                wk: Weight::Dense(low_rank_gauss(&mut rng, d, d, scale)),
                wv: Weight::Dense(low_rank_gauss(&mut rng, d, d, scale)),
                wo: Weight::Dense(low_rank_gauss(&mut rng, d, d, scale)),
                bq: Tensor::zeros(&[d]),
                bk: Tensor::zeros(&[d]),
                bv: Tensor::zeros(&[d]),
                bo: Tensor::zeros(&[d]),
                w1: Weight::Dense(low_rank_gauss(&mut rng, d, f, scale)),
                b1: Tensor::zeros(&[f]),
                w2: Weight::Dense(low_rank_gauss(&mut rng, f, d, scale)),
                b2: Tensor::zeros(&[d]),
                ln1_gain: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
                ln1_shift: Tensor::zeros(&[d]),
                ln2_gain: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
                ln2_shift: Tensor::zeros(&[d]),
            });
            exit_heads.push(HeadParams {
                w: gauss(&mut rng, &[d, config.num_classes], scale),
                b: Tensor::zeros(&[config.num_classes]),
            });
        }
        Ok(BackboneParams {
            config,
            embedding,
            pos_embedding,
            layers,
            exit_heads,
        })
    }

    pub fn zeros(config: BackboneConfig) -> Result<Self> {
        let mut p = Self::init(config, 0)?;
        p.visit_tensors_mut(&mut |_, t| {
            for v in &mut t.data {
                *v = 0.0;
            }
        });
        Ok(p)
    }

    pub fn is_folded(&self) -> bool {
        matches!(self.layers.first().map(|l| &l.wq), Some(Weight::Folded(_)))
    }

    /// Visit every trainable tensor with a stable name, in a fixed order.
    pub fn visit_tensors<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("embedding".into(), &self.embedding);
        f("pos_embedding".into(), &self.pos_embedding);
        for (i, l) in self.layers.iter().enumerate() {
            let mut w = |name: &str, wt: &'a Weight| match wt {
                Weight::Dense(t) => f(format!("layer{i}.{name}"), t),
                Weight::Folded(lr) => {
                    f(format!("layer{i}.{name}.left"), &lr.left);
                    f(format!("layer{i}.{name}.right"), &lr.right);
                }
            };
            w("wq", &l.wq);
            w("wk", &l.wk);
            w("wv", &l.wv);
            w("wo", &l.wo);
            w("w1", &l.w1);
            w("w2", &l.w2);
            f(format!("layer{i}.bq"), &l.bq);
            f(format!("layer{i}.bk"), &l.bk);
            f(format!("layer{i}.bv"), &l.bv);
            f(format!("layer{i}.bo"), &l.bo);
            f(format!("layer{i}.b1"), &l.b1);
            f(format!("layer{i}.b2"), &l.b2);
            f(format!("layer{i}.ln1_gain"), &l.ln1_gain);
            f(format!("layer{i}.ln1_shift"), &l.ln1_shift);
            f(format!("layer{i}.ln2_gain"), &l.ln2_gain);
            f(format!("layer{i}.ln2_shift"), &l.ln2_shift);
        }
        for (i, h) in self.exit_heads.iter().enumerate() {
            f(format!("head{i}.w"), &h.w);
            f(format!("head{i}.b"), &h.b);
        }
    }

    pub fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("embedding".into(), &mut self.embedding);
        f("pos_embedding".into(), &mut self.pos_embedding);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let mut w = |name: &str, wt: &mut Weight| match wt {
                Weight::Dense(t) => f(format!("layer{i}.{name}"), t),
                Weight::Folded(lr) => {
                    f(format!("layer{i}.{name}.left"), &mut lr.left);
                    f(format!("layer{i}.{name}.right"), &mut lr.right);
                }
            };
            w("wq", &mut l.wq);
            w("wk", &mut l.wk);
            w("wv", &mut l.wv);
            w("wo", &mut l.wo);
            w("w1", &mut l.w1);
            w("w2", &mut l.w2);
            f(format!("layer{i}.bq"), &mut l.bq);
            f(format!("layer{i}.bk"), &mut l.bk);
            f(format!("layer{i}.bv"), &mut l.bv);
            f(format!("layer{i}.bo"), &mut l.bo);
            f(format!("layer{i}.b1"), &mut l.b1);
            f(format!("layer{i}.b2"), &mut l.b2);
            f(format!("layer{i}.ln1_gain"), &mut l.ln1_gain);
            f(format!("layer{i}.ln1_shift"), &mut l.ln1_shift);
            f(format!("layer{i}.ln2_gain"), &mut l.ln2_gain);
            f(format!("layer{i}.ln2_shift"), &mut l.ln2_shift);
        }
        for (i, h) in self.exit_heads.iter_mut().enumerate() {
            f(format!("head{i}.w"), &mut h.w);
            f(format!("head{i}.b"), &mut h.b);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.embedding.len() + self.pos_embedding.len();
        for l in &self.layers {
            n += l.wq.param_count()
                + l.wk.param_count()
                + l.wv.param_count()
                + l.wo.param_count()
                + l.w1.param_count()
                + l.w2.param_count();
            n += l.bq.len() + l.bk.len() + l.bv.len() + l.bo.len() + l.b1.len() + l.b2.len();
            n += l.ln1_gain.len() + l.ln1_shift.len() + l.ln2_gain.len() + l.ln2_shift.len();
        }
        for h in &self.exit_heads {
            n += h.w.len() + h.b.len();
        }
        n
    }

    /// Order-insensitive content hash, used by the trainer's freeze assertions.
    pub fn content_hash(&self) -> u64 {
        let mut h = 1469598103934665603u64; // FNV offset
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

/// Replace every attention/FFN weight with its rank-truncated factors.
pub fn fold_layers(params: &BackboneParams, energy_ratio: f64) -> Result<BackboneParams> {
    if params.is_folded() {
        return Err(CoreError::Parameter("params already folded".into()));
    }
    let mut folded = params.clone();
    for l in &mut folded.layers {
        l.wq = l.wq.fold(energy_ratio)?;
        l.wk = l.wk.fold(energy_ratio)?;
        l.wv = l.wv.fold(energy_ratio)?;
        l.wo = l.wo.fold(energy_ratio)?;
        l.w1 = l.w1.fold(energy_ratio)?;
        l.w2 = l.w2.fold(energy_ratio)?;
    }
    Ok(folded)
}

// ---- plain eval forward ---------------------------------------------------

fn layer_norm_plain(x: &Tensor, gain: &Tensor, shift: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..c {
            out.data[i * c + j] = (row[j] - mean) * inv * gain.data[j] + shift.data[j];
        }
    }
    out
}

fn add_row_plain(x: &Tensor, bias: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = x.clone();
    for i in 0..r {
        for j in 0..c {
            out.data[i * c + j] += bias.data[j];
        }
    }
    out
}

fn attention_plain(x: &Tensor, layer: &LayerParams, heads: usize) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let dh = d / heads;
    let q = add_row_plain(&layer.wq.apply(x), &layer.bq);
    let k = add_row_plain(&layer.wk.apply(x), &layer.bk);
    let v = add_row_plain(&layer.wv.apply(x), &layer.bv);
    let mut ctx = Tensor::zeros(&[n, d]);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut scores = vec![0.0; n * n];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for c in 0..dh {
                    acc += q.at(i, off + c) * k.at(j, off + c);
                }
                scores[i * n + j] = acc * scale;
            }
        }
        tensor::softmax_rows_inplace(&mut scores, n, n);
        for i in 0..n {
            for c in 0..dh {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += scores[i * n + j] * v.at(j, off + c);
                }
                *ctx.at_mut(i, off + c) = acc;
            }
        }
    }
    add_row_plain(&layer.wo.apply(&ctx), &layer.bo)
}

fn exit_logits_plain(x: &Tensor, head: &HeadParams) -> Vec<f64> {
    let (n, d) = (x.rows(), x.cols());
    let classes = head.b.len();
    let mut pooled = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            pooled[j] += x.at(i, j);
        }
    }
    for v in &mut pooled {
        *v /= n as f64;
    }
    let mut logits = head.b.data.clone();
    for c in 0..classes {
        for j in 0..d {
            logits[c] += pooled[j] * head.w.at(j, c);
        }
    }
    logits
}

pub struct ForwardOutput {
    /// Class logits of exit heads 1..=l, in order.
    pub logits_per_exit: Vec<Vec<f64>>,
    /// Final hidden state after layer l, seq_len × d.
    pub hidden: Tensor,
}

/// Run exactly the first `depth` encoder layers.
pub fn forward_to_depth(
    tokens: &[usize],
    params: &BackboneParams,
    depth: usize,
) -> Result<ForwardOutput> {
    let cfg = &params.config;
    if depth == 0 || depth > cfg.num_layers {
        return Err(CoreError::Parameter(format!(
            "depth {depth} out of range [1, {}]",
            cfg.num_layers
        )));
    }
    if tokens.is_empty() {
        return Err(CoreError::Input("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_len {
        return Err(CoreError::Input(format!(
            "sequence length {} exceeds max {}",
            tokens.len(),
            cfg.max_len
        )));
    }
    let d = cfg.hidden_dim;
    let mut x = Tensor::zeros(&[tokens.len(), d]);
    for (i, &t) in tokens.iter().enumerate() {
        if t >= cfg.vocab_size {
            return Err(CoreError::Input(format!("token {t} out of vocab")));
        }
        for j in 0..d {
            x.data[i * d + j] = params.embedding.at(t, j) + params.pos_embedding.at(i, j);
        }
    }
    let mut logits_per_exit = Vec::with_capacity(depth);
    for l in 0..depth {
        let layer = &params.layers[l];
        let a = attention_plain(
            &layer_norm_plain(&x, &layer.ln1_gain, &layer.ln1_shift),
            layer,
            cfg.heads,
        );
        x = x.add(&a)?;
        let h = layer_norm_plain(&x, &layer.ln2_gain, &layer.ln2_shift);
        let mut ff = add_row_plain(&layer.w1.apply(&h), &layer.b1);
        for v in &mut ff.data {
            *v = v.max(0.0);
        }
        let ff = add_row_plain(&layer.w2.apply(&ff), &layer.b2);
        x = x.add(&ff)?;
        logits_per_exit.push(exit_logits_plain(&x, &params.exit_heads[l]));
    }
    Ok(ForwardOutput {
        logits_per_exit,
        hidden: x,
    })
}

/// Hidden states after each of the first `depth` layers, one full forward.
pub fn forward_trace(tokens: &[usize], params: &BackboneParams, depth: usize) -> Result<Vec<Tensor>> {
    let cfg = &params.config;
    if depth == 0 || depth > cfg.num_layers {
        return Err(CoreError::Parameter(format!(
            "depth {depth} out of range [1, {}]",
            cfg.num_layers
        )));
    }
    if tokens.is_empty() || tokens.len() > cfg.max_len {
        return Err(CoreError::Input("bad sequence length".into()));
    }
    let d = cfg.hidden_dim;
    let mut x = Tensor::zeros(&[tokens.len(), d]);
    for (i, &t) in tokens.iter().enumerate() {
        if t >= cfg.vocab_size {
            return Err(CoreError::Input(format!("token {t} out of vocab")));
        }
        for j in 0..d {
            x.data[i * d + j] = params.embedding.at(t, j) + params.pos_embedding.at(i, j);
        }
    }
    let mut trace = Vec::with_capacity(depth + 1);
    trace.push(x.clone());
    for l in 0..depth {
        let layer = &params.layers[l];
        let a = attention_plain(
            &layer_norm_plain(&x, &layer.ln1_gain, &layer.ln1_shift),
            layer,
            cfg.heads,
        );
        x = x.add(&a)?;
        let h = layer_norm_plain(&x, &layer.ln2_gain, &layer.ln2_shift);
        let mut ff = add_row_plain(&layer.w1.apply(&h), &layer.b1);
        for v in &mut ff.data {
            *v = v.max(0.0);
        }
        let ff = add_row_plain(&layer.w2.apply(&ff), &layer.b2);
        x = x.add(&ff)?;
        trace.push(x.clone());
    }
    Ok(trace)
}

// ---- tape (training) forward ---------------------------------------------

enum TapedWeight {
    Dense(Var),
    Folded { left: Var, right: Var },
}

impl TapedWeight {
    fn new(tape: &mut Tape, w: &Weight) -> Self {
        match w {
            Weight::Dense(t) => TapedWeight::Dense(tape.leaf(t.clone())),
            Weight::Folded(f) => TapedWeight::Folded {
                left: tape.leaf(f.left.clone()),
                right: tape.leaf(f.right.clone()),
            },
        }
    }

    fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        match self {
            TapedWeight::Dense(w) => tape.matmul(x, *w),
            TapedWeight::Folded { left, right } => {
                let t = tape.matmul(x, *left);
                tape.matmul(t, *right)
            }
        }
    }
}

struct TapedLayer {
    wq: TapedWeight,
    wk: TapedWeight,
    wv: TapedWeight,
    wo: TapedWeight,
    bq: Var,
    bk: Var,
    bv: Var,
    bo: Var,
    w1: TapedWeight,
    b1: Var,
    w2: TapedWeight,
    b2: Var,
    ln1_gain: Var,
    ln1_shift: Var,
    ln2_gain: Var,
    ln2_shift: Var,
}

/// Backbone parameters mirrored as tape leaves for one training step.
pub struct TapedBackbone {
    config: BackboneConfig,
    embedding: Var,
    pos_embedding: Var,
    layers: Vec<TapedLayer>,
    heads: Vec<(Var, Var)>,
}

impl TapedBackbone {
    pub fn new(tape: &mut Tape, params: &BackboneParams) -> Self {
        let embedding = tape.leaf(params.embedding.clone());
        let pos_embedding = tape.leaf(params.pos_embedding.clone());
        let layers = params
            .layers
            .iter()
            .map(|l| TapedLayer {
                wq: TapedWeight::new(tape, &l.wq),
                wk: TapedWeight::new(tape, &l.wk),
                wv: TapedWeight::new(tape, &l.wv),
                wo: TapedWeight::new(tape, &l.wo),
                bq: tape.leaf(l.bq.clone()),
                bk: tape.leaf(l.bk.clone()),
                bv: tape.leaf(l.bv.clone()),
                bo: tape.leaf(l.bo.clone()),
                w1: TapedWeight::new(tape, &l.w1),
                b1: tape.leaf(l.b1.clone()),
                w2: TapedWeight::new(tape, &l.w2),
                b2: tape.leaf(l.b2.clone()),
                ln1_gain: tape.leaf(l.ln1_gain.clone()),
                ln1_shift: tape.leaf(l.ln1_shift.clone()),
                ln2_gain: tape.leaf(l.ln2_gain.clone()),
                ln2_shift: tape.leaf(l.ln2_shift.clone()),
            })
            .collect();
        let heads = params
            .exit_heads
            .iter()
            .map(|h| (tape.leaf(h.w.clone()), tape.leaf(h.b.clone())))
            .collect();
        TapedBackbone {
            config: params.config.clone(),
            embedding,
            pos_embedding,
            layers,
            heads,
        }
    }

    /// Exit logit vars for heads 1..=depth, each 1×classes.
    pub fn forward(&self, tape: &mut Tape, tokens: &[usize], depth: usize) -> Vec<Var> {
        let cfg = &self.config;
        let d = cfg.hidden_dim;
        let dh = d / cfg.heads;
        let n = tokens.len();
        let emb = tape.gather_rows(self.embedding, tokens);
        let pos_ids: Vec<usize> = (0..n).collect();
        let pos = tape.gather_rows(self.pos_embedding, &pos_ids);
        let mut x = tape.add(emb, pos);
        let mut exits = Vec::with_capacity(depth);
        for l in 0..depth {
            let layer = &self.layers[l];
            let normed = tape.layer_norm(x, layer.ln1_gain, layer.ln1_shift, LN_EPS);
            let q0 = layer.wq.apply(tape, normed);
            let q = tape.add_row(q0, layer.bq);
            let k0 = layer.wk.apply(tape, normed);
            let k = tape.add_row(k0, layer.bk);
            let v0 = layer.wv.apply(tape, normed);
            let v = tape.add_row(v0, layer.bv);
            let mut head_ctx = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let qh = tape.slice_cols(q, h * dh, dh);
                let kh = tape.slice_cols(k, h * dh, dh);
                let vh = tape.slice_cols(v, h * dh, dh);
                let scores = tape.matmul_nt(qh, kh);
                let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                let probs = tape.softmax_rows(scaled);
                head_ctx.push(tape.matmul(probs, vh));
            }
            let ctx = tape.concat_cols(&head_ctx);
            let proj0 = layer.wo.apply(tape, ctx);
            let proj = tape.add_row(proj0, layer.bo);
            x = tape.add(x, proj);
            let normed2 = tape.layer_norm(x, layer.ln2_gain, layer.ln2_shift, LN_EPS);
            let ff0 = layer.w1.apply(tape, normed2);
            let ff1 = tape.add_row(ff0, layer.b1);
            let ff2 = tape.relu(ff1);
            let ff3 = layer.w2.apply(tape, ff2);
            let ff = tape.add_row(ff3, layer.b2);
            x = tape.add(x, ff);
            let pooled = tape.mean_rows(x);
            let (hw, hb) = self.heads[l];
            let logits0 = tape.matmul(pooled, hw);
            exits.push(tape.add_row(logits0, hb));
        }
        exits
    }

    /// Pair every parameter leaf with the name used by the optimizer.
    pub fn visit_vars(&self, f: &mut dyn FnMut(String, Var)) {
        f("embedding".into(), self.embedding);
        f("pos_embedding".into(), self.pos_embedding);
        for (i, l) in self.layers.iter().enumerate() {
            let mut w = |name: &str, tw: &TapedWeight| match tw {
                TapedWeight::Dense(v) => f(format!("layer{i}.{name}"), *v),
                TapedWeight::Folded { left, right } => {
                    f(format!("layer{i}.{name}.left"), *left);
                    f(format!("layer{i}.{name}.right"), *right);
                }
            };
            w("wq", &l.wq);
            w("wk", &l.wk);
            w("wv", &l.wv);
            w("wo", &l.wo);
            w("w1", &l.w1);
            w("w2", &l.w2);
            f(format!("layer{i}.bq"), l.bq);
            f(format!("layer{i}.bk"), l.bk);
            f(format!("layer{i}.bv"), l.bv);
            f(format!("layer{i}.bo"), l.bo);
            f(format!("layer{i}.b1"), l.b1);
            f(format!("layer{i}.b2"), l.b2);
            f(format!("layer{i}.ln1_gain"), l.ln1_gain);
            f(format!("layer{i}.ln1_shift"), l.ln1_shift);
            f(format!("layer{i}.ln2_gain"), l.ln2_gain);
            f(format!("layer{i}.ln2_shift"), l.ln2_shift);
        }
        for (i, (w, b)) in self.heads.iter().enumerate() {
            f(format!("head{i}.w"), *w);
            f(format!("head{i}.b"), *b);
        }
    }
}

// ---- losses ---------------------------------------------------------------

/// (1−kd_weight)·CE(logits, label) + kd_weight·T²·KL(teacher ‖ student),
/// on the tape.
pub fn task_loss_on_tape(
    tape: &mut Tape,
    logits: Var,
    label: usize,
    teacher_logits: &Tensor,
    kd_weight: f64,
    temperature: f64,
) -> Var {
    let ce = tape.cross_entropy(logits, label);
    if kd_weight == 0.0 {
        return ce;
    }
    let kd = tape.kd_loss(logits, teacher_logits, temperature);
    let ce_w = tape.scale(ce, 1.0 - kd_weight);
    let kd_w = tape.scale(kd, kd_weight);
    tape.add(ce_w, kd_w)
}

/// Plain task loss returning the value and the gradient w.r.t. the logits.
pub fn task_loss(
    logits: &[f64],
    label: usize,
    teacher_logits: &[f64],
    kd_weight: f64,
    temperature: f64,
) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(CoreError::Input(format!(
            "label {label} out of class range {}",
            logits.len()
        )));
    }
    if temperature <= 0.0 {
        return Err(CoreError::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if !(0.0..=1.0).contains(&kd_weight) {
        return Err(CoreError::Parameter(format!(
            "kd_weight must lie in [0, 1], got {kd_weight}"
        )));
    }
    let mut tape = Tape::new();
    let lv = tape.leaf(Tensor::new(vec![logits.len()], logits.to_vec())?);
    let teacher = Tensor::new(vec![teacher_logits.len()], teacher_logits.to_vec())?;
    let loss = task_loss_on_tape(&mut tape, lv, label, &teacher, kd_weight, temperature);
    let grads = tape.backward(loss);
    Ok((
        tape.scalar_value(loss),
        grads.get(lv).unwrap().data.clone(),
    ))
}

// ---- FLOPs accounting -----------------------------------------------------

/// Per-layer multiply-add based FLOP count at the configured max length.
pub fn per_layer_flops(config: &BackboneConfig) -> f64 {
    let n = config.max_len as f64;
    let d = config.hidden_dim as f64;
    // attention: 4 projections (8nd²) + scores and context (4n²d)
    // ffn at multiplier 4: two matmuls (16nd²)
    8.0 * n * d * d + 4.0 * n * n * d + (4 * config.ffn_mult) as f64 * n * d * d
}

/// One-time exit-head cost: mean-pool plus the class projection.
pub fn exit_head_flops(config: &BackboneConfig) -> f64 {
    let n = config.max_len as f64;
    let d = config.hidden_dim as f64;
    n * d + 2.0 * d * config.num_classes as f64
}

/// FLOPs(l) = C·l plus the exit-head term, strictly increasing in l.
pub fn flops_of_depth(config: &BackboneConfig, depth: usize) -> f64 {
    assert!(depth >= 1 && depth <= config.num_layers, "depth out of range");
    per_layer_flops(config) * depth as f64 + exit_head_flops(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            num_layers: 3,
            hidden_dim: 8,
            heads: 2,
            ffn_mult: 4,
            num_classes: 4,
            vocab_size: 16,
            max_len: 8,
        }
    }

    #[test]
    fn zero_params_give_zero_logits_and_uniform_softmax() {
        let p = BackboneParams::zeros(tiny_config()).unwrap();
        let out = forward_to_depth(&[1, 2, 3], &p, 3).unwrap();
        for exit in &out.logits_per_exit {
            assert!(exit.iter().all(|&v| v == 0.0));
            let sm = tensor::softmax_t(&Tensor::new(vec![4], exit.clone()).unwrap(), 1.0).unwrap();
            assert!(sm.data.iter().all(|&v| (v - 0.25).abs() < 1e-12));
        }
    }

    #[test]
    fn depth_out_of_range_is_parameter_error() {
        let p = BackboneParams::init(tiny_config(), 0).unwrap();
        assert!(matches!(
            forward_to_depth(&[1], &p, 0),
            Err(CoreError::Parameter(_))
        ));
        assert!(matches!(
            forward_to_depth(&[1], &p, 4),
            Err(CoreError::Parameter(_))
        ));
    }

    #[test]
    fn early_exits_are_prefix_stable() {
        let p = BackboneParams::init(tiny_config(), 3).unwrap();
        let shallow = forward_to_depth(&[4, 2, 7, 1], &p, 2).unwrap();
        let deep = forward_to_depth(&[4, 2, 7, 1], &p, 3).unwrap();
        for l in 0..2 {
            assert_eq!(shallow.logits_per_exit[l], deep.logits_per_exit[l]);
        }
    }

    #[test]
    fn tape_forward_matches_eval_forward_bitwise() {
        let p = BackboneParams::init(tiny_config(), 7).unwrap();
        let tokens = [4usize, 2, 7, 1, 9];
        let eval = forward_to_depth(&tokens, &p, 3).unwrap();
        let mut tape = Tape::new();
        let tb = TapedBackbone::new(&mut tape, &p);
        let exits = tb.forward(&mut tape, &tokens, 3);
        for (l, &e) in exits.iter().enumerate() {
            assert_eq!(tape.value(e).data, eval.logits_per_exit[l], "exit {l}");
        }
    }

    /// Independent straight-line scalar re-implementation of a two-layer
    /// forward pass on the tiny config.
    #[test]
    fn exit_logits_match_scalar_reference() {
        let cfg = tiny_config();
        let p = BackboneParams::init(cfg.clone(), 7).unwrap();
        let tokens = [3usize, 11, 0, 5];
        let got = forward_to_depth(&tokens, &p, 2).unwrap();

        let n = tokens.len();
        let d = cfg.hidden_dim;
        let dense = |w: &Weight| match w {
            Weight::Dense(t) => t.clone(),
            _ => panic!(),
        };
        let mut x: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                (0..d)
                    .map(|j| p.embedding.at(t, j) + p.pos_embedding.at(i, j))
                    .collect()
            })
            .collect();
        let ln = |x: &Vec<Vec<f64>>, gain: &Tensor, shift: &Tensor| -> Vec<Vec<f64>> {
            x.iter()
                .map(|row| {
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    (0..d)
                        .map(|j| (row[j] - mean) * inv * gain.data[j] + shift.data[j])
                        .collect()
                })
                .collect()
        };
        let mm = |x: &Vec<Vec<f64>>, w: &Tensor, b: &Tensor| -> Vec<Vec<f64>> {
            let out_dim = w.cols();
            x.iter()
                .map(|row| {
                    (0..out_dim)
                        .map(|o| {
                            let mut acc = b.data[o];
                            for (j, &v) in row.iter().enumerate() {
                                acc += v * w.at(j, o);
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        };
        let mut exit2 = Vec::new();
        for li in 0..2 {
            let layer = &p.layers[li];
            let h = ln(&x, &layer.ln1_gain, &layer.ln1_shift);
            let q = mm(&h, &dense(&layer.wq), &layer.bq);
            let k = mm(&h, &dense(&layer.wk), &layer.bk);
            let v = mm(&h, &dense(&layer.wv), &layer.bv);
            let dh = d / cfg.heads;
            let mut ctx = vec![vec![0.0; d]; n];
            for head in 0..cfg.heads {
                let off = head * dh;
                for i in 0..n {
                    let mut scores: Vec<f64> = (0..n)
                        .map(|j| {
                            (0..dh).map(|c| q[i][off + c] * k[j][off + c]).sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for s in &mut scores {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    for s in &mut scores {
                        *s /= sum;
                    }
                    for c in 0..dh {
                        ctx[i][off + c] =
                            (0..n).map(|j| scores[j] * v[j][off + c]).sum::<f64>();
                    }
                }
            }
            let proj = mm(&ctx, &dense(&layer.wo), &layer.bo);
            for i in 0..n {
                for j in 0..d {
                    x[i][j] += proj[i][j];
                }
            }
            let h2 = ln(&x, &layer.ln2_gain, &layer.ln2_shift);
            let mut ff = mm(&h2, &dense(&layer.w1), &layer.b1);
            for row in &mut ff {
                for v in row.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            let ff = mm(&ff, &dense(&layer.w2), &layer.b2);
            for i in 0..n {
                for j in 0..d {
                    x[i][j] += ff[i][j];
                }
            }
            if li == 1 {
                let pooled: Vec<f64> = (0..d)
                    .map(|j| x.iter().map(|row| row[j]).sum::<f64>() / n as f64)
                    .collect();
                let head = &p.exit_heads[1];
                exit2 = (0..cfg.num_classes)
                    .map(|c| {
                        head.b.data[c]
                            + (0..d).map(|j| pooled[j] * head.w.at(j, c)).sum::<f64>()
                    })
                    .collect();
            }
        }
        for (a, b) in got.logits_per_exit[1].iter().zip(&exit2) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn task_loss_degenerate_cases() {
        let logits = vec![0.3, -0.2, 0.9];
        // student == teacher: KD term vanishes
        let (with_kd, _) = task_loss(&logits, 2, &logits, 1.0, 2.0).unwrap();
        assert!(with_kd.abs() < 1e-12);
        // kd_weight 0: plain cross-entropy
        let (ce_only, _) = task_loss(&logits, 2, &[9.0, 9.0, 9.0], 0.0, 2.0).unwrap();
        let lp = tensor::log_softmax_t(&logits, 1.0);
        assert!((ce_only + lp[2]).abs() < 1e-12);
    }

    #[test]
    fn task_loss_hand_kl_value() {
        let (loss, _) = task_loss(&[0.0, 0.0], 0, &[3f64.ln(), 0.0], 1.0, 1.0).unwrap();
        assert!((loss - 0.13081).abs() < 1e-5);
    }

    #[test]
    fn task_loss_rejects_bad_label() {
        assert!(matches!(
            task_loss(&[0.0, 0.0], 5, &[0.0, 0.0], 0.5, 2.0),
            Err(CoreError::Input(_))
        ));
    }

    #[test]
    fn task_loss_gradient_passes_grad_check() {
        let teacher = vec![0.4, -0.7, 1.1, 0.0];
        let x0 = Tensor::new(vec![4], vec![0.2, 0.5, -0.3, 0.8]).unwrap();
        let err = crate::autodiff::grad_check(
            |x| {
                let (v, g) = task_loss(&x.data, 1, &teacher, 0.5, 2.0)?;
                Ok((v, Tensor::new(vec![4], g)?))
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn ce_component_permutation_equivariant() {
        let logits = vec![0.7, -0.1, 0.4];
        let (a, _) = task_loss(&logits, 0, &[0.0; 3], 0.0, 1.0).unwrap();
        // swap classes 0 and 2 in both logits and label
        let permuted = vec![0.4, -0.1, 0.7];
        let (b, _) = task_loss(&permuted, 2, &[0.0; 3], 0.0, 1.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn fold_ratio_one_preserves_outputs() {
        let p = BackboneParams::init(tiny_config(), 5).unwrap();
        let folded = fold_layers(&p, 1.0).unwrap();
        let tokens = [1usize, 8, 3];
        let a = forward_to_depth(&tokens, &p, 3).unwrap();
        let b = forward_to_depth(&tokens, &folded, 3).unwrap();
        for l in 0..3 {
            for (x, y) in a.logits_per_exit[l].iter().zip(&b.logits_per_exit[l]) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fold_rank_one_weights_exact() {
        let mut p = BackboneParams::init(tiny_config(), 6).unwrap();
        // overwrite every attention/FFN weight with a rank-1 matrix
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for l in &mut p.layers {
            for w in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1, &mut l.w2] {
                if let Weight::Dense(t) = w {
                    let (m, n) = (t.rows(), t.cols());
                    let u: Vec<f64> = (0..m).map(|_| rng.gen_range(-0.1..0.1)).collect();
                    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();
                    for i in 0..m {
                        for j in 0..n {
                            *t.at_mut(i, j) = u[i] * v[j];
                        }
                    }
                }
            }
        }
        let folded = fold_layers(&p, 0.9).unwrap();
        let tokens = [2usize, 14, 9, 9];
        let a = forward_to_depth(&tokens, &p, 3).unwrap();
        let b = forward_to_depth(&tokens, &folded, 3).unwrap();
        for l in 0..3 {
            for (x, y) in a.logits_per_exit[l].iter().zip(&b.logits_per_exit[l]) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        for l in &folded.layers {
            if let Weight::Folded(f) = &l.wq {
                assert_eq!(f.rank, 1);
            }
        }
    }

    #[test]
    fn fold_energy_accounting_at_point_nine() {
        let p = BackboneParams::init(tiny_config(), 9).unwrap();
        let folded = fold_layers(&p, 0.9).unwrap();
        for (orig, f) in p.layers.iter().zip(&folded.layers) {
            for (ow, fw) in [(&orig.wq, &f.wq), (&orig.w1, &f.w1), (&orig.w2, &f.w2)] {
                let (Weight::Dense(o), Weight::Folded(lr)) = (ow, fw) else {
                    panic!()
                };
                assert!(lr.energy_retained >= 0.9 - 1e-12);
                let rec = lr.reconstruct();
                let mut err_sq = 0.0;
                for i in 0..o.len() {
                    let d = o.data[i] - rec.data[i];
                    err_sq += d * d;
                }
                assert!(err_sq <= (1.0 - lr.energy_retained) * o.frobenius_sq() + 1e-9);
            }
        }
        assert!(fold_layers(&folded, 0.9).is_err(), "double fold must fail");
    }

    #[test]
    fn flops_linear_in_depth() {
        let cfg = BackboneConfig::desk_default();
        let c = per_layer_flops(&cfg);
        let head = exit_head_flops(&cfg);
        assert_eq!(flops_of_depth(&cfg, 12), 12.0 * c + head);
        let ratio = (flops_of_depth(&cfg, 12) - head) / (flops_of_depth(&cfg, 6) - head);
        assert!((ratio - 2.0).abs() < 1e-12);
        for l in 1..cfg.num_layers {
            assert!(flops_of_depth(&cfg, l + 1) > flops_of_depth(&cfg, l));
        }
    }

    #[test]
    fn per_layer_flops_matches_hand_count() {
        // n=4, d=8: attention 8·4·64 + 4·16·8 = 2048 + 512; ffn 16·4·64 = 4096
        let cfg = BackboneConfig {
            num_layers: 2,
            hidden_dim: 8,
            heads: 2,
            ffn_mult: 4,
            num_classes: 2,
            vocab_size: 4,
            max_len: 4,
        };
        assert_eq!(per_layer_flops(&cfg), 2048.0 + 512.0 + 4096.0);
    }

    #[test]
    fn paper_scale_flops_ratio_cross_check() {
        // a 42.7% FLOP reduction over 12 layers corresponds to mean depth ≈ 6.9
        let mean_depth: f64 = (1.0 - 0.427) * 12.0;
        assert!((mean_depth - 6.9).abs() < 0.03);
    }

    #[test]
    fn folded_param_count_drops_on_desk_config() {
        let p = BackboneParams::init(BackboneConfig::desk_default(), 0).unwrap();
        let folded = fold_layers(&p, 0.9).unwrap();
        let before = p.param_count();
        let after = folded.param_count();
        assert!(
            (after as f64) <= 0.8 * before as f64,
            "fold reduced params only from {before} to {after}"
        );
    }

    #[test]
    fn content_hash_tracks_changes() {
        let p = BackboneParams::init(tiny_config(), 1).unwrap();
        let h1 = p.content_hash();
        let mut q = p.clone();
        assert_eq!(h1, q.content_hash());
        q.embedding.data[0] += 1e-12;
        assert_ne!(h1, q.content_hash());
    }

    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;
}
