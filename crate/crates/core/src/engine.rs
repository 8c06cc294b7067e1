//! Inference engine: one precompiled static plan per depth, interpreted over
//! a preallocated buffer arena, with depth-frequency EMA driving pool
//! rebalancing. Plan execution matches the eager forward path; the pool only
//! changes where scratch memory comes from, never the numbers.

use crate::backbone::{self, BackboneParams, Weight};
use crate::error::{CoreError, Result};
use crate::tensor;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

pub const DEFAULT_POOL_BYTES: usize = 16 * 1024 * 1024;

/// Buffer ids used by every plan; sized in the plan's buffer table.
const BUF_X: usize = 0; // hidden state, n×d
const BUF_N: usize = 1; // layernorm output, n×d
const BUF_Q: usize = 2;
const BUF_K: usize = 3;
const BUF_V: usize = 4;
const BUF_CTX: usize = 5; // attention context, n×d
const BUF_SCORES: usize = 6; // per-head score matrix, n×n
const BUF_FF: usize = 7; // ffn expansion, n×(ffn_mult·d)
const BUF_FF2: usize = 8; // ffn contraction, n×d
const BUF_TMP: usize = 9; // folded-weight intermediate, n×d
const BUF_LOGITS: usize = 10; // 1×classes
const N_BUFFERS: usize = 11;

/// Which weight matrix of a layer an op touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightSlot {
    Wq,
    Wk,
    Wv,
    Wo,
    W1,
    W2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpKind {
    /// tokens → BUF_X (embedding + positional rows)
    Embed,
    /// ln over `src` into `dst`; `which` picks ln1/ln2 of `layer`
    Norm { layer: usize, which: u8, src: usize, dst: usize },
    /// dst = src · W + b
    Linear { layer: usize, slot: WeightSlot, src: usize, dst: usize },
    /// fused ln1 + the three q/k/v projections (BUF_N stays internal)
    FusedNormQkv { layer: usize },
    /// fused ln2 + W1 + bias, src BUF_X → BUF_FF
    FusedNormLinear { layer: usize },
    /// multi-head attention over BUF_Q/K/V → BUF_CTX, scores in BUF_SCORES
    AttnContext { layer: usize },
    Relu { buf: usize },
    /// dst += src, elementwise
    ResidualAdd { dst: usize, src: usize },
    /// mean-pool BUF_X rows, exit head of `layer` → BUF_LOGITS
    ExitHead { layer: usize },
}

#[derive(Debug, Clone)]
pub struct ExecutionPlan {
    pub depth: usize,
    pub seq_len: usize,
    pub ops: Vec<OpKind>,
    /// id → f64 element count; byte size is 8× this.
    pub buffer_table: Vec<usize>,
    pub total_flops: f64,
    pub total_buffer_bytes: usize,
    params: Arc<BackboneParams>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExecMetrics {
    pub depth: usize,
    pub flops: f64,
    pub peak_bytes: usize,
    pub pool_hit: bool,
    pub wall_time_ns: u64,
}

pub struct ExecOutcome {
    pub logits: Vec<f64>,
    pub metrics: ExecMetrics,
}

fn buffer_table(params: &BackboneParams) -> Vec<usize> {
    let cfg = &params.config;
    let n = cfg.max_len;
    let d = cfg.hidden_dim;
    let mut table = vec![0usize; N_BUFFERS];
    table[BUF_X] = n * d;
    table[BUF_N] = n * d;
    table[BUF_Q] = n * d;
    table[BUF_K] = n * d;
    table[BUF_V] = n * d;
    table[BUF_CTX] = n * d;
    table[BUF_SCORES] = n * n;
    table[BUF_FF] = n * cfg.ffn_mult * d;
    table[BUF_FF2] = n * d;
    table[BUF_TMP] = n * d;
    table[BUF_LOGITS] = cfg.num_classes;
    table
}

pub fn compile_plans(params: &BackboneParams) -> Vec<ExecutionPlan> {
    compile_plans_opts(params, true)
}

/// `fuse` replaces each layernorm+linear pair with one fused descriptor;
/// arithmetic is identical, only dispatch count changes.
pub fn compile_plans_opts(params: &BackboneParams, fuse: bool) -> Vec<ExecutionPlan> {
    let cfg = &params.config;
    let shared = Arc::new(params.clone());
    let table = buffer_table(params);
    let bytes = table.iter().sum::<usize>() * 8;
    (1..=cfg.num_layers)
        .map(|depth| {
            let mut ops = vec![OpKind::Embed];
            for l in 0..depth {
                if fuse {
                    ops.push(OpKind::FusedNormQkv { layer: l });
                } else {
                    ops.push(OpKind::Norm { layer: l, which: 1, src: BUF_X, dst: BUF_N });
                    ops.push(OpKind::Linear { layer: l, slot: WeightSlot::Wq, src: BUF_N, dst: BUF_Q });
                    ops.push(OpKind::Linear { layer: l, slot: WeightSlot::Wk, src: BUF_N, dst: BUF_K });
                    ops.push(OpKind::Linear { layer: l, slot: WeightSlot::Wv, src: BUF_N, dst: BUF_V });
                }
                ops.push(OpKind::AttnContext { layer: l });
                ops.push(OpKind::Linear { layer: l, slot: WeightSlot::Wo, src: BUF_CTX, dst: BUF_FF2 });
                ops.push(OpKind::ResidualAdd { dst: BUF_X, src: BUF_FF2 });
                if fuse {
                    ops.push(OpKind::FusedNormLinear { layer: l });
                } else {
                    ops.push(OpKind::Norm { layer: l, which: 2, src: BUF_X, dst: BUF_N });
                    ops.push(OpKind::Linear { layer: l, slot: WeightSlot::W1, src: BUF_N, dst: BUF_FF });
                }
                ops.push(OpKind::Relu { buf: BUF_FF });
                ops.push(OpKind::Linear { layer: l, slot: WeightSlot::W2, src: BUF_FF, dst: BUF_FF2 });
                ops.push(OpKind::ResidualAdd { dst: BUF_X, src: BUF_FF2 });
            }
            ops.push(OpKind::ExitHead { layer: depth - 1 });
            ExecutionPlan {
                depth,
                seq_len: cfg.max_len,
                ops,
                buffer_table: table.clone(),
                total_flops: backbone::flops_of_depth(cfg, depth),
                total_buffer_bytes: bytes,
                params: Arc::clone(&shared),
            }
        })
        .collect()
}

// ---- interpreter ----------------------------------------------------------

/// Row-major matmul into `dst`, same k-ascending accumulation order as the
/// eager path so plan and eager agree to the bit.
fn matmul_into(a: &[f64], ar: usize, ac: usize, b: &[f64], bc: usize, dst: &mut [f64]) {
    dst[..ar * bc].fill(0.0);
    for i in 0..ar {
        for k in 0..ac {
            let av = a[i * ac + k];
            if av == 0.0 {
                continue;
            }
            let brow = &b[k * bc..(k + 1) * bc];
            let drow = &mut dst[i * bc..i * bc + bc];
            for j in 0..bc {
                drow[j] += av * brow[j];
            }
        }
    }
}

fn apply_weight(
    w: &Weight,
    src: &[f64],
    rows: usize,
    src_cols: usize,
    tmp: &mut [f64],
    dst: &mut [f64],
) -> usize {
    match w {
        Weight::Dense(m) => {
            matmul_into(src, rows, src_cols, &m.data, m.cols(), dst);
            m.cols()
        }
        Weight::Folded(f) => {
            matmul_into(src, rows, src_cols, &f.left.data, f.left.cols(), tmp);
            matmul_into(tmp, rows, f.left.cols(), &f.right.data, f.right.cols(), dst);
            f.right.cols()
        }
    }
}

fn add_bias_rows(buf: &mut [f64], rows: usize, bias: &[f64]) {
    let c = bias.len();
    for i in 0..rows {
        for j in 0..c {
            buf[i * c + j] += bias[j];
        }
    }
}

fn norm_into(src: &[f64], rows: usize, cols: usize, gain: &[f64], shift: &[f64], dst: &mut [f64]) {
    for i in 0..rows {
        let row = &src[i * cols..(i + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + backbone::LN_EPS).sqrt();
        for j in 0..cols {
            dst[i * cols + j] = (row[j] - mean) * inv * gain[j] + shift[j];
        }
    }
}

struct Buffers<'a> {
    slices: Vec<&'a mut [f64]>,
}

impl<'a> Buffers<'a> {
    /// Carve the buffer table out of one backing slice.
    fn carve(table: &[usize], mut backing: &'a mut [f64]) -> Self {
        let mut slices = Vec::with_capacity(table.len());
        for &len in table {
            let (head, rest) = backing.split_at_mut(len);
            head.fill(0.0);
            slices.push(head);
            backing = rest;
        }
        Buffers { slices }
    }

    fn two(&mut self, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
        debug_assert_ne!(a, b);
        if a < b {
            let (lo, hi) = self.slices.split_at_mut(b);
            (&mut *lo[a], &mut *hi[0])
        } else {
            let (lo, hi) = self.slices.split_at_mut(a);
            (&mut *hi[0], &mut *lo[b])
        }
    }
}

pub fn execute(plan: &ExecutionPlan, tokens: &[usize], pool: &mut BufferPool) -> Result<ExecOutcome> {
    let start = Instant::now();
    let cfg = &plan.params.config;
    if tokens.len() > plan.seq_len {
        return Err(CoreError::Input(format!(
            "sequence length {} exceeds plan length {}",
            tokens.len(),
            plan.seq_len
        )));
    }
    if tokens.is_empty() {
        return Err(CoreError::Input("empty token sequence".into()));
    }
    for &t in tokens {
        if t >= cfg.vocab_size {
            return Err(CoreError::Input(format!("token {t} out of vocab")));
        }
    }
    // shorter inputs run as if padded with token 0
    let mut padded;
    let tokens = if tokens.len() == plan.seq_len {
        tokens
    } else {
        padded = tokens.to_vec();
        padded.resize(plan.seq_len, 0);
        &padded
    };

    let elems = plan.total_buffer_bytes / 8;
    let pool_hit = pool.checkout(plan.depth, plan.total_buffer_bytes);
    let mut fallback = Vec::new();
    let backing: &mut [f64] = if pool_hit {
        &mut pool.arena[..elems]
    } else {
        fallback.resize(elems, 0.0);
        &mut fallback
    };
    let mut bufs = Buffers::carve(&plan.buffer_table, backing);

    let n = plan.seq_len;
    let d = cfg.hidden_dim;
    let heads = cfg.heads;
    let dh = d / heads;
    let p = &plan.params;

    for op in &plan.ops {
        match *op {
            OpKind::Embed => {
                let x = &mut bufs.slices[BUF_X];
                for (i, &t) in tokens.iter().enumerate() {
                    for j in 0..d {
                        x[i * d + j] = p.embedding.at(t, j) + p.pos_embedding.at(i, j);
                    }
                }
            }
            OpKind::Norm { layer, which, src, dst } => {
                let lp = &p.layers[layer];
                let (gain, shift) = if which == 1 {
                    (&lp.ln1_gain, &lp.ln1_shift)
                } else {
                    (&lp.ln2_gain, &lp.ln2_shift)
                };
                let (s, t) = bufs.two(src, dst);
                norm_into(s, n, d, &gain.data, &shift.data, t);
            }
            OpKind::Linear { layer, slot, src, dst } => {
                let lp = &p.layers[layer];
                let (w, b, in_cols) = match slot {
                    WeightSlot::Wq => (&lp.wq, &lp.bq, d),
                    WeightSlot::Wk => (&lp.wk, &lp.bk, d),
                    WeightSlot::Wv => (&lp.wv, &lp.bv, d),
                    WeightSlot::Wo => (&lp.wo, &lp.bo, d),
                    WeightSlot::W1 => (&lp.w1, &lp.b1, d),
                    WeightSlot::W2 => (&lp.w2, &lp.b2, cfg.ffn_mult * d),
                };
                let (s, t) = bufs.two(src, dst);
                let tmp = &mut vec![0.0; n * in_cols.max(d)];
                apply_weight(w, s, n, in_cols, tmp, t);
                add_bias_rows(t, n, &b.data);
            }
            OpKind::FusedNormQkv { layer } => {
                let lp = &p.layers[layer];
                {
                    let (x, nb) = bufs.two(BUF_X, BUF_N);
                    norm_into(x, n, d, &lp.ln1_gain.data, &lp.ln1_shift.data, nb);
                }
                for (w, b, dst) in [
                    (&lp.wq, &lp.bq, BUF_Q),
                    (&lp.wk, &lp.bk, BUF_K),
                    (&lp.wv, &lp.bv, BUF_V),
                ] {
                    let mut tmp = vec![0.0; n * d];
                    let (s, t) = bufs.two(BUF_N, dst);
                    apply_weight(w, s, n, d, &mut tmp, t);
                    add_bias_rows(t, n, &b.data);
                }
            }
            OpKind::FusedNormLinear { layer } => {
                let lp = &p.layers[layer];
                {
                    let (x, nb) = bufs.two(BUF_X, BUF_N);
                    norm_into(x, n, d, &lp.ln2_gain.data, &lp.ln2_shift.data, nb);
                }
                let mut tmp = vec![0.0; n * d];
                let (s, t) = bufs.two(BUF_N, BUF_FF);
                apply_weight(&lp.w1, s, n, d, &mut tmp, t);
                add_bias_rows(t, n, &lp.b1.data);
            }
            OpKind::AttnContext { layer: _ } => {
                let scale = 1.0 / (dh as f64).sqrt();
                for h in 0..heads {
                    let off = h * dh;
                    // per-head scores: q·kᵀ over the head's columns
                    for i in 0..n {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for c in 0..dh {
                                acc += bufs.slices[BUF_Q][i * d + off + c]
                                    * bufs.slices[BUF_K][j * d + off + c];
                            }
                            bufs.slices[BUF_SCORES][i * n + j] = acc * scale;
                        }
                    }
                    tensor::softmax_rows_inplace(&mut bufs.slices[BUF_SCORES], n, n);
                    for i in 0..n {
                        for c in 0..dh {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += bufs.slices[BUF_SCORES][i * n + j]
                                    * bufs.slices[BUF_V][j * d + off + c];
                            }
                            bufs.slices[BUF_CTX][i * d + off + c] = acc;
                        }
                    }
                }
            }
            OpKind::Relu { buf } => {
                for v in bufs.slices[buf].iter_mut() {
                    *v = v.max(0.0);
                }
            }
            OpKind::ResidualAdd { dst, src } => {
                let (s, t) = bufs.two(src, dst);
                for (tv, sv) in t.iter_mut().zip(s.iter()) {
                    *tv += *sv;
                }
            }
            OpKind::ExitHead { layer } => {
                let head = &p.exit_heads[layer];
                let classes = head.b.len();
                let (x, logits) = bufs.two(BUF_X, BUF_LOGITS);
                let mut pooled = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        pooled[j] += x[i * d + j];
                    }
                }
                for v in &mut pooled {
                    *v /= n as f64;
                }
                for c in 0..classes {
                    let mut acc = head.b.data[c];
                    for j in 0..d {
                        acc += pooled[j] * head.w.at(j, c);
                    }
                    logits[c] = acc;
                }
            }
        }
    }

    let logits = bufs.slices[BUF_LOGITS].to_vec();
    Ok(ExecOutcome {
        logits,
        metrics: ExecMetrics {
            depth: plan.depth,
            flops: plan.total_flops,
            peak_bytes: plan.total_buffer_bytes,
            pool_hit,
            wall_time_ns: start.elapsed().as_nanos() as u64,
        },
    })
}

// ---- depth distribution ---------------------------------------------------

pub const EMA_WEIGHT: f64 = 0.9;
const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DepthDistribution {
    pub probs: Vec<f64>,
    pub ema_weight: f64,
    pub updates: u64,
}

impl DepthDistribution {
    pub fn uniform(max_depth: usize) -> Self {
        DepthDistribution {
            probs: vec![1.0 / max_depth as f64; max_depth],
            ema_weight: EMA_WEIGHT,
            updates: 0,
        }
    }

    pub fn onehot(max_depth: usize, depth: usize) -> Self {
        let mut probs = vec![0.0; max_depth];
        probs[depth - 1] = 1.0;
        DepthDistribution {
            probs,
            ema_weight: EMA_WEIGHT,
            updates: 0,
        }
    }

    pub fn update(&mut self, observed_depth: usize) -> Result<()> {
        if observed_depth < 1 || observed_depth > self.probs.len() {
            return Err(CoreError::Parameter(format!(
                "observed depth {observed_depth} outside [1, {}]",
                self.probs.len()
            )));
        }
        let w = self.ema_weight;
        for (i, p) in self.probs.iter_mut().enumerate() {
            let target = if i + 1 == observed_depth { 1.0 } else { 0.0 };
            *p = w * *p + (1.0 - w) * target;
        }
        self.updates += 1;
        self.check_simplex()
    }

    pub fn check_simplex(&self) -> Result<()> {
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL || self.probs.iter().any(|p| *p < 0.0) {
            return Err(CoreError::Evaluation(format!(
                "depth distribution left the simplex (sum {sum})"
            )));
        }
        Ok(())
    }

    pub fn mean_depth(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(i, p)| (i + 1) as f64 * p)
            .sum()
    }
}

// ---- buffer pool ----------------------------------------------------------

#[derive(Debug)]
pub struct BufferPool {
    pub capacity_bytes: usize,
    /// Reservation shares per depth, probs-proportional bookkeeping over the
    /// shared arena (slabs overlap; the arena itself is one allocation).
    pub slabs: Vec<usize>,
    arena: Vec<f64>,
    pub hits: u64,
    pub misses: u64,
}

impl BufferPool {
    pub fn new(capacity_bytes: usize, max_depth: usize) -> Self {
        BufferPool {
            capacity_bytes,
            slabs: vec![capacity_bytes / max_depth; max_depth],
            arena: vec![0.0; capacity_bytes / 8],
            hits: 0,
            misses: 0,
        }
    }

    pub fn desk_default(max_depth: usize) -> Self {
        Self::new(DEFAULT_POOL_BYTES, max_depth)
    }

    /// A hit means the whole request is served from the preallocated arena;
    /// a miss falls back to a fresh allocation and never fails the caller.
    fn checkout(&mut self, _depth: usize, bytes: usize) -> bool {
        if bytes <= self.capacity_bytes {
            self.hits += 1;
            true
        } else {
            self.misses += 1;
            false
        }
    }

    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            return 1.0;
        }
        self.hits as f64 / total as f64
    }
}

pub fn rebalance_pool(
    pool: &mut BufferPool,
    dist: &DepthDistribution,
    plans: &[ExecutionPlan],
) -> Result<()> {
    dist.check_simplex()?;
    let largest = plans
        .iter()
        .map(|p| p.total_buffer_bytes)
        .max()
        .unwrap_or(0);
    if pool.capacity_bytes < largest {
        return Err(CoreError::Configuration(format!(
            "pool capacity {} bytes below largest plan requirement {}",
            pool.capacity_bytes, largest
        )));
    }
    pool.slabs = dist
        .probs
        .iter()
        .zip(plans)
        .map(|(p, plan)| ((p * pool.capacity_bytes as f64) as usize).max(plan.total_buffer_bytes))
        .collect();
    Ok(())
}

/// Expected per-execution buffer bytes under the depth distribution.
pub fn expected_working_set(dist: &DepthDistribution, plans: &[ExecutionPlan]) -> f64 {
    dist.probs
        .iter()
        .zip(plans)
        .map(|(p, plan)| p * plan.total_buffer_bytes as f64)
        .sum()
}
