//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in execution order, so walking the tape backwards is a
//! valid topological order. Backward closures capture whatever forward values
//! they need; parent values are handed back in by the tape during the sweep.
//!
//! Every gradient that ships in this crate is validated against the
//! central-difference oracle in [`grad_check`].

use crate::error::{CoreError, Result};
use crate::tensor::{self, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor]) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1, "scalar_value on non-scalar");
        t.data[0]
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: BackwardFn) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward: Some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node (parameter or input); gradients accumulate here.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar root. Returns one gradient slot per node;
    /// index with `Var` via [`Gradients::get`].
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let root_shape = self.nodes[root.0].value.shape.clone();
        let mut seed = Tensor::zeros(&root_shape);
        assert_eq!(seed.len(), 1, "backward root must be scalar");
        seed.data[0] = 1.0;
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(back) = &node.backward {
                let parent_vals: Vec<&Tensor> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let pgrads = back(&g, &parent_vals);
                debug_assert_eq!(pgrads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(pgrads) {
                    match &mut grads[p] {
                        Some(acc) => {
                            for (a, b) in acc.data.iter_mut().zip(&pg.data) {
                                *a += b;
                            }
                        }
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    // ---- tensor ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = tensor::matmul(self.value(a), self.value(b)).expect("tape matmul shapes");
        self.push(
            out,
            vec![a.0, b.0],
            Box::new(|g, pv| {
                let (av, bv) = (pv[0], pv[1]);
                let da = tensor::matmul(g, &bv.transpose()).unwrap();
                let db = tensor::matmul(&av.transpose(), g).unwrap();
                vec![da, db]
            }),
        )
    }

    /// a · bᵀ without materializing the transpose on the tape.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = tensor::matmul(self.value(a), &self.value(b).transpose()).unwrap();
        self.push(
            out,
            vec![a.0, b.0],
            Box::new(|g, pv| {
                let (av, bv) = (pv[0], pv[1]);
                let da = tensor::matmul(g, bv).unwrap();
                let db = tensor::matmul(&g.transpose(), av).unwrap();
                vec![da, db]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b)).expect("tape add shapes");
        self.push(
            out,
            vec![a.0, b.0],
            Box::new(|g, _| vec![g.clone(), g.clone()]),
        )
    }

    /// Add a length-c bias to every row of an r×c matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(bias);
        let (r, c) = (av.rows(), av.cols());
        assert_eq!(bv.len(), c, "bias length");
        let mut out = av.clone();
        for i in 0..r {
            for j in 0..c {
                out.data[i * c + j] += bv.data[j];
            }
        }
        self.push(
            out,
            vec![a.0, bias.0],
            Box::new(move |g, pv| {
                let mut db = Tensor::zeros(&pv[1].shape);
                for i in 0..r {
                    for j in 0..c {
                        db.data[j] += g.data[i * c + j];
                    }
                }
                vec![g.clone(), db]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(
            out,
            vec![a.0],
            Box::new(|g, pv| {
                let mut da = g.clone();
                for (d, &x) in da.data.iter_mut().zip(&pv[0].data) {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                }
                vec![da]
            }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let cached = out.clone();
        self.push(
            out,
            vec![a.0],
            Box::new(move |g, _| {
                let mut da = g.clone();
                for (d, &y) in da.data.iter_mut().zip(&cached.data) {
                    *d *= 1.0 - y * y;
                }
                vec![da]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        let cached = out.clone();
        self.push(
            out,
            vec![a.0],
            Box::new(move |g, _| {
                let mut da = g.clone();
                for (d, &y) in da.data.iter_mut().zip(&cached.data) {
                    *d *= y * (1.0 - y);
                }
                vec![da]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape, bv.shape);
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let out = Tensor {
            shape: av.shape.clone(),
            data,
        };
        self.push(
            out,
            vec![a.0, b.0],
            Box::new(|g, pv| {
                let mut da = g.clone();
                let mut db = g.clone();
                for i in 0..g.len() {
                    da.data[i] *= pv[1].data[i];
                    db.data[i] *= pv[0].data[i];
                }
                vec![da, db]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, vec![a.0], Box::new(move |g, _| vec![g.scale(s)]))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, vec![a.0], Box::new(|g, _| vec![g.clone()]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let cached = out.clone();
        self.push(
            out,
            vec![a.0],
            Box::new(move |g, _| {
                let mut da = g.clone();
                for (d, &y) in da.data.iter_mut().zip(&cached.data) {
                    *d *= y;
                }
                vec![da]
            }),
        )
    }

    /// Elementwise clamp; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(
            out,
            vec![a.0],
            Box::new(move |g, pv| {
                let mut da = g.clone();
                for (d, &x) in da.data.iter_mut().zip(&pv[0].data) {
                    if x < lo || x > hi {
                        *d = 0.0;
                    }
                }
                vec![da]
            }),
        )
    }

    /// Elementwise minimum; gradient follows the smaller operand (first on ties).
    pub fn min2(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape, bv.shape);
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x.min(*y)).collect();
        let out = Tensor {
            shape: av.shape.clone(),
            data,
        };
        self.push(
            out,
            vec![a.0, b.0],
            Box::new(|g, pv| {
                let mut da = Tensor::zeros(&g.shape);
                let mut db = Tensor::zeros(&g.shape);
                for i in 0..g.len() {
                    if pv[0].data[i] <= pv[1].data[i] {
                        da.data[i] = g.data[i];
                    } else {
                        db.data[i] = g.data[i];
                    }
                }
                vec![da, db]
            }),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(
            out,
            vec![a.0],
            Box::new(|g, pv| {
                let mut da = g.clone();
                for (d, &x) in da.data.iter_mut().zip(&pv[0].data) {
                    *d *= 2.0 * x;
                }
                vec![da]
            }),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.len() as f64;
        let out = Tensor::scalar(av.data.iter().sum::<f64>() / n);
        self.push(
            out,
            vec![a.0],
            Box::new(move |g, pv| {
                let gv = g.data[0] / n;
                vec![pv[0].map(|_| gv)]
            }),
        )
    }

    /// Mean over rows of an r×c matrix, giving 1×c.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut out = Tensor::zeros(&[1, c]);
        for i in 0..r {
            for j in 0..c {
                out.data[j] += av.data[i * c + j];
            }
        }
        for v in &mut out.data {
            *v /= r as f64;
        }
        self.push(
            out,
            vec![a.0],
            Box::new(move |g, _| {
                let mut da = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    for j in 0..c {
                        da.data[i * c + j] = g.data[j] / r as f64;
                    }
                }
                vec![da]
            }),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut out = Tensor::zeros(&[r, len]);
        for i in 0..r {
            out.data[i * len..(i + 1) * len]
                .copy_from_slice(&av.data[i * c + start..i * c + start + len]);
        }
        self.push(
            out,
            vec![a.0],
            Box::new(move |g, _| {
                let mut da = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    da.data[i * c + start..i * c + start + len]
                        .copy_from_slice(&g.data[i * len..(i + 1) * len]);
                }
                vec![da]
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[r, total]);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for i in 0..r {
                out.data[i * total + off..i * total + off + w]
                    .copy_from_slice(&pv.data[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let widths_cl = widths.clone();
        self.push(
            out,
            parts.iter().map(|p| p.0).collect(),
            Box::new(move |g, _| {
                let mut grads = Vec::with_capacity(widths_cl.len());
                let mut off = 0;
                for &w in &widths_cl {
                    let mut dp = Tensor::zeros(&[r, w]);
                    for i in 0..r {
                        dp.data[i * w..(i + 1) * w]
                            .copy_from_slice(&g.data[i * total + off..i * total + off + w]);
                    }
                    grads.push(dp);
                    off += w;
                }
                grads
            }),
        )
    }

    /// Row-gather from an embedding table; gradient scatters back.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let (vocab, dim) = (tv.rows(), tv.cols());
        let mut out = Tensor::zeros(&[ids.len(), dim]);
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < vocab, "token id out of vocab");
            out.data[i * dim..(i + 1) * dim].copy_from_slice(tv.row(id));
        }
        let ids_cl = ids.to_vec();
        self.push(
            out,
            vec![table.0],
            Box::new(move |g, pv| {
                let mut dt = Tensor::zeros(&pv[0].shape);
                for (i, &id) in ids_cl.iter().enumerate() {
                    for j in 0..dim {
                        dt.data[id * dim + j] += g.data[i * dim + j];
                    }
                }
                vec![dt]
            }),
        )
    }

    /// Per-row layer normalization with learned gain and shift (each length c).
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let gv = self.value(gain).data.clone();
        let sv = self.value(shift).data.clone();
        let mut out = Tensor::zeros(&[r, c]);
        let mut means = vec![0.0; r];
        let mut inv_stds = vec![0.0; r];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            means[i] = mean;
            inv_stds[i] = inv;
            for j in 0..c {
                out.data[i * c + j] = (row[j] - mean) * inv * gv[j] + sv[j];
            }
        }
        self.push(
            out,
            vec![x.0, gain.0, shift.0],
            Box::new(move |g, pv| {
                let xv = pv[0];
                let gainv = pv[1];
                let mut dx = Tensor::zeros(&[r, c]);
                let mut dgain = Tensor::zeros(&pv[1].shape);
                let mut dshift = Tensor::zeros(&pv[2].shape);
                for i in 0..r {
                    let row = xv.row(i);
                    let mean = means[i];
                    let inv = inv_stds[i];
                    // xhat_j = (x_j - mean) * inv
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let gout = &g.data[i * c..(i + 1) * c];
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for j in 0..c {
                        let dy = gout[j] * gainv.data[j];
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat[j];
                        dgain.data[j] += gout[j] * xhat[j];
                        dshift.data[j] += gout[j];
                    }
                    for j in 0..c {
                        let dy = gout[j] * gainv.data[j];
                        dx.data[i * c + j] =
                            inv * (dy - sum_dy / c as f64 - xhat[j] * sum_dy_xhat / c as f64);
                    }
                }
                vec![dx, dgain, dshift]
            }),
        )
    }

    /// Row-wise softmax at temperature 1 (attention probabilities).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut out = av.clone();
        tensor::softmax_rows_inplace(&mut out.data, r, c);
        let cached = out.clone();
        self.push(
            out,
            vec![a.0],
            Box::new(move |g, _| {
                let mut da = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let p = &cached.data[i * c..(i + 1) * c];
                    let go = &g.data[i * c..(i + 1) * c];
                    let dot: f64 = p.iter().zip(go).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        da.data[i * c + j] = p[j] * (go[j] - dot);
                    }
                }
                vec![da]
            }),
        )
    }

    /// Cross-entropy of a single logit row against an integer label.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let lv = self.value(logits);
        let n = lv.len();
        assert!(label < n, "label out of class range");
        let log_probs = tensor::log_softmax_t(&lv.data, 1.0);
        let out = Tensor::scalar(-log_probs[label]);
        let probs: Vec<f64> = log_probs.iter().map(|&v| v.exp()).collect();
        let shape = lv.shape.clone();
        self.push(
            out,
            vec![logits.0],
            Box::new(move |g, _| {
                let gs = g.data[0];
                let mut da = Tensor::zeros(&shape);
                for j in 0..n {
                    da.data[j] = gs * (probs[j] - if j == label { 1.0 } else { 0.0 });
                }
                vec![da]
            }),
        )
    }

    /// T²·KL(softmax(teacher/T) ‖ softmax(student/T)), differentiated w.r.t.
    /// the student logits. Teacher probabilities are a constant.
    pub fn kd_loss(&mut self, student: Var, teacher_logits: &Tensor, temperature: f64) -> Var {
        let sv = self.value(student);
        let n = sv.len();
        assert_eq!(teacher_logits.len(), n);
        let t = temperature;
        let teacher_lp = tensor::log_softmax_t(&teacher_logits.data, t);
        let teacher_p: Vec<f64> = teacher_lp.iter().map(|&v| v.exp()).collect();
        let student_lp = tensor::log_softmax_t(&sv.data, t);
        let kl: f64 = teacher_p
            .iter()
            .zip(teacher_lp.iter().zip(&student_lp))
            .map(|(&p, (&lp, &lq))| p * (lp - lq))
            .sum();
        let out = Tensor::scalar(t * t * kl);
        let student_p: Vec<f64> = student_lp.iter().map(|&v| v.exp()).collect();
        let shape = sv.shape.clone();
        self.push(
            out,
            vec![student.0],
            Box::new(move |g, _| {
                // d/ds_j of T²·KL = T·(q_j − p_j)
                let gs = g.data[0];
                let mut da = Tensor::zeros(&shape);
                for j in 0..n {
                    da.data[j] = gs * t * (student_p[j] - teacher_p[j]);
                }
                vec![da]
            }),
        )
    }

    /// log softmax(logits)[idx] as a scalar — action log-probability.
    pub fn log_prob(&mut self, logits: Var, idx: usize) -> Var {
        let lv = self.value(logits);
        let n = lv.len();
        assert!(idx < n);
        let log_probs = tensor::log_softmax_t(&lv.data, 1.0);
        let out = Tensor::scalar(log_probs[idx]);
        let probs: Vec<f64> = log_probs.iter().map(|&v| v.exp()).collect();
        let shape = lv.shape.clone();
        self.push(
            out,
            vec![logits.0],
            Box::new(move |g, _| {
                let gs = g.data[0];
                let mut da = Tensor::zeros(&shape);
                for j in 0..n {
                    da.data[j] = gs * ((if j == idx { 1.0 } else { 0.0 }) - probs[j]);
                }
                vec![da]
            }),
        )
    }

    /// Entropy of softmax(logits) as a scalar.
    pub fn entropy(&mut self, logits: Var) -> Var {
        let lv = self.value(logits);
        let n = lv.len();
        let log_probs = tensor::log_softmax_t(&lv.data, 1.0);
        let probs: Vec<f64> = log_probs.iter().map(|&v| v.exp()).collect();
        let h: f64 = -probs.iter().zip(&log_probs).map(|(&p, &lp)| p * lp).sum::<f64>();
        let out = Tensor::scalar(h);
        let shape = lv.shape.clone();
        self.push(
            out,
            vec![logits.0],
            Box::new(move |g, _| {
                let gs = g.data[0];
                let mut da = Tensor::zeros(&shape);
                for j in 0..n {
                    da.data[j] = gs * (-probs[j] * (log_probs[j] + h));
                }
                vec![da]
            }),
        )
    }

    /// Sum a list of scalars into one scalar.
    pub fn sum_scalars(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let total: f64 = vars.iter().map(|&v| self.scalar_value(v)).sum();
        let k = vars.len();
        self.push(
            Tensor::scalar(total),
            vars.iter().map(|v| v.0).collect(),
            Box::new(move |g, _| (0..k).map(|_| g.clone()).collect()),
        )
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// Central-difference gradient validation.
///
/// `f` returns the scalar value and the analytic gradient at a point. The
/// result is the max over coordinates of
/// |analytic − central-difference| / max(1, |analytic|).
pub fn grad_check<F>(mut f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(CoreError::Parameter(format!(
            "grad_check eps must lie in [1e-7, 1e-3], got {eps}"
        )));
    }
    let (value, analytic) = f(x)?;
    if !value.is_finite() {
        return Err(CoreError::Evaluation(
            "grad_check: objective is non-finite at x".into(),
        ));
    }
    let mut max_err = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data[i] += eps;
        let (fp, _) = f(&xp)?;
        let mut xm = x.clone();
        xm.data[i] -= eps;
        let (fm, _) = f(&xm)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(CoreError::Evaluation(
                "grad_check: objective is non-finite at a perturbed point".into(),
            ));
        }
        let fd = (fp - fm) / (2.0 * eps);
        let err = (analytic.data[i] - fd).abs() / analytic.data[i].abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
