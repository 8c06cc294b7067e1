//! Truncated SVD via one-sided Jacobi iteration.
//!
//! Deterministic and dependency-free; adequate for the matrix sizes this
//! project folds (at most a few hundred per side).

use crate::error::Result;
use crate::tensor::{matmul, Tensor};
use serde::{Deserialize, Serialize};

/// Off-diagonal convergence tolerance for the Jacobi sweeps.
const JACOBI_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 60;

/// Rank-truncated two-factor decomposition of a weight matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LowRankFactors {
    /// m×r, singular values folded in.
    pub left: Tensor,
    /// r×n.
    pub right: Tensor,
    pub rank: usize,
    /// Fraction of squared singular-value mass retained, in [0, 1].
    pub energy_retained: f64,
}

impl LowRankFactors {
    pub fn reconstruct(&self) -> Tensor {
        if self.rank == 0 {
            let m = self.left.shape[0];
            let n = self.right.shape[1];
            return Tensor::zeros(&[m, n]);
        }
        matmul(&self.left, &self.right).expect("factor shapes agree by construction")
    }

    /// True when storing the factors takes fewer scalars than the original.
    pub fn is_compressive(&self) -> bool {
        let m = self.left.shape[0];
        let n = self.right.shape[1];
        self.rank * (m + n) < m * n
    }

    pub fn param_count(&self) -> usize {
        self.left.len() + self.right.len()
    }
}

/// Full SVD of a (m×n): returns (u: m×k, sigma: k, v: n×k) with k = min(m, n)
/// and singular values sorted descending.
pub fn svd(a: &Tensor) -> (Tensor, Vec<f64>, Tensor) {
    let (m, n) = (a.rows(), a.cols());
    if m < n {
        // svd(Aᵀ) swaps the factor roles
        let (u, s, v) = svd_tall(&a.transpose());
        return (v, s, u);
    }
    svd_tall(a)
}

/// One-sided Jacobi on a tall (m ≥ n) matrix.
fn svd_tall(a: &Tensor) -> (Tensor, Vec<f64>, Tensor) {
    let (m, n) = (a.rows(), a.cols());
    // column-major working copies
    let mut b: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.at(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..m {
                    alpha += b[p][i] * b[p][i];
                    beta += b[q][i] * b[q][i];
                    gamma += b[p][i] * b[q][i];
                }
                let denom = (alpha * beta).sqrt();
                if denom == 0.0 {
                    continue;
                }
                off = off.max((gamma / denom).abs());
                if (gamma / denom).abs() <= JACOBI_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let bp = b[p][i];
                    let bq = b[q][i];
                    b[p][i] = c * bp - s * bq;
                    b[q][i] = s * bp + c * bq;
                }
                for i in 0..n {
                    let vp = v[p][i];
                    let vq = v[q][i];
                    v[p][i] = c * vp - s * vq;
                    v[q][i] = s * vp + c * vq;
                }
            }
        }
        if off <= JACOBI_TOL {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = b.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let mut u = Tensor::zeros(&[m, n]);
    let mut vt = Tensor::zeros(&[n, n]);
    let mut sigma = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        if s > 0.0 {
            for i in 0..m {
                *u.at_mut(i, k) = b[j][i] / s;
            }
        }
        for i in 0..n {
            *vt.at_mut(i, k) = v[j][i];
        }
    }
    (u, sigma, vt)
}

/// Decompose `w` keeping the smallest rank whose squared singular-value mass
/// reaches `energy_ratio`. An all-zero matrix yields rank 0 with
/// energy_retained = 1 by convention.
pub fn truncated_svd(w: &Tensor, energy_ratio: f64) -> Result<LowRankFactors> {
    if !(energy_ratio > 0.0 && energy_ratio <= 1.0) {
        return Err(crate::error::CoreError::Parameter(format!(
            "energy_ratio must be in (0, 1], got {energy_ratio}"
        )));
    }
    if !w.is_finite() {
        return Err(crate::error::CoreError::Parameter(
            "truncated_svd on non-finite matrix".into(),
        ));
    }
    let (m, n) = (w.rows(), w.cols());
    let (u, sigma, v) = svd(w);
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Ok(LowRankFactors {
            left: Tensor::zeros(&[m, 0]),
            right: Tensor::zeros(&[0, n]),
            rank: 0,
            energy_retained: 1.0,
        });
    }
    let mut cum = 0.0;
    let mut rank = sigma.len();
    for (i, s) in sigma.iter().enumerate() {
        cum += s * s;
        // tiny slack so exact threshold cases (9/10 = 0.9) are not lost to round-off
        if cum / total >= energy_ratio - 1e-12 {
            rank = i + 1;
            break;
        }
    }
    let retained: f64 = sigma[..rank].iter().map(|s| s * s).sum::<f64>() / total;

    // left = U_r · diag(sigma_r), right = V_rᵀ
    let mut left = Tensor::zeros(&[m, rank]);
    for i in 0..m {
        for k in 0..rank {
            *left.at_mut(i, k) = u.at(i, k) * sigma[k];
        }
    }
    let mut right = Tensor::zeros(&[rank, n]);
    for k in 0..rank {
        for j in 0..n {
            *right.at_mut(k, j) = v.at(j, k);
        }
    }
    Ok(LowRankFactors {
        left,
        right,
        rank,
        energy_retained: retained,
    })
}
