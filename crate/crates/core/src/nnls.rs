//! Non-negative least squares by the Lawson–Hanson active-set method.
//!
//! Works on the normal equations (`G = AᵀA`, `h = Aᵀb`) so that many right-hand
//! sides can share one Gram matrix.

use crate::error::{Error, Result};
use crate::linalg::solve_spd;
use crate::par::map_indices;
use crate::tensor::{matmul_tn, Tensor};

pub const KKT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct NnlsSolution {
    pub x: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// `min ½xᵀGx − hᵀx` over `x ≥ 0` (equivalently `min ‖Ax − b‖` with `G = AᵀA`, `h = Aᵀb`).
pub fn nnls_gram(g: &Tensor, h: &[f64]) -> Result<NnlsSolution> {
    let k = h.len();
    if g.rank() != 2 || g.rows() != k || g.cols() != k {
        return Err(Error::shape("nnls_gram", g.shape(), &[k, k]));
    }
    let scale = h.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = KKT_TOL * scale;
    let cap = 10 * k.max(1);
    let mut x = vec![0.0; k];
    let mut passive = vec![false; k];
    let mut iterations = 0;
    let grad = |x: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|i| h[i] - (0..k).map(|j| g.get(i, j) * x[j]).sum::<f64>())
            .collect()
    };
    loop {
        let w = grad(&x);
        let candidate = (0..k)
            .filter(|&i| !passive[i] && w[i] > tol)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]));
        let Some(j) = candidate else {
            return Ok(NnlsSolution { x, converged: true, iterations });
        };
        if iterations >= cap {
            return Ok(NnlsSolution { x, converged: false, iterations });
        }
        iterations += 1;
        passive[j] = true;
        let mut first = true;
        loop {
            let idx: Vec<usize> = (0..k).filter(|&i| passive[i]).collect();
            let z = solve_passive(g, h, &idx)?;
            if first && z[idx.iter().position(|&i| i == j).expect("j is passive")] <= 0.0 {
                // the entering coordinate cannot move: gradient is within rounding of zero
                passive[j] = false;
                return Ok(NnlsSolution { x, converged: true, iterations });
            }
            first = false;
            if z.iter().all(|&v| v > 0.0) {
                for i in 0..k {
                    x[i] = 0.0;
                }
                for (&i, &v) in idx.iter().zip(&z) {
                    x[i] = v;
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (&i, &v) in idx.iter().zip(&z) {
                if v <= 0.0 {
                    alpha = alpha.min(x[i] / (x[i] - v));
                }
            }
            for (&i, &v) in idx.iter().zip(&z) {
                x[i] += alpha * (v - x[i]);
            }
            for &i in &idx {
                if x[i] <= 1e-15 * scale {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
}

fn solve_passive(g: &Tensor, h: &[f64], idx: &[usize]) -> Result<Vec<f64>> {
    let p = idx.len();
    let sub = Tensor::from_fn(p, p, |a, b| g.get(idx[a], idx[b]));
    let rhs = Tensor::from_fn(p, 1, |a, _| h[idx[a]]);
    Ok(solve_spd(&sub, &rhs)?.0.into_data())
}

/// `argmin ‖A x − b‖₂` subject to `x ≥ 0`.
pub fn nnls(a: &Tensor, b: &[f64]) -> Result<NnlsSolution> {
    if a.rank() != 2 || a.rows() != b.len() {
        return Err(Error::shape("nnls", a.shape(), &[b.len()]));
    }
    let g = matmul_tn(a, a)?;
    let bt = Tensor::matrix(b.len(), 1, b.to_vec())?;
    let h = matmul_tn(a, &bt)?.into_data();
    nnls_gram(&g, &h)
}

/// Column-wise NNLS sharing one Gram matrix: column `j` of the result solves
/// `min ½xᵀGx − h_jᵀx`, `x ≥ 0`. Also returns how many columns hit the cap.
pub fn nnls_columns(g: &Tensor, h: &Tensor) -> Result<(Tensor, usize)> {
    collect_columns(h, map_indices(h.cols(), |j| nnls_gram(g, &h.column(j))))
}

/// [`nnls_columns`] on the calling thread only.
pub fn nnls_columns_serial(g: &Tensor, h: &Tensor) -> Result<(Tensor, usize)> {
    collect_columns(h, (0..h.cols()).map(|j| nnls_gram(g, &h.column(j))).collect())
}

fn collect_columns(h: &Tensor, cols: Vec<Result<NnlsSolution>>) -> Result<(Tensor, usize)> {
    let (k, n) = (h.rows(), h.cols());
    let mut out = Tensor::zeros(&[k, n]);
    let mut capped = 0;
    for (j, sol) in cols.into_iter().enumerate() {
        let sol = sol?;
        capped += usize::from(!sol.converged);
        out.set_column(j, &sol.x);
    }
    Ok((out, capped))
}

/// Largest KKT violation of `x` for `min ½xᵀGx − hᵀx`, `x ≥ 0`: free coordinates
/// need zero gradient, bound ones a non-negative gradient.
pub fn kkt_violation(g: &Tensor, h: &[f64], x: &[f64]) -> f64 {
    let k = h.len();
    let mut worst = 0.0f64;
    for i in 0..k {
        let grad = (0..k).map(|j| g.get(i, j) * x[j]).sum::<f64>() - h[i];
        if x[i] < 0.0 {
            worst = worst.max(-x[i]);
        }
        worst = worst.max(if x[i] > 0.0 { grad.abs() } else { (-grad).max(0.0) });
    }
    worst
}
