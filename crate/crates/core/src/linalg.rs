//! Dense SPD solves by Cholesky factorization.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower-triangular `L` with `L Lᵀ = a`. Fails if `a` is not numerically SPD.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.rank() != 2 || a.cols() != n {
        return Err(Error::shape("cholesky", a.shape(), &[n, n]));
    }
    let mut l = vec![0.0; n * n];
    let src = a.data();
    for j in 0..n {
        let (row_j, _) = l.split_at(j * n + j);
        let rj = &row_j[j * n..];
        let mut d = src[j * n + j] - rj.iter().map(|v| v * v).sum::<f64>();
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Numeric(format!("matrix is not positive definite (pivot {j} = {d:e})")));
        }
        d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let (head, tail) = l.split_at_mut(i * n);
            let ri = &tail[..j];
            let rj = &head[j * n..j * n + j];
            let s: f64 = ri.iter().zip(rj).map(|(x, y)| x * y).sum();
            tail[j] = (src[i * n + j] - s) / d;
        }
    }
    Tensor::matrix(n, n, l)
}

/// Solves `L Lᵀ X = B` given the factor from [`cholesky`].
pub fn cholesky_solve(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = l.rows();
    if b.rows() != n {
        return Err(Error::shape("cholesky_solve", l.shape(), b.shape()));
    }
    let k = b.cols();
    let ld = l.data();
    let mut x = b.clone();
    let xd = x.data_mut();
    // forward: L y = b, row by row over all right-hand sides at once
    for i in 0..n {
        let (done, rest) = xd.split_at_mut(i * k);
        let row = &mut rest[..k];
        for p in 0..i {
            let c = ld[i * n + p];
            if c != 0.0 {
                for (r, &y) in row.iter_mut().zip(&done[p * k..p * k + k]) {
                    *r -= c * y;
                }
            }
        }
        let d = ld[i * n + i];
        row.iter_mut().for_each(|r| *r /= d);
    }
    // backward: Lᵀ x = y
    for i in (0..n).rev() {
        let (head, tail) = xd.split_at_mut((i + 1) * k);
        let row = &mut head[i * k..];
        for p in i + 1..n {
            let c = ld[p * n + i];
            if c != 0.0 {
                for (r, &y) in row.iter_mut().zip(&tail[(p - i - 1) * k..(p - i) * k]) {
                    *r -= c * y;
                }
            }
        }
        let d = ld[i * n + i];
        row.iter_mut().for_each(|r| *r /= d);
    }
    Ok(x)
}

/// `a⁻¹ b` for symmetric `a`. If the factorization fails, retries with a
/// growing diagonal shift and returns the shift that was needed (0 when none).
pub fn solve_spd(a: &Tensor, b: &Tensor) -> Result<(Tensor, f64)> {
    match cholesky(a) {
        Ok(l) => Ok((cholesky_solve(&l, b)?, 0.0)),
        Err(Error::Numeric(_)) => {
            let n = a.rows();
            let scale = (0..n).map(|i| a.get(i, i).abs()).fold(0.0, f64::max).max(1.0);
            let mut shift = 1e-12 * scale;
            for _ in 0..12 {
                let mut shifted = a.clone();
                for i in 0..n {
                    shifted.set(i, i, a.get(i, i) + shift);
                }
                if let Ok(l) = cholesky(&shifted) {
                    return Ok((cholesky_solve(&l, b)?, shift));
                }
                shift *= 100.0;
            }
            Err(Error::Numeric("regularized solve failed".into()))
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{matmul, matmul_nt};

    fn spd(n: usize, rng: &mut Rng) -> Tensor {
        let g = rng.normal_tensor(&[n, n + 2], 1.0);
        let mut a = matmul_nt(&g, &g).unwrap();
        for i in 0..n {
            a.set(i, i, a.get(i, i) + 0.1);
        }
        a
    }

    #[test]
    fn factor_reconstructs() {
        let mut rng = Rng::new(1);
        let a = spd(7, &mut rng);
        let l = cholesky(&a).unwrap();
        for i in 0..7 {
            for j in i + 1..7 {
                assert_eq!(l.get(i, j), 0.0);
            }
        }
        assert!(matmul_nt(&l, &l).unwrap().sub(&a).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn solve_residual() {
        let mut rng = Rng::new(2);
        let a = spd(9, &mut rng);
        let b = rng.normal_tensor(&[9, 4], 1.0);
        let (x, shift) = solve_spd(&a, &b).unwrap();
        assert_eq!(shift, 0.0);
        assert!(matmul(&a, &x).unwrap().sub(&b).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn singular_falls_back() {
        let a = Tensor::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert!(cholesky(&a).is_err());
        let (x, shift) = solve_spd(&a, &Tensor::column_vector(&[2.0, 2.0])).unwrap();
        assert!(shift > 0.0);
        assert!(x.all_finite());
        assert!(matmul(&a, &x).unwrap().sub(&Tensor::column_vector(&[2.0, 2.0])).unwrap().max_abs() < 1e-6);
    }
}
