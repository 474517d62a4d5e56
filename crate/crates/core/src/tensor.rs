//! Dense row-major `f64` tensors.
//!
//! Matrices are rank-2 tensors `[rows, cols]`. Throughout the crate samples are
//! stored as columns, so a batch of `N` vectors of width `d` is a `[d, N]`
//! matrix.
//!
//! Matrix products go through the `matrixmultiply` kernels. With the `parallel`
//! feature, large products are split into row panels that run on the rayon pool.
//! Every output entry is accumulated by the same kernel in the same order either
//! way, so the serial and parallel paths agree bit for bit.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} implies {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::matrix(rows.len(), cols, data).expect("non-empty rows")
    }

    /// Column vector `[n, 1]`.
    pub fn column_vector(values: &[f64]) -> Self {
        Self::matrix(values.len(), 1, values.to_vec()).expect("non-empty vector")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n]).expect("positive dimensions")
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::matrix(rows, cols, data).expect("positive dimensions")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a rank-2 tensor. Rank-1 tensors count as a single column.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let cols = self.cols();
        self.data[i * cols + j] = value;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out).expect("same element count")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        self.data.iter_mut().for_each(|x| *x = f(*x));
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        let c = self.cols();
        (0..self.rows()).map(|i| self.data[i * c + j]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        let c = self.cols();
        debug_assert_eq!(values.len(), self.rows());
        for (i, &v) in values.iter().enumerate() {
            self.data[i * c + j] = v;
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Gathers the listed columns into a new `[rows, indices.len()]` matrix.
    pub fn select_columns(&self, indices: &[usize]) -> Result<Tensor> {
        let (r, c) = (self.rows(), self.cols());
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty column selection".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&j| j >= c) {
            return Err(Error::InvalidArgument(format!(
                "column {bad} out of range for {c} columns"
            )));
        }
        let mut out = Vec::with_capacity(r * indices.len());
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            out.extend(indices.iter().map(|&j| row[j]));
        }
        Tensor::matrix(r, indices.len(), out)
    }

    /// Sums over columns, giving one value per row.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows()).map(|i| self.row(i).iter().sum()).collect()
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("vstack of nothing".into()))?
            .cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.cols() != cols {
                return Err(Error::shape("vstack", parts[0].shape(), p.shape()));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Tensor::matrix(rows, cols, data)
    }

    fn check_same(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub(crate) fn ensure_shape(&self, shape: &[usize], op: &'static str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(op, &self.shape, shape));
        }
        Ok(())
    }

    fn ensure_matrix(&self, op: &'static str) -> Result<()> {
        if self.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "{op} expects a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// Strided view of a matrix operand, as taken by the gemm kernels.
#[derive(Clone, Copy)]
struct Operand<'a> {
    data: &'a [f64],
    row_stride: usize,
    col_stride: usize,
}

/// Below this many multiply-adds a product is never split across threads.
#[cfg(feature = "parallel")]
const PARALLEL_MIN_WORK: usize = 1 << 18;
#[cfg(feature = "parallel")]
const PANEL_ROWS: usize = 32;

fn gemm_serial(m: usize, k: usize, n: usize, a: Operand<'_>, b: Operand<'_>, c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the operand strides describe in-bounds layouts of `a.data` and
    // `b.data` for an m×k and k×n matrix, and `c` holds exactly m×n entries.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(feature = "parallel")]
fn gemm_parallel(_m: usize, k: usize, n: usize, a: Operand<'_>, b: Operand<'_>, c: &mut [f64]) {
    c.par_chunks_mut(PANEL_ROWS * n)
        .enumerate()
        .for_each(|(panel, chunk)| {
            let row0 = panel * PANEL_ROWS;
            let rows = chunk.len() / n;
            let offset = row0 * a.row_stride;
            let sub = Operand {
                data: &a.data[offset..],
                ..a
            };
            gemm_serial(rows, k, n, sub, b, chunk);
        });
}

fn gemm(m: usize, k: usize, n: usize, a: Operand<'_>, b: Operand<'_>) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    #[cfg(feature = "parallel")]
    {
        if m * n * k >= PARALLEL_MIN_WORK && m > PANEL_ROWS {
            gemm_parallel(m, k, n, a, b, &mut c);
            return c;
        }
    }
    gemm_serial(m, k, n, a, b, &mut c);
    c
}

fn row_major(t: &Tensor) -> Operand<'_> {
    Operand {
        data: &t.data,
        row_stride: t.cols(),
        col_stride: 1,
    }
}

fn transposed(t: &Tensor) -> Operand<'_> {
    Operand {
        data: &t.data,
        row_stride: 1,
        col_stride: t.cols(),
    }
}

/// `a · b` for `a: [m, k]`, `b: [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.ensure_matrix("matmul")?;
    b.ensure_matrix("matmul")?;
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    Tensor::matrix(m, n, gemm(m, k, n, row_major(a), row_major(b)))
}

/// `aᵀ · b` for `a: [k, m]`, `b: [k, n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.ensure_matrix("matmul_tn")?;
    b.ensure_matrix("matmul_tn")?;
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    Tensor::matrix(m, n, gemm(m, k, n, transposed(a), row_major(b)))
}

/// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.ensure_matrix("matmul_nt")?;
    b.ensure_matrix("matmul_nt")?;
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    if b.cols() != k {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    Tensor::matrix(m, n, gemm(m, k, n, row_major(a), transposed(b)))
}

/// Serial product regardless of the `parallel` feature.
pub fn matmul_serial(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.ensure_matrix("matmul")?;
    b.ensure_matrix("matmul")?;
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut c = vec![0.0; m * n];
    gemm_serial(m, k, n, row_major(a), row_major(b), &mut c);
    Tensor::matrix(m, n, c)
}

/// Row-panel parallel product, whatever the problem size.
#[cfg(feature = "parallel")]
pub fn matmul_parallel(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.ensure_matrix("matmul")?;
    b.ensure_matrix("matmul")?;
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut c = vec![0.0; m * n];
    gemm_parallel(m, k, n, row_major(a), row_major(b), &mut c);
    Tensor::matrix(m, n, c)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// 1 where `x > 0`, else 0. The subgradient at 0 is taken as 0.
pub fn relu_mask(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

pub fn frob_norm(x: &Tensor) -> f64 {
    x.frob_norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        Tensor::from_fn(m, n, |i, j| (0..k).map(|p| a.get(i, p) * b.get(p, j)).sum())
    }

    #[test]
    fn identity_times_matrix() {
        let b = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
    }

    #[test]
    fn one_by_one() {
        let c = matmul(&Tensor::from_rows(&[&[2.0]]), &Tensor::from_rows(&[&[3.0]])).unwrap();
        assert_eq!(c.data(), &[6.0]);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = Rng::new(3);
        let a = rng.normal_tensor(&[3, 2], 1.0);
        let b = rng.normal_tensor(&[2, 4], 1.0);
        let c = matmul(&a, &b).unwrap();
        let want = naive(&a, &b);
        for (x, y) in c.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_variants_agree() {
        let mut rng = Rng::new(4);
        let a = rng.normal_tensor(&[5, 3], 1.0);
        let b = rng.normal_tensor(&[5, 7], 1.0);
        let tn = matmul_tn(&a, &b).unwrap();
        let want = naive(&a.transpose(), &b);
        assert!(tn.sub(&want).unwrap().max_abs() < 1e-12);
        let c = rng.normal_tensor(&[7, 3], 1.0);
        let nt = matmul_nt(&a, &c).unwrap();
        let want = naive(&a, &c.transpose());
        assert!(nt.sub(&want).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_is_bitwise_serial() {
        let mut rng = Rng::new(5);
        let a = rng.normal_tensor(&[131, 77], 1.0);
        let b = rng.normal_tensor(&[77, 45], 1.0);
        let s = matmul_serial(&a, &b).unwrap();
        let p = matmul_parallel(&a, &b).unwrap();
        assert_eq!(s.data(), p.data());
    }

    #[test]
    fn relu_and_mask() {
        let x = Tensor::column_vector(&[-1.0, 2.0, 0.0]);
        assert_eq!(relu(&x).data(), &[0.0, 2.0, 0.0]);
        assert_eq!(relu_mask(&x).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn frobenius() {
        assert_eq!(frob_norm(&Tensor::zeros(&[3, 3])), 0.0);
        assert_eq!(frob_norm(&Tensor::from_rows(&[&[3.0, 4.0]])), 5.0);
        let mut rng = Rng::new(6);
        let x = rng.normal_tensor(&[5, 5], 1.0);
        let direct: f64 = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((frob_norm(&x) - direct).abs() <= 1e-12 * direct);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn select_columns_gathers() {
        let t = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let s = t.select_columns(&[2, 0]).unwrap();
        assert_eq!(s.data(), &[3.0, 1.0, 6.0, 4.0]);
        assert!(t.select_columns(&[]).is_err());
        assert!(t.select_columns(&[3]).is_err());
    }
}
