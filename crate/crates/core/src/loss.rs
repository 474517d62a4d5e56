//! Training objectives and the accuracy metric. Targets and predictions are
//! `[classes, samples]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    SoftmaxCrossEntropy,
}

impl LossKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Some(Self::Mse),
            "ce" | "cross-entropy" | "softmax-ce" => Some(Self::SoftmaxCrossEntropy),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Mse => "mse",
            Self::SoftmaxCrossEntropy => "ce",
        }
    }

    pub fn value(self, y: &Tensor, z: &Tensor) -> Result<f64> {
        match self {
            Self::Mse => mse_loss(y, z),
            Self::SoftmaxCrossEntropy => softmax_ce_loss(y, z),
        }
    }

    pub fn grad(self, y: &Tensor, z: &Tensor) -> Result<Tensor> {
        match self {
            Self::Mse => mse_grad(y, z),
            Self::SoftmaxCrossEntropy => softmax_ce_grad(y, z),
        }
    }
}

fn check_pair(y: &Tensor, z: &Tensor, op: &'static str) -> Result<usize> {
    if y.shape() != z.shape() {
        return Err(Error::shape(op, y.shape(), z.shape()));
    }
    if y.rank() != 2 {
        return Err(Error::InvalidArgument(format!("{op} expects [classes, samples] matrices")));
    }
    Ok(y.cols())
}

/// `‖Y − Z‖²_F / 2N`
pub fn mse_loss(y: &Tensor, z: &Tensor) -> Result<f64> {
    let n = check_pair(y, z, "mse_loss")?;
    let ss: f64 = y.data().iter().zip(z.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(ss / (2.0 * n as f64))
}

/// `(Z − Y) / N`
pub fn mse_grad(y: &Tensor, z: &Tensor) -> Result<Tensor> {
    let n = check_pair(y, z, "mse_grad")? as f64;
    z.zip_map(y, |zi, yi| (zi - yi) / n)
}

fn check_one_hot(y: &Tensor) -> Result<()> {
    for j in 0..y.cols() {
        let mut ones = 0;
        for i in 0..y.rows() {
            match y.get(i, j) {
                v if v == 1.0 => ones += 1,
                v if v == 0.0 => {}
                v => {
                    return Err(Error::InvalidArgument(format!(
                        "target column {j} is not one-hot (entry {v})"
                    )))
                }
            }
        }
        if ones != 1 {
            return Err(Error::InvalidArgument(format!(
                "target column {j} has {ones} hot entries"
            )));
        }
    }
    Ok(())
}

/// Column-wise softmax with max-shift.
pub fn softmax_columns(z: &Tensor) -> Tensor {
    let (c, n) = (z.rows(), z.cols());
    let mut out = z.clone();
    for j in 0..n {
        let max = (0..c).map(|i| z.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for i in 0..c {
            let e = (z.get(i, j) - max).exp();
            out.set(i, j, e);
            total += e;
        }
        for i in 0..c {
            out.set(i, j, out.get(i, j) / total);
        }
    }
    out
}

/// Mean over columns of `−log softmax(Z)[true class]`.
pub fn softmax_ce_loss(y: &Tensor, z: &Tensor) -> Result<f64> {
    let n = check_pair(y, z, "softmax_ce_loss")?;
    check_one_hot(y)?;
    let c = z.rows();
    let mut total = 0.0;
    for j in 0..n {
        let max = (0..c).map(|i| z.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..c).map(|i| (z.get(i, j) - max).exp()).sum::<f64>().ln();
        let k = (0..c).find(|&i| y.get(i, j) == 1.0).expect("one-hot");
        total += lse - z.get(k, j);
    }
    Ok(total / n as f64)
}

/// `(softmax(Z) − Y) / N`
pub fn softmax_ce_grad(y: &Tensor, z: &Tensor) -> Result<Tensor> {
    let n = check_pair(y, z, "softmax_ce_grad")? as f64;
    check_one_hot(y)?;
    softmax_columns(z).zip_map(y, |p, t| (p - t) / n)
}

/// Index of the largest entry in column `j`; ties go to the lowest index.
pub fn argmax_column(z: &Tensor, j: usize) -> usize {
    let mut best = 0;
    for i in 1..z.rows() {
        if z.get(i, j) > z.get(best, j) {
            best = i;
        }
    }
    best
}

/// Fraction of columns whose argmax agrees.
pub fn accuracy(y: &Tensor, z: &Tensor) -> Result<f64> {
    let n = check_pair(y, z, "accuracy")?;
    let hits = (0..n).filter(|&j| argmax_column(y, j) == argmax_column(z, j)).count();
    Ok(hits as f64 / n as f64)
}
