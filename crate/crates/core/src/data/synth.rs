//! Small synthetic problems with known structure.

use crate::data::{one_hot, Dataset, Split};
use crate::error::{Error, Result};
use crate::loss::argmax_column;
use crate::rng::Rng;
use crate::tensor::{matmul, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    LinearTeacher,
    TwoMoonsLike,
    LowRankNonneg,
}

impl SynthKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear-teacher" => Some(Self::LinearTeacher),
            "two-moons-like" => Some(Self::TwoMoonsLike),
            "low-rank-nonneg" => Some(Self::LowRankNonneg),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::LinearTeacher => "linear-teacher",
            Self::TwoMoonsLike => "two-moons-like",
            Self::LowRankNonneg => "low-rank-nonneg",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub features: usize,
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    /// Only used by `LowRankNonneg`.
    pub rank: usize,
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            kind: SynthKind::LinearTeacher,
            features: 20,
            classes: 4,
            train: 500,
            test: 200,
            rank: 8,
            noise: 0.0,
        }
    }
}

/// Generated data plus the hidden factors when the kind has them.
#[derive(Debug, Clone)]
pub struct Synth {
    pub train: Dataset,
    pub test: Dataset,
    /// `M*` for low-rank data, the teacher weights for linear-teacher.
    pub factor: Option<Tensor>,
    /// `S*` over train then test columns (low-rank only).
    pub codes: Option<Tensor>,
}

fn split(x: Tensor, labels: &[usize], classes: usize, n_train: usize, name: &str) -> Result<(Dataset, Dataset)> {
    let n = x.cols();
    let y = one_hot(labels, classes)?;
    let all = Dataset::new(x, y, name, Split::Train)?;
    let train_idx: Vec<usize> = (0..n_train).collect();
    let test_idx: Vec<usize> = (n_train..n).collect();
    let train = all.select(&train_idx)?;
    let mut test = all.select(&test_idx)?;
    test.split = Split::Test;
    Ok((train, test))
}

fn argmax_labels(scores: &Tensor) -> Vec<usize> {
    (0..scores.cols()).map(|j| argmax_column(scores, j)).collect()
}

pub fn synth_gen(spec: &SynthSpec, rng: &mut Rng) -> Result<Synth> {
    if spec.train == 0 || spec.test == 0 || spec.classes < 2 {
        return Err(Error::Config("synthetic data needs train, test > 0 and at least 2 classes".into()));
    }
    let n = spec.train + spec.test;
    let name = spec.kind.name();
    match spec.kind {
        SynthKind::LinearTeacher => {
            let w = rng.normal_tensor(&[spec.classes, spec.features], 1.0);
            let x = rng.normal_tensor(&[spec.features, n], 1.0);
            let mut scores = matmul(&w, &x)?;
            if spec.noise > 0.0 {
                scores.axpy(1.0, &rng.normal_tensor(scores.shape(), spec.noise))?;
            }
            let (train, test) = split(x, &argmax_labels(&scores), spec.classes, spec.train, name)?;
            Ok(Synth {
                train,
                test,
                factor: Some(w),
                codes: None,
            })
        }
        SynthKind::TwoMoonsLike => {
            // interleaved half circles in the first two features, padded with noise
            if spec.features < 2 {
                return Err(Error::Config("two-moons-like needs at least 2 features".into()));
            }
            let mut x = rng.normal_tensor(&[spec.features, n], spec.noise.max(1e-3));
            let mut labels = Vec::with_capacity(n);
            for j in 0..n {
                let c = rng.below(spec.classes);
                let t = std::f64::consts::PI * rng.uniform(0.0, 1.0);
                let (ox, oy, sign) = if c % 2 == 0 { (0.0, 0.0, 1.0) } else { (1.0, 0.5, -1.0) };
                let shift = (c / 2) as f64 * 2.5;
                x.set(0, j, x.get(0, j) + ox + shift + t.cos());
                x.set(1, j, x.get(1, j) + oy + sign * t.sin());
                labels.push(c);
            }
            let (train, test) = split(x, &labels, spec.classes, spec.train, name)?;
            Ok(Synth {
                train,
                test,
                factor: None,
                codes: None,
            })
        }
        SynthKind::LowRankNonneg => {
            if spec.rank == 0 || spec.rank > spec.features {
                return Err(Error::Config(format!(
                    "rank {} must lie in 1..={}",
                    spec.rank, spec.features
                )));
            }
            let m = rng.normal_tensor(&[spec.features, spec.rank], 1.0).map(f64::abs);
            // about half the code entries are exactly zero
            let mut s = Tensor::zeros(&[spec.rank, n]);
            for v in s.data_mut() {
                let u = rng.uniform(-1.0, 1.0);
                *v = u.max(0.0);
            }
            let teacher = rng.normal_tensor(&[spec.classes, spec.rank], 1.0);
            let mut centered = s.clone();
            centered.map_inplace(|v| v - 0.25);
            let labels = argmax_labels(&matmul(&teacher, &centered)?);
            let x = matmul(&m, &s)?;
            let (train, test) = split(x, &labels, spec.classes, spec.train, name)?;
            Ok(Synth {
                train,
                test,
                factor: Some(m),
                codes: Some(s),
            })
        }
    }
}
