//! Datasets: IDX loading, synthetic generators and stratified subsets.

pub mod idx;
pub mod synth;

use crate::error::{Error, Result};
use crate::loss::argmax_column;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Inputs `x: [features, N]` with one-hot (or regression) targets `y: [classes, N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Tensor,
    pub name: String,
    pub split: Split,
}

impl Dataset {
    pub fn new(x: Tensor, y: Tensor, name: impl Into<String>, split: Split) -> Result<Self> {
        if x.rank() != 2 || y.rank() != 2 || x.cols() != y.cols() {
            return Err(Error::shape("dataset", x.shape(), y.shape()));
        }
        Ok(Self {
            x,
            y,
            name: name.into(),
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.x.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> usize {
        self.x.rows()
    }

    pub fn classes(&self) -> usize {
        self.y.rows()
    }

    pub fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|j| argmax_column(&self.y, j)).collect()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            x: self.x.select_columns(indices)?,
            y: self.y.select_columns(indices)?,
            name: self.name.clone(),
            split: self.split,
        })
    }

    /// Seeded subset with (as near as possible) equal counts per class.
    /// Classes too small for their share give their remainder to the others.
    pub fn stratified_subset(&self, size: usize, rng: &mut Rng) -> Result<Dataset> {
        if size == 0 || size > self.len() {
            return Err(Error::InvalidArgument(format!(
                "subset of {size} requested from {} samples",
                self.len()
            )));
        }
        if size == self.len() {
            return Ok(self.clone());
        }
        let labels = self.labels();
        let classes = self.classes();
        let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
        for (j, &l) in labels.iter().enumerate() {
            pools[l].push(j);
        }
        for p in &mut pools {
            rng.shuffle(p);
        }
        let mut taken = vec![0usize; classes];
        let mut remaining = size;
        while remaining > 0 {
            let open: Vec<usize> = (0..classes).filter(|&c| taken[c] < pools[c].len()).collect();
            let share = (remaining / open.len()).max(1);
            for &c in &open {
                if remaining == 0 {
                    break;
                }
                let add = share.min(pools[c].len() - taken[c]).min(remaining);
                taken[c] += add;
                remaining -= add;
            }
        }
        let mut chosen: Vec<usize> = (0..classes).flat_map(|c| pools[c][..taken[c]].iter().copied()).collect();
        rng.shuffle(&mut chosen);
        self.select(&chosen)
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
    }
    let n = labels.len();
    let mut y = Tensor::zeros(&[classes, n.max(1)]);
    for (j, &l) in labels.iter().enumerate() {
        y.set(l, j, 1.0);
    }
    Ok(y)
}
