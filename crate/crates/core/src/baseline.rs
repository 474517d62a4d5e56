//! End-to-end backprop baseline: the whole network as a single block.

use std::time::Instant;

use crate::blocks::{block_backward, block_forward, Block, BlockGrads, Layer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{accuracy, LossKind};
use crate::metrics::MetricsRecord;
use crate::optim::OptimizerKind;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub loss: LossKind,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            lr: 5e-3,
            batch_size: 64,
            loss: LossKind::SoftmaxCrossEntropy,
            epochs: 10,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub model: Block,
    pub metrics: Vec<MetricsRecord>,
}

/// Loss and parameter gradients of the network on the columns in `batch`.
pub fn batch_grad(model: &Block, data: &Dataset, batch: &[usize], loss: LossKind) -> Result<(f64, BlockGrads)> {
    let x = data.x.select_columns(batch)?;
    let y = data.y.select_columns(batch)?;
    let (out, cache) = block_forward(model, &x)?;
    let value = loss.value(&y, &out)?;
    let (g, _) = block_backward(model, &cache, &loss.grad(&y, &out)?)?;
    Ok((value, g))
}

/// Minibatch SGD or Adam on the full network, one shuffled pass per epoch.
pub fn baseline_train(layers: Vec<Layer>, data: &Dataset, test: Option<&Dataset>, config: &BaselineConfig) -> Result<BaselineRun> {
    config.validate()?;
    let mut model = Block::new(0, layers)?;
    model.set_optimizer(config.optimizer);
    let mut rng = Rng::new(config.seed).fork(0x60);
    let n = data.len();
    let bs = config.batch_size.min(n);
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut elapsed = 0.0;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let perm = rng.permutation(n);
        for batch in perm.chunks(bs) {
            let (_, g) = batch_grad(&model, data, batch, config.loss)?;
            model.apply_grads(&g, config.lr)?;
        }
        elapsed += start.elapsed().as_secs_f64();
        let out = model.forward(&data.x)?;
        let train_loss = config.loss.value(&data.y, &out)?;
        if !train_loss.is_finite() {
            return Err(Error::Numeric(format!("baseline loss diverged at epoch {epoch}")));
        }
        let test_accuracy = match test {
            Some(t) => accuracy(&t.y, &model.forward(&t.x)?)?,
            None => accuracy(&data.y, &out)?,
        };
        metrics.push(MetricsRecord {
            epoch,
            wall_clock_seconds: elapsed,
            train_loss,
            test_accuracy,
            total_coupling_residual: None,
            rho: None,
        });
    }
    Ok(BaselineRun { model, metrics })
}
