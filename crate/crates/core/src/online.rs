//! Online Block-ADMM: transient `z` per minibatch, scalar duals per block.
//!
//! Each step re-initializes `z_t` by a forward pass over the minibatch, runs a
//! reverse `z` sweep, one parameter step per block and then adds the residual
//! norm to each scalar dual. Nothing sample-sized survives between steps.

use std::time::Instant;

use crate::batch::{evaluate, per_block};
use crate::blocks::{block_forward, Block, BlockCache, BlockGrads};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::metrics::MetricsRecord;
use crate::optim::{OptimizerKind, ParamOptimizer};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which penalty couples `z_t` to its block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyForm {
    /// `β/2 (r + u)²`
    NormPlusDual,
    /// `β/2 (r² + u)`
    SquaredPlusDual,
}

impl PenaltyForm {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "norm-plus-dual" => Some(Self::NormPlusDual),
            "squared-plus-dual" => Some(Self::SquaredPlusDual),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::NormPlusDual => "norm-plus-dual",
            Self::SquaredPlusDual => "squared-plus-dual",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineConfig {
    pub beta: Vec<f64>,
    pub z_lr: Vec<f64>,
    pub theta_lr: Vec<f64>,
    pub z_steps: usize,
    pub batch_size: usize,
    pub z_optimizer: OptimizerKind,
    pub theta_optimizer: OptimizerKind,
    pub form: PenaltyForm,
    pub loss: LossKind,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            beta: vec![1.0],
            z_lr: vec![1e-2],
            theta_lr: vec![1e-3],
            z_steps: 1,
            batch_size: 64,
            z_optimizer: OptimizerKind::Adam,
            theta_optimizer: OptimizerKind::Adam,
            form: PenaltyForm::NormPlusDual,
            loss: LossKind::SoftmaxCrossEntropy,
            epochs: 10,
            seed: 0,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self, blocks: usize) -> Result<()> {
        for (name, v) in [("beta", &self.beta), ("z_lr", &self.z_lr), ("theta_lr", &self.theta_lr)] {
            if v.len() != 1 && v.len() != blocks {
                return Err(Error::Config(format!("{name} has {} entries for {blocks} blocks", v.len())));
            }
            if let Some(x) = v.iter().find(|x| !(**x > 0.0) || !x.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {x}")));
            }
        }
        if self.batch_size == 0 || self.z_steps == 0 {
            return Err(Error::Config("batch_size and z_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineCouplingState {
    pub u: Vec<f64>,
    pub beta: Vec<f64>,
    /// Largest number of coupling floats (transient `z` plus duals) held at once.
    pub peak_elements: usize,
}

impl OnlineCouplingState {
    pub fn new(blocks: usize, config: &OnlineConfig) -> Self {
        Self {
            u: vec![0.0; blocks],
            beta: (0..blocks).map(|t| per_block(&config.beta, t)).collect(),
            peak_elements: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OnlinePenaltyEval {
    pub value: f64,
    pub residual: f64,
    pub grad_z: Tensor,
    pub grad_prev: Tensor,
    pub grad_theta: BlockGrads,
}

/// Multiplier `c` with `∇_{z_t} penalty = c·(z_t − out)`.
fn penalty_scale(form: PenaltyForm, beta: f64, r: f64, u: f64) -> f64 {
    match form {
        PenaltyForm::NormPlusDual if r > 0.0 => beta * (r + u) / r,
        // gradient of the norm taken as 0 at r = 0
        PenaltyForm::NormPlusDual => 0.0,
        PenaltyForm::SquaredPlusDual => beta,
    }
}

pub fn penalty_value(form: PenaltyForm, beta: f64, r: f64, u: f64) -> f64 {
    match form {
        PenaltyForm::NormPlusDual => 0.5 * beta * (r + u) * (r + u),
        PenaltyForm::SquaredPlusDual => 0.5 * beta * (r * r + u),
    }
}

/// Penalty of `z_t` against `block(z_prev)` with `r = ‖z_t − block(z_prev)‖_F`.
pub fn online_penalty(
    z_t: &Tensor,
    z_prev: &Tensor,
    u: f64,
    block: &Block,
    beta: f64,
    form: PenaltyForm,
) -> Result<OnlinePenaltyEval> {
    let (out, cache) = block_forward(block, z_prev)?;
    let diff = z_t.sub(&out)?;
    let r = diff.frob_norm();
    let c = penalty_scale(form, beta, r, u);
    let (g, gi) = block.backward(&cache, &diff.scale(-c), true, true)?;
    Ok(OnlinePenaltyEval {
        value: penalty_value(form, beta, r, u),
        residual: r,
        grad_z: diff.scale(c),
        grad_prev: gi.expect("requested"),
        grad_theta: g.expect("requested"),
    })
}

/// Result of one online step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Loss of the forward-pass prediction before any update.
    pub loss: f64,
    /// `Σ_t r_t` measured by the dual update.
    pub residual: f64,
}

/// One online step over the columns of `x` (a sample or a minibatch).
pub fn online_sample_step(
    x: &Tensor,
    y: &Tensor,
    blocks: &mut [Block],
    state: &mut OnlineCouplingState,
    config: &OnlineConfig,
) -> Result<StepReport> {
    let nb = blocks.len();
    if state.u.len() != nb {
        return Err(Error::InvalidArgument(format!("state has {} duals for {nb} blocks", state.u.len())));
    }
    let form = config.form;
    let mut z = Vec::with_capacity(nb);
    let mut h = x.clone();
    for b in blocks.iter() {
        h = b.forward(&h)?;
        z.push(h.clone());
    }
    let held = z.iter().map(Tensor::len).sum::<usize>() + nb;
    state.peak_elements = state.peak_elements.max(held);
    let loss = config.loss.value(y, &z[nb - 1])?;

    let mut opts: Vec<ParamOptimizer> = z.iter().map(|zt| ParamOptimizer::new(config.z_optimizer, zt.shape())).collect();
    for _ in 0..config.z_steps {
        let mut next: Option<(Tensor, BlockCache)> = None;
        for t in (0..nb).rev() {
            let prev = if t == 0 { x } else { &z[t - 1] };
            let (own_out, own_cache) = block_forward(&blocks[t], prev)?;
            let diff = z[t].sub(&own_out)?;
            let mut g = diff.scale(penalty_scale(form, state.beta[t], diff.frob_norm(), state.u[t]));
            match &next {
                None => g.axpy(1.0, &config.loss.grad(y, &z[t])?)?,
                Some((out, cache)) => {
                    let s = t + 1;
                    let d = z[s].sub(out)?;
                    let c = penalty_scale(form, state.beta[s], d.frob_norm(), state.u[s]);
                    let (_, gi) = blocks[s].backward(cache, &d.scale(-c), false, true)?;
                    g.axpy(1.0, &gi.expect("requested"))?;
                }
            }
            opts[t].step(&mut z[t], &g, per_block(&config.z_lr, t))?;
            next = Some((own_out, own_cache));
        }
    }

    for t in 0..nb {
        if !blocks[t].has_params() {
            continue;
        }
        let prev = if t == 0 { x } else { &z[t - 1] };
        let (out, cache) = block_forward(&blocks[t], prev)?;
        let diff = z[t].sub(&out)?;
        let c = penalty_scale(form, state.beta[t], diff.frob_norm(), state.u[t]);
        let (g, _) = blocks[t].backward(&cache, &diff.scale(-c), true, false)?;
        blocks[t].apply_grads(&g.expect("requested"), per_block(&config.theta_lr, t))?;
    }

    let mut residual = 0.0;
    for t in 0..nb {
        let prev = if t == 0 { x } else { &z[t - 1] };
        let r = z[t].sub(&blocks[t].forward(prev)?)?.frob_norm();
        state.u[t] += r;
        residual += r;
    }
    if !residual.is_finite() || state.u.iter().any(|u| !u.is_finite()) {
        return Err(Error::Numeric("online coupling residual is not finite".into()));
    }
    Ok(StepReport { loss, residual })
}

#[derive(Debug, Clone)]
pub struct OnlineRun {
    pub blocks: Vec<Block>,
    pub state: OnlineCouplingState,
    pub metrics: Vec<MetricsRecord>,
}

/// Shuffled minibatch passes over `data`, one metrics row per epoch. The
/// residual column is the mean of `Σ_t r_t` over the epoch's steps.
pub fn online_train(mut blocks: Vec<Block>, data: &Dataset, test: Option<&Dataset>, config: &OnlineConfig) -> Result<OnlineRun> {
    config.validate(blocks.len())?;
    for b in &mut blocks {
        if b.optimizer_kind() != config.theta_optimizer {
            b.set_optimizer(config.theta_optimizer);
        }
    }
    let mut rng = Rng::new(config.seed).fork(0x20);
    let mut state = OnlineCouplingState::new(blocks.len(), config);
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut elapsed = 0.0;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let perm = rng.permutation(data.len());
        let mut total = 0.0;
        let mut steps = 0;
        for batch in perm.chunks(config.batch_size) {
            let xb = data.x.select_columns(batch)?;
            let yb = data.y.select_columns(batch)?;
            total += online_sample_step(&xb, &yb, &mut blocks, &mut state, config)?.residual;
            steps += 1;
        }
        elapsed += start.elapsed().as_secs_f64();
        let (train_loss, test_accuracy) = evaluate(&blocks, data, test, config.loss)?;
        metrics.push(MetricsRecord {
            epoch,
            wall_clock_seconds: elapsed,
            train_loss,
            test_accuracy,
            total_coupling_residual: Some(total / steps as f64),
            rho: None,
        });
    }
    Ok(OnlineRun { blocks, state, metrics })
}

/// Coupling floats held by batch mode: `Z_t` and `U_t` for every block over `n` samples.
pub fn batch_coupling_elements(output_dims: &[usize], n: usize) -> usize {
    2 * output_dims.iter().sum::<usize>() * n
}

/// Coupling floats held by online mode: transient `z_t` over one batch plus one dual per block.
pub fn online_coupling_elements(output_dims: &[usize], batch: usize) -> usize {
    output_dims.iter().sum::<usize>() * batch + output_dims.len()
}
