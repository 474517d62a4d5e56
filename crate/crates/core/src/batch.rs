//! Batch-mode Block-ADMM.
//!
//! Every block output is a free variable `Z_t` over all `N` samples, tied to
//! the block by `β_t/2 ‖Z_t − block_t(Z_{t−1}) + U_t‖²_F`. One cycle runs
//! `primal_steps` sweeps of
//!
//! 1. a step on `Z_T` along `∇(J(Y, Z_T) + penalty_T)`,
//! 2. steps on `Z_{T−1}, …, Z_1` (reverse order, each seeing the freshly
//!    updated `Z_{t+1}`),
//! 3. minibatch steps on every block's parameters against its own penalty,
//!
//! followed by the exact dual update `U_t += Z_t − block_t(Z_{t−1})`.

use std::time::Instant;

use crate::blocks::{block_forward, straight_through_forward, Block, BlockCache, BlockGrads};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{accuracy, LossKind};
use crate::metrics::MetricsRecord;
use crate::optim::{OptimizerKind, ParamOptimizer};
use crate::rng::{init_uniform, Rng};
use crate::tensor::Tensor;

/// How the Z and Θ updates are repeated within one cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimalRepeat {
    /// Repeat the whole Z-then-Θ sweep `primal_steps` times.
    FullSweep,
    /// Repeat only the Z sweep, then run the Θ updates once.
    ZOnly,
}

impl PrimalRepeat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" | "full-sweep" => Some(Self::FullSweep),
            "z" | "z-only" => Some(Self::ZOnly),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::FullSweep => "full-sweep",
            Self::ZOnly => "z-only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DualInit {
    Zero,
    Uniform(f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchAdmmConfig {
    /// Penalty per block; a single entry applies to all blocks.
    pub beta: Vec<f64>,
    /// Z learning rates (ζ_t), same broadcasting rule.
    pub z_lr: Vec<f64>,
    /// Θ learning rates (η_t), same broadcasting rule.
    pub theta_lr: Vec<f64>,
    pub primal_steps: usize,
    pub repeat: PrimalRepeat,
    pub batch_size: usize,
    /// Θ minibatch steps per sweep; `None` means one pass over the shuffled columns.
    pub theta_steps: Option<usize>,
    pub z_optimizer: OptimizerKind,
    pub theta_optimizer: OptimizerKind,
    pub dual_init: DualInit,
    pub loss: LossKind,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for BatchAdmmConfig {
    fn default() -> Self {
        Self {
            beta: vec![1.0],
            z_lr: vec![1e-2],
            theta_lr: vec![1e-3],
            primal_steps: 3,
            repeat: PrimalRepeat::FullSweep,
            batch_size: 64,
            theta_steps: None,
            z_optimizer: OptimizerKind::Adam,
            theta_optimizer: OptimizerKind::Adam,
            dual_init: DualInit::Uniform(0.0, 1e-4),
            loss: LossKind::SoftmaxCrossEntropy,
            epochs: 10,
            seed: 0,
        }
    }
}

pub(crate) fn per_block(values: &[f64], t: usize) -> f64 {
    if values.len() == 1 {
        values[0]
    } else {
        values[t]
    }
}

fn check_rates(name: &str, values: &[f64], blocks: usize) -> Result<()> {
    if values.len() != 1 && values.len() != blocks {
        return Err(Error::Config(format!(
            "{name} has {} entries for {blocks} blocks",
            values.len()
        )));
    }
    if let Some(v) = values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::Config(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

impl BatchAdmmConfig {
    pub fn validate(&self, blocks: usize) -> Result<()> {
        check_rates("beta", &self.beta, blocks)?;
        check_rates("z_lr", &self.z_lr, blocks)?;
        check_rates("theta_lr", &self.theta_lr, blocks)?;
        if self.primal_steps == 0 {
            return Err(Error::Config("primal_steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.theta_steps == Some(0) {
            return Err(Error::Config("theta_steps must be at least 1".into()));
        }
        if let DualInit::Uniform(lo, hi) = self.dual_init {
            if !(lo < hi) {
                return Err(Error::Config(format!("dual init range [{lo}, {hi}) is empty")));
            }
        }
        Ok(())
    }
}

/// Decoupling variables, scaled duals and penalties for every block.
/// `z[t]` is the output of block `t`; the input `X` plays the part of `Z_0`.
#[derive(Debug, Clone)]
pub struct CouplingState {
    pub z: Vec<Tensor>,
    pub u: Vec<Tensor>,
    pub beta: Vec<f64>,
    z_optim: Vec<ParamOptimizer>,
}

impl CouplingState {
    pub fn new(z: Vec<Tensor>, u: Vec<Tensor>, beta: Vec<f64>, z_optimizer: OptimizerKind) -> Result<Self> {
        if z.len() != u.len() || z.len() != beta.len() {
            return Err(Error::InvalidArgument(format!(
                "coupling state needs matching counts, got {} Z, {} U, {} beta",
                z.len(),
                u.len(),
                beta.len()
            )));
        }
        for (zt, ut) in z.iter().zip(&u) {
            if zt.shape() != ut.shape() {
                return Err(Error::shape("coupling_state", zt.shape(), ut.shape()));
            }
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0)) {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {b}")));
        }
        let z_optim = z.iter().map(|zt| ParamOptimizer::new(z_optimizer, zt.shape())).collect();
        Ok(Self { z, u, beta, z_optim })
    }

    pub fn blocks(&self) -> usize {
        self.z.len()
    }

    /// `Z_{t−1}`, with `Z_0 = X`.
    pub fn input_of<'a>(&'a self, x: &'a Tensor, t: usize) -> &'a Tensor {
        if t == 0 {
            x
        } else {
            &self.z[t - 1]
        }
    }

    /// Floats held for Z and U; the memory counter compared against online mode.
    pub fn element_count(&self) -> usize {
        self.z.iter().chain(&self.u).map(Tensor::len).sum()
    }

    /// One optimizer step on `Z_t` along `grad`.
    pub fn step_z(&mut self, t: usize, grad: &Tensor, lr: f64) -> Result<()> {
        self.z_optim[t].step(&mut self.z[t], grad, lr)
    }

    pub fn set_z_optimizer(&mut self, kind: OptimizerKind) {
        self.z_optim = self.z.iter().map(|zt| ParamOptimizer::new(kind, zt.shape())).collect();
    }
}

/// Value and gradients of one coupling penalty.
#[derive(Debug, Clone)]
pub struct PenaltyEval {
    pub value: f64,
    pub grad_z: Tensor,
    pub grad_prev: Tensor,
    pub grad_theta: BlockGrads,
}

/// `β/2 ‖Z_t − block(Z_prev) + U_t‖²_F` with gradients in `Z_t`, `Z_prev` and
/// the block parameters.
pub fn coupling_penalty(z_t: &Tensor, z_prev: &Tensor, u_t: &Tensor, block: &Block, beta: f64) -> Result<PenaltyEval> {
    let (out, cache) = block_forward(block, z_prev)?;
    if out.shape() != z_t.shape() {
        return Err(Error::shape("coupling_penalty", out.shape(), z_t.shape()));
    }
    if u_t.shape() != z_t.shape() {
        return Err(Error::shape("coupling_penalty", u_t.shape(), z_t.shape()));
    }
    let resid = residual_plus_dual(z_t, &out, u_t);
    let value = 0.5 * beta * resid.sum_sq();
    let grad_z = resid.scale(beta);
    let upstream = resid.scale(-beta);
    let (g, gi) = block.backward(&cache, &upstream, true, true)?;
    Ok(PenaltyEval {
        value,
        grad_z,
        grad_prev: gi.expect("requested"),
        grad_theta: g.expect("requested"),
    })
}

/// `Z − out + U`
pub(crate) fn residual_plus_dual(z: &Tensor, out: &Tensor, u: &Tensor) -> Tensor {
    let mut r = z.clone();
    for ((r, &o), &u) in r.data_mut().iter_mut().zip(out.data()).zip(u.data()) {
        *r = *r - o + u;
    }
    r
}

/// Forward pass over `X` to set every `Z_t`; duals drawn per `config.dual_init`.
pub fn init_coupling(blocks: &[Block], x: &Tensor, config: &BatchAdmmConfig, rng: &mut Rng) -> Result<CouplingState> {
    if blocks.is_empty() {
        return Err(Error::InvalidArgument("need at least one block".into()));
    }
    config.validate(blocks.len())?;
    let mut z = Vec::with_capacity(blocks.len());
    let mut h = x.clone();
    for b in blocks {
        h = b.forward(&h)?;
        z.push(h.clone());
    }
    let u = z
        .iter()
        .map(|zt| match config.dual_init {
            DualInit::Zero => Ok(Tensor::zeros(zt.shape())),
            DualInit::Uniform(lo, hi) => init_uniform(zt.shape(), lo, hi, rng),
        })
        .collect::<Result<Vec<_>>>()?;
    let beta = (0..blocks.len()).map(|t| per_block(&config.beta, t)).collect();
    CouplingState::new(z, u, beta, config.z_optimizer)
}

fn check_state(state: &CouplingState, blocks: &[Block]) -> Result<()> {
    if state.blocks() != blocks.len() {
        return Err(Error::InvalidArgument(format!(
            "state has {} blocks, network has {}",
            state.blocks(),
            blocks.len()
        )));
    }
    Ok(())
}

/// Gradient of `β_t/2‖Z_t − out + U_t‖²` in `Z_t`, where `out = block_t(Z_{t−1})`.
fn own_term_grad(state: &CouplingState, t: usize, own_out: &Tensor) -> Result<Tensor> {
    if own_out.shape() != state.z[t].shape() {
        return Err(Error::shape("z_update", own_out.shape(), state.z[t].shape()));
    }
    Ok(residual_plus_dual(&state.z[t], own_out, &state.u[t]).scale(state.beta[t]))
}

/// Gradient of `β_{t+1}/2‖Z_{t+1} − block_{t+1}(Z_t) + U_{t+1}‖²` in `Z_t`,
/// given `next_out = block_{t+1}(Z_t)` and its cache.
fn next_term_grad(
    state: &CouplingState,
    blocks: &[Block],
    t: usize,
    next_out: &Tensor,
    next_cache: &BlockCache,
) -> Result<Tensor> {
    let s = t + 1;
    let upstream = residual_plus_dual(&state.z[s], next_out, &state.u[s]).scale(-state.beta[s]);
    let (_, gi) = blocks[s].backward(next_cache, &upstream, false, true)?;
    Ok(gi.expect("requested"))
}

/// Local objective `J(Y, Z_T) + penalty_T`, as seen by the terminal update.
pub fn terminal_objective(state: &CouplingState, blocks: &[Block], x: &Tensor, y: &Tensor, loss: LossKind) -> Result<f64> {
    check_state(state, blocks)?;
    let t = blocks.len() - 1;
    let out = blocks[t].forward(state.input_of(x, t))?;
    let r = residual_plus_dual(&state.z[t], &out, &state.u[t]);
    Ok(loss.value(y, &state.z[t])? + 0.5 * state.beta[t] * r.sum_sq())
}

/// Local objective `penalty_t + penalty_{t+1}`, as seen by an inner update.
pub fn inner_objective(state: &CouplingState, blocks: &[Block], x: &Tensor, t: usize) -> Result<f64> {
    check_state(state, blocks)?;
    let mut total = 0.0;
    for s in [t, t + 1] {
        let out = blocks[s].forward(state.input_of(x, s))?;
        total += 0.5 * state.beta[s] * residual_plus_dual(&state.z[s], &out, &state.u[s]).sum_sq();
    }
    Ok(total)
}

/// Gradient used by [`update_z_terminal`].
pub fn z_terminal_grad(state: &CouplingState, blocks: &[Block], x: &Tensor, y: &Tensor, loss: LossKind) -> Result<Tensor> {
    check_state(state, blocks)?;
    let t = blocks.len() - 1;
    let out = blocks[t].forward(state.input_of(x, t))?;
    let mut g = own_term_grad(state, t, &out)?;
    g.axpy(1.0, &loss.grad(y, &state.z[t])?)?;
    Ok(g)
}

/// Gradient used by [`update_z_inner`].
pub fn z_inner_grad(state: &CouplingState, blocks: &[Block], x: &Tensor, t: usize) -> Result<Tensor> {
    check_state(state, blocks)?;
    if t + 1 >= blocks.len() {
        return Err(Error::InvalidArgument(format!("inner update needs t < {}, got {t}", blocks.len() - 1)));
    }
    let out = blocks[t].forward(state.input_of(x, t))?;
    let mut g = own_term_grad(state, t, &out)?;
    let (next_out, next_cache) = block_forward(&blocks[t + 1], &state.z[t])?;
    g.axpy(1.0, &next_term_grad(state, blocks, t, &next_out, &next_cache)?)?;
    Ok(g)
}

/// One optimizer step on `Z_T` along `∇(J(Y, Z_T) + penalty_T)`.
pub fn update_z_terminal(
    state: &mut CouplingState,
    blocks: &[Block],
    x: &Tensor,
    y: &Tensor,
    loss: LossKind,
    lr: f64,
) -> Result<()> {
    let g = z_terminal_grad(state, blocks, x, y, loss)?;
    let t = blocks.len() - 1;
    state.z_optim[t].step(&mut state.z[t], &g, lr)
}

/// One optimizer step on an inner `Z_t` (`t < T`) along the gradient of its
/// two penalties. Uses whatever `Z_{t+1}` is currently stored.
pub fn update_z_inner(state: &mut CouplingState, blocks: &[Block], x: &Tensor, t: usize, lr: f64) -> Result<()> {
    let g = z_inner_grad(state, blocks, x, t)?;
    state.z_optim[t].step(&mut state.z[t], &g, lr)
}

/// Full reverse Z sweep. Shares each `block_t(Z_{t−1})` evaluation between the
/// update of `Z_t` and that of `Z_{t−1}`.
pub fn z_sweep(
    state: &mut CouplingState,
    blocks: &[Block],
    x: &Tensor,
    y: &Tensor,
    loss: LossKind,
    z_lr: &[f64],
) -> Result<()> {
    check_state(state, blocks)?;
    let last = blocks.len() - 1;
    let mut next: Option<(Tensor, BlockCache)> = None;
    for t in (0..=last).rev() {
        let (own_out, own_cache) = if t > 0 {
            let (o, c) = block_forward(&blocks[t], &state.z[t - 1])?;
            (o, Some(c))
        } else {
            (blocks[0].forward(x)?, None)
        };
        let mut g = own_term_grad(state, t, &own_out)?;
        match &next {
            None => g.axpy(1.0, &loss.grad(y, &state.z[t])?)?,
            Some((out, cache)) => g.axpy(1.0, &next_term_grad(state, blocks, t, out, cache)?)?,
        }
        state.z_optim[t].step(&mut state.z[t], &g, per_block(z_lr, t))?;
        next = own_cache.map(|c| (own_out, c));
    }
    Ok(())
}

/// Parameter gradient of the block-`t` penalty restricted to `batch` and
/// divided by `|batch|`.
pub fn theta_minibatch_grad(state: &CouplingState, blocks: &[Block], x: &Tensor, t: usize, batch: &[usize]) -> Result<BlockGrads> {
    check_state(state, blocks)?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    penalty_param_grad(&blocks[t], state.input_of(x, t), &state.z[t], &state.u[t], state.beta[t], batch)
}

/// Parameter gradient of `β/(2|batch|) ‖Z − block(input) + U‖²` over the chosen columns.
pub fn penalty_param_grad(block: &Block, input: &Tensor, z: &Tensor, u: &Tensor, beta: f64, batch: &[usize]) -> Result<BlockGrads> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    let inp = input.select_columns(batch)?;
    let zt = z.select_columns(batch)?;
    let ut = u.select_columns(batch)?;
    let (out, cache) = block_forward(block, &inp)?;
    let upstream = residual_plus_dual(&zt, &out, &ut).scale(-beta / batch.len() as f64);
    let (g, _) = block.backward(&cache, &upstream, true, false)?;
    Ok(g.expect("requested"))
}

/// One optimizer step on block `t`'s parameters over the columns in `batch`.
pub fn update_theta_minibatch(
    state: &CouplingState,
    blocks: &mut [Block],
    x: &Tensor,
    t: usize,
    lr: f64,
    batch: &[usize],
) -> Result<()> {
    if !blocks[t].has_params() {
        return Ok(());
    }
    let g = theta_minibatch_grad(state, blocks, x, t, batch)?;
    blocks[t].apply_grads(&g, lr)
}

/// Minibatch Θ updates for every block, `t = 1..T`.
pub fn theta_sweep(state: &CouplingState, blocks: &mut [Block], x: &Tensor, config: &BatchAdmmConfig, rng: &mut Rng) -> Result<()> {
    let n = x.cols();
    let bs = config.batch_size.min(n);
    for t in 0..blocks.len() {
        if !blocks[t].has_params() {
            continue;
        }
        let lr = per_block(&config.theta_lr, t);
        let perm = rng.permutation(n);
        let batches: Vec<&[usize]> = perm.chunks(bs).collect();
        let steps = config.theta_steps.unwrap_or(batches.len());
        for k in 0..steps {
            update_theta_minibatch(state, blocks, x, t, lr, batches[k % batches.len()])?;
        }
    }
    Ok(())
}

/// `U_t += Z_t − block_t(Z_{t−1})`. Returns `‖Z_t − block_t(Z_{t−1})‖_F` per block.
pub fn update_duals(state: &mut CouplingState, blocks: &[Block], x: &Tensor) -> Result<Vec<f64>> {
    check_state(state, blocks)?;
    let mut norms = Vec::with_capacity(blocks.len());
    for t in 0..blocks.len() {
        let out = blocks[t].forward(state.input_of(x, t))?;
        let r = state.z[t].sub(&out)?;
        norms.push(r.frob_norm());
        state.u[t].axpy(1.0, &r)?;
    }
    Ok(norms)
}

/// `Σ_t ‖Z_t − block_t(Z_{t−1})‖_F` without touching the duals.
pub fn total_residual(state: &CouplingState, blocks: &[Block], x: &Tensor) -> Result<f64> {
    check_state(state, blocks)?;
    let mut total = 0.0;
    for t in 0..blocks.len() {
        let out = blocks[t].forward(state.input_of(x, t))?;
        total += state.z[t].sub(&out)?.frob_norm();
    }
    Ok(total)
}

/// Primal sweeps plus one dual update. Returns the per-block residual norms
/// measured by the dual update.
pub fn admm_cycle(
    state: &mut CouplingState,
    blocks: &mut [Block],
    x: &Tensor,
    y: &Tensor,
    config: &BatchAdmmConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    for step in 0..config.primal_steps {
        z_sweep(state, blocks, x, y, config.loss, &config.z_lr)?;
        if config.repeat == PrimalRepeat::FullSweep || step + 1 == config.primal_steps {
            theta_sweep(state, blocks, x, config, rng)?;
        }
    }
    update_duals(state, blocks, x)
}

/// Straight-through loss on `data` and accuracy on `test` (or on `data` when
/// no test set is given).
pub fn evaluate(blocks: &[Block], data: &Dataset, test: Option<&Dataset>, loss: LossKind) -> Result<(f64, f64)> {
    let out = straight_through_forward(blocks, &data.x)?;
    let train_loss = loss.value(&data.y, &out)?;
    let acc = match test {
        Some(t) => accuracy(&t.y, &straight_through_forward(blocks, &t.x)?)?,
        None => accuracy(&data.y, &out)?,
    };
    if !train_loss.is_finite() {
        return Err(Error::Numeric(format!("training loss became {train_loss}")));
    }
    Ok((train_loss, acc))
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct BatchRun {
    pub blocks: Vec<Block>,
    pub state: CouplingState,
    pub metrics: Vec<MetricsRecord>,
}

/// One cycle with its metrics row. `elapsed` accumulates training time only.
pub fn train_cycle(
    state: &mut CouplingState,
    blocks: &mut [Block],
    data: &Dataset,
    test: Option<&Dataset>,
    config: &BatchAdmmConfig,
    rng: &mut Rng,
    epoch: usize,
    elapsed: &mut f64,
) -> Result<MetricsRecord> {
    let start = Instant::now();
    let norms = admm_cycle(state, blocks, &data.x, &data.y, config, rng)?;
    *elapsed += start.elapsed().as_secs_f64();
    let (train_loss, test_accuracy) = evaluate(blocks, data, test, config.loss)?;
    let total: f64 = norms.iter().sum();
    if !total.is_finite() {
        return Err(Error::Numeric(format!("coupling residual became {total}")));
    }
    Ok(MetricsRecord {
        epoch,
        wall_clock_seconds: *elapsed,
        train_loss,
        test_accuracy,
        total_coupling_residual: Some(total),
        rho: None,
    })
}

/// Runs `config.epochs` cycles from a fresh forward-pass initialization.
pub fn train(mut blocks: Vec<Block>, data: &Dataset, test: Option<&Dataset>, config: &BatchAdmmConfig) -> Result<BatchRun> {
    config.validate(blocks.len())?;
    for b in &mut blocks {
        if b.optimizer_kind() != config.theta_optimizer {
            b.set_optimizer(config.theta_optimizer);
        }
    }
    let root = Rng::new(config.seed);
    let mut init_rng = root.fork(0x10);
    let mut rng = root.fork(0x11);
    let mut state = init_coupling(&blocks, &data.x, config, &mut init_rng)?;
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut elapsed = 0.0;
    for epoch in 1..=config.epochs {
        let rec = train_cycle(&mut state, &mut blocks, data, test, config, &mut rng, epoch, &mut elapsed)?;
        metrics.push(rec);
    }
    Ok(BatchRun { blocks, state, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::Layer;
    use crate::data::Split;
    use crate::gradcheck::{finite_diff_grad, grad_mismatch};

    fn lin(w: &[&[f64]]) -> Layer {
        Layer::linear(Tensor::from_rows(w), None).unwrap()
    }

    fn scalar_block(index: usize, w: f64) -> Block {
        Block::new(index, vec![lin(&[&[w]])]).unwrap()
    }

    fn sgd_config() -> BatchAdmmConfig {
        BatchAdmmConfig {
            z_optimizer: OptimizerKind::Sgd,
            theta_optimizer: OptimizerKind::Sgd,
            dual_init: DualInit::Zero,
            loss: LossKind::Mse,
            ..Default::default()
        }
    }

    fn mlp_block(index: usize, rng: &mut Rng, a: usize, b: usize, c: usize) -> Block {
        Block::new(
            index,
            vec![
                Layer::linear(rng.normal_tensor(&[b, a], 0.7), Some(rng.normal_tensor(&[b, 1], 0.3))).unwrap(),
                Layer::Relu,
                Layer::linear(rng.normal_tensor(&[c, b], 0.7), None).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn penalty_identity_by_hand() {
        let id = Block::new(0, vec![lin(&[&[1.0]])]).unwrap();
        let z = Tensor::column_vector(&[1.5]);
        let prev = Tensor::column_vector(&[0.5]);
        let u = Tensor::zeros(&[1, 1]);
        let p = coupling_penalty(&z, &prev, &u, &id, 2.0).unwrap();
        assert_eq!(p.value, 1.0);
        assert_eq!(p.grad_z.data(), &[2.0]);
        assert_eq!(p.grad_prev.data(), &[-2.0]);
    }

    #[test]
    fn penalty_zero_at_consistency() {
        let mut rng = Rng::new(4);
        let b = mlp_block(0, &mut rng, 3, 4, 2);
        let prev = rng.normal_tensor(&[3, 5], 1.0);
        let z = b.forward(&prev).unwrap();
        let p = coupling_penalty(&z, &prev, &Tensor::zeros(&[2, 5]), &b, 1.3).unwrap();
        assert_eq!(p.value, 0.0);
        assert_eq!(p.grad_z.max_abs(), 0.0);
        assert_eq!(p.grad_prev.max_abs(), 0.0);
        assert!(p.grad_theta.is_zero());
    }

    #[test]
    fn penalty_grads_match_finite_differences() {
        let mut rng = Rng::new(5);
        let b = mlp_block(0, &mut rng, 3, 4, 2);
        let prev = rng.normal_tensor(&[3, 5], 1.0);
        let z = rng.normal_tensor(&[2, 5], 1.0);
        let u = rng.normal_tensor(&[2, 5], 0.1);
        let beta = 1.7;
        let p = coupling_penalty(&z, &prev, &u, &b, beta).unwrap();
        let val = |z: &Tensor, prev: &Tensor, b: &Block| coupling_penalty(z, prev, &u, b, beta).unwrap().value;
        let nz = finite_diff_grad(|t| val(t, &prev, &b), &z, 1e-5);
        assert!(grad_mismatch(&p.grad_z, &nz, 1e-5, 1e-8) <= 1.0);
        let np = finite_diff_grad(|t| val(&z, t, &b), &prev, 1e-5);
        assert!(grad_mismatch(&p.grad_prev, &np, 1e-5, 1e-8) <= 1.0);
        let analytic: Vec<&Tensor> = p.grad_theta.tensors().collect();
        for (k, a) in analytic.into_iter().enumerate() {
            let base = b.clone();
            let w0 = base.params().nth(k).unwrap().clone();
            let num = finite_diff_grad(
                |w| {
                    let mut bb = base.clone();
                    *bb.params_mut()[k] = w.clone();
                    val(&z, &prev, &bb)
                },
                &w0,
                1e-5,
            );
            assert!(grad_mismatch(a, &num, 1e-5, 1e-8) <= 1.0, "param {k}");
        }
    }

    #[test]
    fn init_matches_forward_captures() {
        let mut rng = Rng::new(6);
        let blocks = vec![mlp_block(0, &mut rng, 3, 5, 4), mlp_block(1, &mut rng, 4, 3, 2)];
        let x = rng.normal_tensor(&[3, 7], 1.0);
        let cfg = BatchAdmmConfig::default();
        let st = init_coupling(&blocks, &x, &cfg, &mut Rng::new(1)).unwrap();
        let h1 = blocks[0].forward(&x).unwrap();
        let h2 = blocks[1].forward(&h1).unwrap();
        assert!(st.z[0].sub(&h1).unwrap().max_abs() <= 1e-12);
        assert!(st.z[1].sub(&h2).unwrap().max_abs() <= 1e-12);
        for u in &st.u {
            assert!(u.data().iter().all(|v| (0.0..1e-4).contains(v)));
        }
        let zero = BatchAdmmConfig { dual_init: DualInit::Zero, ..cfg };
        let st = init_coupling(&blocks, &x, &zero, &mut Rng::new(1)).unwrap();
        let p = coupling_penalty(&st.z[1], &st.z[0], &st.u[1], &blocks[1], 1.0).unwrap();
        assert_eq!(p.value, 0.0);
    }

    #[test]
    fn identity_blocks_copy_input() {
        let blocks: Vec<Block> = (0..3).map(|i| Block::new(i, vec![Layer::Relu]).unwrap()).collect();
        let x = Tensor::from_fn(2, 3, |i, j| (i + j) as f64);
        let st = init_coupling(&blocks, &x, &sgd_config(), &mut Rng::new(0)).unwrap();
        for z in &st.z {
            assert_eq!(z, &x);
        }
    }

    #[test]
    fn terminal_grad_scalar_hand_check() {
        // 1-D linear block w; grad = (Z−Y)/N + β(Z − wZ' + U)
        let (w, zp, z, y, u, beta) = (0.8, 1.5, 0.4, 1.0, 0.05, 2.0);
        let blocks = vec![scalar_block(0, w)];
        let x = Tensor::column_vector(&[zp]);
        let st = CouplingState::new(
            vec![Tensor::column_vector(&[z])],
            vec![Tensor::column_vector(&[u])],
            vec![beta],
            OptimizerKind::Sgd,
        )
        .unwrap();
        let g = z_terminal_grad(&st, &blocks, &x, &Tensor::column_vector(&[y]), LossKind::Mse).unwrap();
        let want = (z - y) + beta * (z - w * zp + u);
        assert!((g.data()[0] - want).abs() < 1e-14);
    }

    #[test]
    fn terminal_step_at_minimizer_is_still() {
        // minimizer of (z−y)²/2 + β/2 (z − w x + u)² is (y + β(w x − u)) / (1 + β)
        let (w, xv, y, u, beta) = (0.5, 2.0, 3.0, 0.1, 1.0);
        let zstar = (y + beta * (w * xv - u)) / (1.0 + beta);
        let blocks = vec![scalar_block(0, w)];
        let x = Tensor::column_vector(&[xv]);
        let mut st = CouplingState::new(
            vec![Tensor::column_vector(&[zstar])],
            vec![Tensor::column_vector(&[u])],
            vec![beta],
            OptimizerKind::Sgd,
        )
        .unwrap();
        update_z_terminal(&mut st, &blocks, &x, &Tensor::column_vector(&[y]), LossKind::Mse, 0.1).unwrap();
        assert!((st.z[0].data()[0] - zstar).abs() < 1e-15);
    }

    #[test]
    fn inner_grad_identity_scalar_oracle() {
        let blocks: Vec<Block> = (0..3).map(|i| scalar_block(i, 1.0)).collect();
        let x = Tensor::column_vector(&[0.3]);
        let zs = [0.7, -0.2, 1.1];
        let us = [0.01, -0.03, 0.02];
        let st = CouplingState::new(
            zs.iter().map(|&v| Tensor::column_vector(&[v])).collect(),
            us.iter().map(|&v| Tensor::column_vector(&[v])).collect(),
            vec![1.0; 3],
            OptimizerKind::Sgd,
        )
        .unwrap();
        let g = z_inner_grad(&st, &blocks, &x, 1).unwrap();
        let want = (zs[1] - zs[0] + us[1]) - (zs[2] - zs[1] + us[2]);
        assert!((g.data()[0] - want).abs() < 1e-14);
        let g0 = z_inner_grad(&st, &blocks, &x, 0).unwrap();
        let want0 = (zs[0] - 0.3 + us[0]) - (zs[1] - zs[0] + us[1]);
        assert!((g0.data()[0] - want0).abs() < 1e-14);
        assert!(z_inner_grad(&st, &blocks, &x, 2).is_err());
    }

    #[test]
    fn inner_step_skips_when_residuals_vanish() {
        let blocks: Vec<Block> = (0..2).map(|i| scalar_block(i, 2.0)).collect();
        let x = Tensor::column_vector(&[1.0]);
        let mut st = init_coupling(&blocks, &x, &sgd_config(), &mut Rng::new(0)).unwrap();
        let before = st.z[0].clone();
        update_z_inner(&mut st, &blocks, &x, 0, 0.5).unwrap();
        assert_eq!(st.z[0], before);
    }

    #[test]
    fn z_steps_descend_on_random_instances() {
        for seed in 0..5 {
            let mut rng = Rng::new(100 + seed);
            let blocks = vec![mlp_block(0, &mut rng, 3, 4, 3), mlp_block(1, &mut rng, 3, 4, 2)];
            let x = rng.normal_tensor(&[3, 6], 1.0);
            let y = rng.normal_tensor(&[2, 6], 1.0);
            let mut st = init_coupling(&blocks, &x, &sgd_config(), &mut rng).unwrap();
            for z in &mut st.z {
                z.axpy(0.3, &rng.normal_tensor(z.shape(), 1.0)).unwrap();
            }
            let before = terminal_objective(&st, &blocks, &x, &y, LossKind::Mse).unwrap();
            update_z_terminal(&mut st, &blocks, &x, &y, LossKind::Mse, 1e-2).unwrap();
            assert!(terminal_objective(&st, &blocks, &x, &y, LossKind::Mse).unwrap() < before);
            let before = inner_objective(&st, &blocks, &x, 0).unwrap();
            update_z_inner(&mut st, &blocks, &x, 0, 1e-2).unwrap();
            assert!(inner_objective(&st, &blocks, &x, 0).unwrap() < before);
        }
    }

    #[test]
    fn sweep_matches_separate_updates() {
        let mut rng = Rng::new(7);
        let blocks = vec![
            mlp_block(0, &mut rng, 3, 4, 3),
            mlp_block(1, &mut rng, 3, 4, 3),
            mlp_block(2, &mut rng, 3, 4, 2),
        ];
        let x = rng.normal_tensor(&[3, 6], 1.0);
        let y = rng.normal_tensor(&[2, 6], 1.0);
        let mut a = init_coupling(&blocks, &x, &BatchAdmmConfig::default(), &mut rng).unwrap();
        for z in &mut a.z {
            z.axpy(0.2, &rng.normal_tensor(z.shape(), 1.0)).unwrap();
        }
        let mut b = a.clone();
        z_sweep(&mut a, &blocks, &x, &y, LossKind::Mse, &[0.01]).unwrap();
        update_z_terminal(&mut b, &blocks, &x, &y, LossKind::Mse, 0.01).unwrap();
        update_z_inner(&mut b, &blocks, &x, 1, 0.01).unwrap();
        update_z_inner(&mut b, &blocks, &x, 0, 0.01).unwrap();
        for (za, zb) in a.z.iter().zip(&b.z) {
            assert_eq!(za, zb);
        }
    }

    #[test]
    fn theta_full_batch_and_unbiased_minibatches() {
        let mut rng = Rng::new(8);
        let blocks = vec![mlp_block(0, &mut rng, 2, 3, 2)];
        let x = rng.normal_tensor(&[2, 5], 1.0);
        let mut st = init_coupling(&blocks, &x, &sgd_config(), &mut rng).unwrap();
        st.z[0].axpy(0.5, &rng.normal_tensor(&[2, 5], 1.0)).unwrap();
        let all: Vec<usize> = (0..5).collect();
        let full = theta_minibatch_grad(&st, &blocks, &x, 0, &all).unwrap();
        let p = coupling_penalty(&st.z[0], &x, &st.u[0], &blocks[0], st.beta[0]).unwrap();
        let mut scaled = p.grad_theta.clone();
        scaled.scale(1.0 / 5.0);
        for (a, b) in full.tensors().zip(scaled.tensors()) {
            assert!(a.sub(b).unwrap().max_abs() <= 1e-12);
        }
        let mut mean = BlockGrads::zeros_like(&blocks[0]);
        for j in 0..5 {
            mean.axpy(0.2, &theta_minibatch_grad(&st, &blocks, &x, 0, &[j]).unwrap()).unwrap();
        }
        for (a, b) in full.tensors().zip(mean.tensors()) {
            assert!(a.sub(b).unwrap().max_abs() <= 1e-10);
        }
        assert!(theta_minibatch_grad(&st, &blocks, &x, 0, &[]).is_err());
    }

    #[test]
    fn theta_still_when_batch_is_consistent() {
        let mut rng = Rng::new(9);
        let mut blocks = vec![mlp_block(0, &mut rng, 2, 3, 2)];
        let x = rng.normal_tensor(&[2, 5], 1.0);
        let mut st = init_coupling(&blocks, &x, &sgd_config(), &mut rng).unwrap();
        st.z[0].set(0, 4, 9.0);
        let before = blocks[0].clone();
        update_theta_minibatch(&st, &mut blocks, &x, 0, 0.1, &[0, 1, 2]).unwrap();
        assert_eq!(blocks[0], before);
        update_theta_minibatch(&st, &mut blocks, &x, 0, 0.1, &[4]).unwrap();
        assert_ne!(blocks[0], before);
    }

    #[test]
    fn duals_are_exact() {
        let blocks = vec![scalar_block(0, 2.0)];
        let x = Tensor::column_vector(&[1.0]);
        let mut st = init_coupling(&blocks, &x, &sgd_config(), &mut Rng::new(0)).unwrap();
        update_duals(&mut st, &blocks, &x).unwrap();
        assert_eq!(st.u[0].data(), &[0.0]);
        st.z[0].data_mut()[0] = 2.5;
        let norms = update_duals(&mut st, &blocks, &x).unwrap();
        assert_eq!(st.u[0].data(), &[0.5]);
        assert_eq!(norms, vec![0.5]);
    }

    #[test]
    fn scalar_chain_two_cycles_trace() {
        // Two scalar linear blocks, MSE, SGD everywhere, one primal step, one
        // full-batch Θ step per sweep. Reference written out in plain floats.
        let (x, y) = (1.0f64, 2.0f64);
        let (mut w1, mut w2) = (0.5f64, 0.5f64);
        let (beta, zeta, eta) = (1.0, 0.1, 0.05);
        let (mut z1, mut z2) = (w1 * x, w2 * w1 * x);
        let (mut u1, mut u2) = (0.0f64, 0.0f64);
        let mut trace = Vec::new();
        for _ in 0..2 {
            let g2 = (z2 - y) + beta * (z2 - w2 * z1 + u2);
            z2 -= zeta * g2;
            let g1 = beta * (z1 - w1 * x + u1) - beta * w2 * (z2 - w2 * z1 + u2);
            z1 -= zeta * g1;
            w1 -= eta * (-beta * (z1 - w1 * x + u1) * x);
            w2 -= eta * (-beta * (z2 - w2 * z1 + u2) * z1);
            u1 += z1 - w1 * x;
            u2 += z2 - w2 * z1;
            trace.push((z1, z2, u1, u2, w1, w2));
        }

        let mut blocks = vec![scalar_block(0, 0.5), scalar_block(1, 0.5)];
        for b in &mut blocks {
            b.set_optimizer(OptimizerKind::Sgd);
        }
        let cfg = BatchAdmmConfig {
            z_lr: vec![zeta],
            theta_lr: vec![eta],
            primal_steps: 1,
            ..sgd_config()
        };
        let xs = Tensor::column_vector(&[x]);
        let ys = Tensor::column_vector(&[y]);
        let mut st = init_coupling(&blocks, &xs, &cfg, &mut Rng::new(0)).unwrap();
        let mut rng = Rng::new(0);
        for want in trace {
            admm_cycle(&mut st, &mut blocks, &xs, &ys, &cfg, &mut rng).unwrap();
            let w: Vec<f64> = blocks.iter().map(|b| b.params().next().unwrap().data()[0]).collect();
            let got = (st.z[0].data()[0], st.z[1].data()[0], st.u[0].data()[0], st.u[1].data()[0], w[0], w[1]);
            let d = [got.0 - want.0, got.1 - want.1, got.2 - want.2, got.3 - want.3, got.4 - want.4, got.5 - want.5];
            assert!(d.iter().all(|v| v.abs() < 1e-12), "{got:?} vs {want:?}");
        }
    }

    fn linear_toy(beta: f64) -> (Vec<Block>, Dataset, BatchAdmmConfig) {
        // y = 1.5 x, two scalar linear blocks, N = 4
        let blocks = vec![scalar_block(0, 0.9), scalar_block(1, 0.8)];
        let xv = [0.5, -1.0, 1.5, 2.0];
        let x = Tensor::matrix(1, 4, xv.to_vec()).unwrap();
        let y = Tensor::matrix(1, 4, xv.iter().map(|v| 1.5 * v).collect()).unwrap();
        let ds = Dataset::new(x, y, "toy", Split::Train).unwrap();
        let cfg = BatchAdmmConfig {
            beta: vec![beta],
            z_lr: vec![0.05],
            theta_lr: vec![0.05],
            batch_size: 4,
            loss: LossKind::Mse,
            dual_init: DualInit::Zero,
            z_optimizer: OptimizerKind::Sgd,
            theta_optimizer: OptimizerKind::Sgd,
            epochs: 200,
            ..Default::default()
        };
        (blocks, ds, cfg)
    }

    fn run_toy(blocks: Vec<Block>, ds: &Dataset, cfg: &BatchAdmmConfig) -> BatchRun {
        // accuracy is meaningless for a regression target, evaluate on itself
        let mut blocks = blocks;
        for b in &mut blocks {
            b.set_optimizer(cfg.theta_optimizer);
        }
        let root = Rng::new(cfg.seed);
        let mut state = init_coupling(&blocks, &ds.x, cfg, &mut root.fork(0x10)).unwrap();
        let mut rng = root.fork(0x11);
        let mut metrics = Vec::new();
        for epoch in 1..=cfg.epochs {
            let norms = admm_cycle(&mut state, &mut blocks, &ds.x, &ds.y, cfg, &mut rng).unwrap();
            metrics.push(MetricsRecord {
                epoch,
                wall_clock_seconds: 0.0,
                train_loss: 0.0,
                test_accuracy: 0.0,
                total_coupling_residual: Some(norms.iter().sum()),
                rho: None,
            });
        }
        BatchRun { blocks, state, metrics }
    }

    #[test]
    fn linear_toy_converges() {
        let (blocks, ds, cfg) = linear_toy(1.0);
        let run = run_toy(blocks, &ds, &cfg);
        assert_eq!(run.metrics.len(), 200);
        let last = run.metrics.last().unwrap().total_coupling_residual.unwrap();
        assert!(last < 1e-3, "residual {last}");
        let out = straight_through_forward(&run.blocks, &ds.x).unwrap();
        assert!(crate::loss::mse_loss(&ds.y, &out).unwrap() < 1e-3);
    }

    #[test]
    fn larger_beta_tighter_coupling() {
        let mut last = Vec::new();
        for beta in [0.1, 1.0, 10.0] {
            let (blocks, ds, mut cfg) = linear_toy(beta);
            cfg.epochs = 20;
            cfg.z_lr = vec![0.02];
            let run = run_toy(blocks, &ds, &cfg);
            last.push(run.metrics.last().unwrap().total_coupling_residual.unwrap());
        }
        assert!(last[0] > last[1] && last[1] > last[2], "{last:?}");
    }

    #[test]
    fn single_block_is_alternating_minimization() {
        // T = 1: Z step on J + penalty, Θ step on the penalty, dual update.
        let (x, y) = (2.0f64, -1.0f64);
        let mut w = 0.3f64;
        let (beta, zeta, eta) = (0.5, 0.2, 0.1);
        let mut z = w * x;
        let mut u = 0.0;
        let mut trace = Vec::new();
        for _ in 0..3 {
            for _ in 0..2 {
                z -= zeta * ((z - y) + beta * (z - w * x + u));
                w += eta * beta * (z - w * x + u) * x;
            }
            u += z - w * x;
            trace.push((z, w));
        }
        let mut blocks = vec![scalar_block(0, 0.3)];
        blocks[0].set_optimizer(OptimizerKind::Sgd);
        let cfg = BatchAdmmConfig {
            beta: vec![beta],
            z_lr: vec![zeta],
            theta_lr: vec![eta],
            primal_steps: 2,
            ..sgd_config()
        };
        let xs = Tensor::column_vector(&[x]);
        let ys = Tensor::column_vector(&[y]);
        let mut st = init_coupling(&blocks, &xs, &cfg, &mut Rng::new(0)).unwrap();
        let mut rng = Rng::new(0);
        for (zw, ww) in trace {
            admm_cycle(&mut st, &mut blocks, &xs, &ys, &cfg, &mut rng).unwrap();
            assert!((st.z[0].data()[0] - zw).abs() < 1e-12);
            assert!((blocks[0].params().next().unwrap().data()[0] - ww).abs() < 1e-12);
        }
    }

    #[test]
    fn train_is_deterministic_and_touches_all_columns() {
        let mut rng = Rng::new(10);
        let blocks = vec![mlp_block(0, &mut rng, 3, 6, 4), mlp_block(1, &mut rng, 4, 5, 3)];
        let x = rng.normal_tensor(&[3, 20], 1.0);
        let labels: Vec<usize> = (0..20).map(|j| j % 3).collect();
        let ds = Dataset::new(x, crate::data::one_hot(&labels, 3).unwrap(), "r", Split::Train).unwrap();
        let cfg = BatchAdmmConfig {
            epochs: 3,
            batch_size: 8,
            seed: 42,
            ..Default::default()
        };
        let init = init_coupling(&blocks, &ds.x, &cfg, &mut Rng::new(42).fork(0x10)).unwrap();
        let a = train(blocks.clone(), &ds, None, &cfg).unwrap();
        let b = train(blocks, &ds, None, &cfg).unwrap();
        assert_eq!(a.blocks, b.blocks);
        assert_eq!(a.state.z, b.state.z);
        for (r1, r2) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(r1.train_loss, r2.train_loss);
            assert_eq!(r1.total_coupling_residual, r2.total_coupling_residual);
        }
        for (z0, z1) in init.z.iter().zip(&a.state.z) {
            for j in 0..20 {
                assert_ne!(z0.column(j), z1.column(j), "column {j} untouched");
            }
        }
    }

    #[test]
    fn config_validation() {
        let cfg = BatchAdmmConfig::default();
        assert!(cfg.validate(3).is_ok());
        assert!(BatchAdmmConfig { primal_steps: 0, ..cfg.clone() }.validate(1).is_err());
        assert!(BatchAdmmConfig { beta: vec![1.0, 0.0], ..cfg.clone() }.validate(2).is_err());
        assert!(BatchAdmmConfig { z_lr: vec![1.0, 1.0], ..cfg.clone() }.validate(3).is_err());
        assert!(BatchAdmmConfig { theta_lr: vec![-1.0], ..cfg }.validate(1).is_err());
    }
}
