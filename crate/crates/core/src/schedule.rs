//! Convergence mode: an adaptive penalty `ρ_k` wrapped around the batch trainer.
//!
//! Every outer step uses `β_t = 1/ρ_k` for all blocks, repeats primal sweeps
//! until the squared gradient norm drops below `ε_k`, takes one dual step and
//! then contracts `ρ` by `c` whenever the stacked residual exceeds `η_k`.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::batch::{self, BatchAdmmConfig, CouplingState};
use crate::blocks::{Block, BlockGrads};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltySchedule {
    pub rho0: f64,
    /// Contraction `c ∈ (0, 1)`.
    pub contraction: f64,
    /// `η_0`, the first residual bound.
    pub residual_bound0: f64,
    pub residual_decay: f64,
    /// `ε_0`, the first primal tolerance.
    pub tolerance0: f64,
    pub tolerance_decay: f64,
    pub k: usize,
    pub rho: f64,
}

impl Default for PenaltySchedule {
    fn default() -> Self {
        Self::new(1.0, 0.9, 1.0, 0.95, 1.0, 0.95).expect("valid defaults")
    }
}

impl PenaltySchedule {
    pub fn new(rho0: f64, contraction: f64, residual_bound0: f64, residual_decay: f64, tolerance0: f64, tolerance_decay: f64) -> Result<Self> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")))
            }
        };
        positive("rho0", rho0)?;
        positive("residual_bound0", residual_bound0)?;
        positive("tolerance0", tolerance0)?;
        unit("contraction", contraction)?;
        unit("residual_decay", residual_decay)?;
        unit("tolerance_decay", tolerance_decay)?;
        Ok(Self {
            rho0,
            contraction,
            residual_bound0,
            residual_decay,
            tolerance0,
            tolerance_decay,
            k: 0,
            rho: rho0,
        })
    }

    /// `η_k`
    pub fn residual_bound(&self) -> f64 {
        self.residual_bound0 * self.residual_decay.powi(self.k as i32)
    }

    /// `ε_k`
    pub fn tolerance(&self) -> f64 {
        self.tolerance0 * self.tolerance_decay.powi(self.k as i32)
    }

    /// Keeps `ρ` when `residual ≤ η_k`, multiplies it by `c` otherwise, then
    /// advances `k`. Returns whether `ρ` changed.
    pub fn rho_update(&mut self, residual_norm: f64) -> Result<bool> {
        if !(residual_norm >= 0.0) {
            return Err(Error::InvalidArgument(format!("residual norm must be non-negative, got {residual_norm}")));
        }
        let shrink = residual_norm > self.residual_bound();
        if shrink {
            self.rho *= self.contraction;
        }
        self.k += 1;
        Ok(shrink)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceConfig {
    pub admm: BatchAdmmConfig,
    pub schedule: PenaltySchedule,
    pub outer_iters: usize,
    /// Primal sweeps allowed per outer step.
    pub inner_cap: usize,
    /// Θ minibatch size at `k = 0`; grows by `batch_growth` per step up to N.
    pub batch0: usize,
    pub batch_growth: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            admm: BatchAdmmConfig::default(),
            schedule: PenaltySchedule::default(),
            outer_iters: 50,
            inner_cap: 200,
            batch0: 64,
            batch_growth: 1.2,
        }
    }
}

impl ConvergenceConfig {
    pub fn batch_size(&self, k: usize, n: usize) -> usize {
        let b = self.batch0 as f64 * self.batch_growth.powi(k as i32);
        if b >= n as f64 {
            n
        } else {
            (b.ceil() as usize).clamp(1, n)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub rho: f64,
    /// The penalty actually used by every block at this step.
    pub beta: f64,
    pub residual_bound: f64,
    pub tolerance: f64,
    pub h_norm: f64,
    pub inner_iters: usize,
    pub grad_sq: f64,
    pub capped: bool,
    pub batch_size: usize,
}

pub const TRACE_HEADER: &str = "k,rho,eta,eps,h_norm,inner_iters,grad_sq";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{},{:e}\n",
            r.k, r.rho, r.residual_bound, r.tolerance, r.h_norm, r.inner_iters, r.grad_sq
        ));
    }
    out
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    std::fs::File::create(path)?.write_all(trace_csv(rows).as_bytes())?;
    Ok(())
}

/// Squared gradient norm of the augmented objective: every `Z_t` gradient
/// plus the full-batch, per-sample Θ gradient of each penalty.
pub fn augmented_grad_sq(state: &CouplingState, blocks: &[Block], x: &crate::Tensor, y: &crate::Tensor, config: &BatchAdmmConfig) -> Result<f64> {
    let last = blocks.len() - 1;
    let mut total = batch::z_terminal_grad(state, blocks, x, y, config.loss)?.sum_sq();
    for t in 0..last {
        total += batch::z_inner_grad(state, blocks, x, t)?.sum_sq();
    }
    let all: Vec<usize> = (0..x.cols()).collect();
    for t in 0..blocks.len() {
        if blocks[t].has_params() {
            let g: BlockGrads = batch::theta_minibatch_grad(state, blocks, x, t, &all)?;
            total += g.sum_sq();
        }
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct ConvergenceRun {
    pub blocks: Vec<Block>,
    pub state: CouplingState,
    pub trace: Vec<TraceRow>,
    pub metrics: Vec<MetricsRecord>,
}

pub fn convergence_mode_train(mut blocks: Vec<Block>, data: &Dataset, test: Option<&Dataset>, config: &ConvergenceConfig) -> Result<ConvergenceRun> {
    if config.inner_cap == 0 {
        return Err(Error::Config("inner_cap must be at least 1".into()));
    }
    if config.batch0 == 0 || !(config.batch_growth >= 1.0) {
        return Err(Error::Config("batch0 must be ≥ 1 and batch_growth ≥ 1".into()));
    }
    let mut schedule = config.schedule.clone();
    let mut admm = config.admm.clone();
    admm.beta = vec![1.0 / schedule.rho];
    for b in &mut blocks {
        if b.optimizer_kind() != admm.theta_optimizer {
            b.set_optimizer(admm.theta_optimizer);
        }
    }
    let root = Rng::new(admm.seed);
    let mut state = batch::init_coupling(&blocks, &data.x, &admm, &mut root.fork(0x50))?;
    let mut rng = root.fork(0x51);
    let (x, y) = (&data.x, &data.y);
    let n = x.cols();

    let mut trace = Vec::with_capacity(config.outer_iters);
    let mut metrics = Vec::with_capacity(config.outer_iters);
    let mut elapsed = 0.0;
    let mut min_inner = 1;
    for k in 0..config.outer_iters {
        let start = Instant::now();
        let (rho, eta, eps) = (schedule.rho, schedule.residual_bound(), schedule.tolerance());
        let beta = 1.0 / rho;
        admm.batch_size = config.batch_size(k, n);
        let mut inner = 0;
        let mut grad_sq;
        loop {
            batch::z_sweep(&mut state, &blocks, x, y, admm.loss, &admm.z_lr)?;
            batch::theta_sweep(&state, &mut blocks, x, &admm, &mut rng)?;
            inner += 1;
            grad_sq = augmented_grad_sq(&state, &blocks, x, y, &admm)?;
            if !grad_sq.is_finite() {
                return Err(Error::Numeric(format!("gradient norm diverged at outer step {k}")));
            }
            if (inner >= min_inner && grad_sq <= eps) || inner >= config.inner_cap {
                break;
            }
        }
        let capped = grad_sq > eps;
        // later steps never get fewer sweeps than this one
        min_inner = inner;
        let norms = batch::update_duals(&mut state, &blocks, x)?;
        let h_norm = norms.iter().map(|v| v * v).sum::<f64>().sqrt();
        if schedule.rho_update(h_norm)? {
            let ratio = schedule.rho / rho;
            for u in &mut state.u {
                *u = u.scale(ratio);
            }
            for b in &mut state.beta {
                *b = 1.0 / schedule.rho;
            }
        }
        elapsed += start.elapsed().as_secs_f64();
        trace.push(TraceRow {
            k,
            rho,
            beta,
            residual_bound: eta,
            tolerance: eps,
            h_norm,
            inner_iters: inner,
            grad_sq,
            capped,
            batch_size: admm.batch_size,
        });
        let (train_loss, test_accuracy) = batch::evaluate(&blocks, data, test, admm.loss)?;
        metrics.push(MetricsRecord {
            epoch: k + 1,
            wall_clock_seconds: elapsed,
            train_loss,
            test_accuracy,
            total_coupling_residual: Some(norms.iter().sum()),
            rho: Some(rho),
        });
    }
    Ok(ConvergenceRun { blocks, state, trace, metrics })
}
