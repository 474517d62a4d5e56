//! Per-variable first-order update rules.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Some(Self::Sgd),
            "adam" => Some(Self::Adam),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        }
    }
}

/// Adam moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        Self::with_constants(shape, 0.9, 0.999, 1e-8)
    }

    pub fn with_constants(shape: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step_count: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn reset(&mut self) {
        self.m.map_inplace(|_| 0.0);
        self.v.map_inplace(|_| 0.0);
        self.step_count = 0;
    }
}

/// One bias-corrected Adam step, in place.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState, lr: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape("adam_step", param.shape(), grad.shape()));
    }
    if param.shape() != state.m.shape() {
        return Err(Error::shape("adam_step", param.shape(), state.m.shape()));
    }
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let p = param.data_mut();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (((p, &g), m), v) in p.iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

pub fn sgd_step(param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape("sgd_step", param.shape(), grad.shape()));
    }
    param.axpy(-lr, grad)
}

/// Update rule plus whatever state it carries for a single tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamOptimizer {
    Sgd,
    Adam(AdamState),
}

impl ParamOptimizer {
    pub fn new(kind: OptimizerKind, shape: &[usize]) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd,
            OptimizerKind::Adam => Self::Adam(AdamState::new(shape)),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Self::Sgd => OptimizerKind::Sgd,
            Self::Adam(_) => OptimizerKind::Adam,
        }
    }

    pub fn step(&mut self, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        match self {
            Self::Sgd => sgd_step(param, grad, lr),
            Self::Adam(state) => adam_step(param, grad, state, lr),
        }
    }

    pub fn reset(&mut self) {
        if let Self::Adam(s) = self {
            s.reset();
        }
    }
}
