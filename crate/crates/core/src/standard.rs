//! Classic per-layer ADMM with closed-form sub-problems.
//!
//! Layers are `Z_ℓ = W_ℓ A_{ℓ−1}`, `A_ℓ = relu(Z_ℓ)` with `A_0 = X` and no
//! intercepts. The augmented Lagrangian is
//!
//! ```text
//! J(Y, Z_L) + Σ λ_ℓ‖W_ℓ‖² + Σ β_ℓ/2‖Z_ℓ − W_ℓA_{ℓ−1} + U_ℓ‖² + Σ_{ℓ<L} γ_ℓ/2‖A_ℓ − relu(Z_ℓ) + V_ℓ‖²
//! ```
//!
//! and every primal variable has an exact minimizer given the others.

use std::time::Instant;

use crate::batch::per_block;
use crate::blocks::{Block, Layer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::solve_spd;
use crate::loss::{accuracy, LossKind};
use crate::metrics::MetricsRecord;
use crate::optim::AdamState;
use crate::par::map_indices;
use crate::rng::{init_uniform, Rng};
use crate::tensor::{matmul, matmul_nt, matmul_tn, relu, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct StandardAdmmConfig {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub lambda: Vec<f64>,
    pub loss: LossKind,
    pub epochs: usize,
    pub seed: u64,
    /// Range of the uniform draw used for `W`, `U` and `V`.
    pub init_range: (f64, f64),
    /// Adam steps for the last layer when the loss has no closed form.
    pub ce_steps: usize,
    pub ce_lr: f64,
}

impl Default for StandardAdmmConfig {
    fn default() -> Self {
        Self {
            beta: vec![10.0],
            gamma: vec![10.0],
            lambda: vec![5e-5],
            loss: LossKind::Mse,
            epochs: 10,
            seed: 0,
            init_range: (0.0, 1e-4),
            ce_steps: 50,
            ce_lr: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerAdmmState {
    pub w: Vec<Tensor>,
    pub z: Vec<Tensor>,
    /// `A_1 … A_{L−1}`
    pub a: Vec<Tensor>,
    pub u: Vec<Tensor>,
    /// `V_1 … V_{L−1}`
    pub v: Vec<Tensor>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Number of `W` solves that needed a diagonal shift.
    pub regularized_solves: usize,
}

impl LayerAdmmState {
    pub fn layers(&self) -> usize {
        self.w.len()
    }

    /// `A_{ℓ−1}` for 0-based layer `l`.
    pub fn input_of<'a>(&'a self, x: &'a Tensor, l: usize) -> &'a Tensor {
        if l == 0 {
            x
        } else {
            &self.a[l - 1]
        }
    }

    /// The trained weights as a linear/relu network, one block per layer.
    pub fn to_blocks(&self) -> Result<Vec<Block>> {
        let n = self.w.len();
        self.w
            .iter()
            .enumerate()
            .map(|(l, w)| {
                let mut layers = vec![Layer::linear(w.clone(), None)?];
                if l + 1 < n {
                    layers.push(Layer::Relu);
                }
                Block::new(l, layers)
            })
            .collect()
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (l, w) in self.w.iter().enumerate() {
            h = matmul(w, &h)?;
            if l + 1 < self.w.len() {
                h = relu(&h);
            }
        }
        Ok(h)
    }
}

/// `W = (Z + U) Aᵀ (A Aᵀ + (2λ/β) I)⁻¹`. The second value is the diagonal
/// shift a singular system needed (0 when none).
pub fn solve_w(z: &Tensor, u: &Tensor, a_prev: &Tensor, beta: f64, lambda: f64) -> Result<(Tensor, f64)> {
    let mut gram = matmul_nt(a_prev, a_prev)?;
    let ridge = 2.0 * lambda / beta;
    for i in 0..gram.rows() {
        gram.set(i, i, gram.get(i, i) + ridge);
    }
    let rhs = matmul_nt(&z.add(u)?, a_prev)?;
    // W G = R with G symmetric  ⇔  G Wᵀ = Rᵀ
    let (wt, shift) = solve_spd(&gram, &rhs.transpose())?;
    Ok((wt.transpose(), shift))
}

/// `A = (β WᵀW + γ I)⁻¹ (β Wᵀ(Z_next + U_next) + γ(relu(Z) − V))`
pub fn solve_a(
    z_next: &Tensor,
    u_next: &Tensor,
    w_next: &Tensor,
    z: &Tensor,
    v: &Tensor,
    beta_next: f64,
    gamma: f64,
) -> Result<Tensor> {
    let mut lhs = matmul_tn(w_next, w_next)?.scale(beta_next);
    for i in 0..lhs.rows() {
        lhs.set(i, i, lhs.get(i, i) + gamma);
    }
    let mut rhs = matmul_tn(w_next, &z_next.add(u_next)?)?.scale(beta_next);
    rhs.axpy(gamma, &relu(z).sub(v)?)?;
    Ok(solve_spd(&lhs, &rhs)?.0)
}

/// Minimizer of `β/2 (z − a)² + γ/2 (b − relu(z))²`. Ties go to `z ≥ 0`.
pub fn solve_z_scalar(a: f64, b: f64, beta: f64, gamma: f64) -> f64 {
    let obj = |z: f64| 0.5 * beta * (z - a) * (z - a) + 0.5 * gamma * (b - z.max(0.0)).powi(2);
    let pos = ((beta * a + gamma * b) / (beta + gamma)).max(0.0);
    let neg = a.min(0.0);
    if obj(pos) <= obj(neg) {
        pos
    } else {
        neg
    }
}

/// Entrywise [`solve_z_scalar`] with `a = W A_prev − U` and `b = A + V`.
pub fn solve_z_inner(
    w: &Tensor,
    a_prev: &Tensor,
    u: &Tensor,
    a: &Tensor,
    v: &Tensor,
    beta: f64,
    gamma: f64,
) -> Result<Tensor> {
    let lin = matmul(w, a_prev)?.sub(u)?;
    let target = a.add(v)?;
    lin.zip_map(&target, |ai, bi| solve_z_scalar(ai, bi, beta, gamma))
}

/// Minimizer of `J(Y, Z) + β/2‖Z − W A_prev + U‖²`. Closed form for MSE;
/// for cross-entropy, `steps` Adam iterations from `start`, keeping the best iterate.
pub fn solve_z_last(
    y: &Tensor,
    w: &Tensor,
    a_prev: &Tensor,
    u: &Tensor,
    beta: f64,
    loss: LossKind,
    start: &Tensor,
    steps: usize,
    lr: f64,
) -> Result<Tensor> {
    let m = matmul(w, a_prev)?.sub(u)?;
    match loss {
        LossKind::Mse => {
            let inv_n = 1.0 / y.cols() as f64;
            y.zip_map(&m, |yi, mi| (yi * inv_n + beta * mi) / (inv_n + beta))
        }
        LossKind::SoftmaxCrossEntropy => {
            let obj = |z: &Tensor| -> Result<f64> { Ok(loss.value(y, z)? + 0.5 * beta * z.sub(&m)?.sum_sq()) };
            let mut z = start.clone();
            let mut best = (obj(&z)?, z.clone());
            let mut state = AdamState::new(z.shape());
            for _ in 0..steps {
                let mut g = loss.grad(y, &z)?;
                g.axpy(beta, &z.sub(&m)?)?;
                crate::optim::adam_step(&mut z, &g, &mut state, lr)?;
                let f = obj(&z)?;
                if f < best.0 {
                    best = (f, z.clone());
                }
            }
            Ok(best.1)
        }
    }
}

/// Value of the augmented Lagrangian at the current state.
pub fn augmented_lagrangian(state: &LayerAdmmState, x: &Tensor, y: &Tensor, loss: LossKind) -> Result<f64> {
    let n = state.layers();
    let mut total = loss.value(y, &state.z[n - 1])?;
    for l in 0..n {
        total += state.lambda[l] * state.w[l].sum_sq();
        let r = state.z[l].sub(&matmul(&state.w[l], state.input_of(x, l))?)?.add(&state.u[l])?;
        total += 0.5 * state.beta[l] * r.sum_sq();
        if l + 1 < n {
            let q = state.a[l].sub(&relu(&state.z[l]))?.add(&state.v[l])?;
            total += 0.5 * state.gamma[l] * q.sum_sq();
        }
    }
    Ok(total)
}

/// Uniform weights and duals; `Z` and `A` from a forward pass.
pub fn init_state(x: &Tensor, dims: &[usize], config: &StandardAdmmConfig, rng: &mut Rng) -> Result<LayerAdmmState> {
    if dims.len() < 2 || dims[0] != x.rows() {
        return Err(Error::Config(format!(
            "layer sizes {dims:?} do not start at the input width {}",
            x.rows()
        )));
    }
    let layers = dims.len() - 1;
    for (name, v) in [("beta", &config.beta), ("gamma", &config.gamma), ("lambda", &config.lambda)] {
        if v.len() != 1 && v.len() != layers {
            return Err(Error::Config(format!("{name} has {} entries for {layers} layers", v.len())));
        }
    }
    let (lo, hi) = config.init_range;
    let n = x.cols();
    let mut w = Vec::with_capacity(layers);
    for l in 0..layers {
        w.push(init_uniform(&[dims[l + 1], dims[l]], lo, hi, rng)?);
    }
    let mut z = Vec::with_capacity(layers);
    let mut a = Vec::with_capacity(layers - 1);
    let mut h = x.clone();
    for l in 0..layers {
        let zl = matmul(&w[l], &h)?;
        if l + 1 < layers {
            h = relu(&zl);
            a.push(h.clone());
        }
        z.push(zl);
    }
    let mut u = Vec::with_capacity(layers);
    for l in 0..layers {
        u.push(init_uniform(&[dims[l + 1], n], lo, hi, rng)?);
    }
    let mut v = Vec::with_capacity(layers - 1);
    for l in 0..layers - 1 {
        v.push(init_uniform(&[dims[l + 1], n], lo, hi, rng)?);
    }
    let pick = |vals: &[f64]| (0..layers).map(|l| per_block(vals, l)).collect::<Vec<_>>();
    Ok(LayerAdmmState {
        w,
        z,
        a,
        u,
        v,
        beta: pick(&config.beta),
        gamma: pick(&config.gamma),
        lambda: pick(&config.lambda),
        regularized_solves: 0,
    })
}

/// All `W_ℓ` in parallel: each depends only on the previous iterate.
pub fn update_weights(state: &mut LayerAdmmState, x: &Tensor) -> Result<()> {
    let st = &*state;
    let solved = map_indices(st.layers(), |l| {
        solve_w(&st.z[l], &st.u[l], st.input_of(x, l), st.beta[l], st.lambda[l])
    });
    for (l, r) in solved.into_iter().enumerate() {
        let (w, shift) = r?;
        if shift > 0.0 {
            state.regularized_solves += 1;
        }
        state.w[l] = w;
    }
    Ok(())
}

/// `Z_ℓ` then `A_ℓ` for hidden layer `l` (0-based, `l < L−1`).
pub fn update_hidden(state: &mut LayerAdmmState, x: &Tensor, l: usize) -> Result<()> {
    let st = &*state;
    let z = solve_z_inner(&st.w[l], st.input_of(x, l), &st.u[l], &st.a[l], &st.v[l], st.beta[l], st.gamma[l])?;
    state.z[l] = z;
    let st = &*state;
    let a = solve_a(&st.z[l + 1], &st.u[l + 1], &st.w[l + 1], &st.z[l], &st.v[l], st.beta[l + 1], st.gamma[l])?;
    state.a[l] = a;
    Ok(())
}

pub fn update_last(state: &mut LayerAdmmState, x: &Tensor, y: &Tensor, config: &StandardAdmmConfig) -> Result<()> {
    let l = state.layers() - 1;
    let st = &*state;
    let z = solve_z_last(
        y,
        &st.w[l],
        st.input_of(x, l),
        &st.u[l],
        st.beta[l],
        config.loss,
        &st.z[l],
        config.ce_steps,
        config.ce_lr,
    )?;
    state.z[l] = z;
    Ok(())
}

/// Exact dual ascent on both constraint families; returns the total residual norm.
pub fn update_duals(state: &mut LayerAdmmState, x: &Tensor) -> Result<f64> {
    let n = state.layers();
    let mut total = 0.0;
    for l in 0..n {
        let r = state.z[l].sub(&matmul(&state.w[l], state.input_of(x, l))?)?;
        total += r.frob_norm();
        state.u[l].axpy(1.0, &r)?;
        if l + 1 < n {
            let q = state.a[l].sub(&relu(&state.z[l]))?;
            total += q.frob_norm();
            state.v[l].axpy(1.0, &q)?;
        }
    }
    Ok(total)
}

/// One full primal sweep in the algorithm's order, duals untouched.
pub fn primal_sweep(state: &mut LayerAdmmState, x: &Tensor, y: &Tensor, config: &StandardAdmmConfig) -> Result<()> {
    update_weights(state, x)?;
    for l in 0..state.layers() - 1 {
        update_hidden(state, x, l)?;
    }
    update_last(state, x, y, config)
}

#[derive(Debug, Clone)]
pub struct StandardRun {
    pub state: LayerAdmmState,
    pub metrics: Vec<MetricsRecord>,
}

/// `dims` lists layer widths from the input to the output, e.g. `[784, 128, 128, 10]`.
pub fn standard_admm_train(data: &Dataset, test: Option<&Dataset>, dims: &[usize], config: &StandardAdmmConfig) -> Result<StandardRun> {
    let mut rng = Rng::new(config.seed).fork(0x30);
    let mut state = init_state(&data.x, dims, config, &mut rng)?;
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut elapsed = 0.0;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        primal_sweep(&mut state, &data.x, &data.y, config)?;
        let residual = update_duals(&mut state, &data.x)?;
        elapsed += start.elapsed().as_secs_f64();
        let out = state.predict(&data.x)?;
        let train_loss = config.loss.value(&data.y, &out)?;
        if !train_loss.is_finite() || !residual.is_finite() {
            return Err(Error::Numeric("standard ADMM diverged".into()));
        }
        let test_accuracy = match test {
            Some(t) => accuracy(&t.y, &state.predict(&t.x)?)?,
            None => accuracy(&data.y, &out)?,
        };
        metrics.push(MetricsRecord {
            epoch,
            wall_clock_seconds: elapsed,
            train_loss,
            test_accuracy,
            total_coupling_residual: Some(residual),
            rho: None,
        });
    }
    Ok(StandardRun { state, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn w_identity_and_limit() {
        let mut rng = Rng::new(1);
        let z = rng.normal_tensor(&[2, 3], 1.0);
        let u = rng.normal_tensor(&[2, 3], 0.1);
        let (w, _) = solve_w(&z, &u, &Tensor::identity(3), 1.0, 0.0).unwrap();
        assert!(w.sub(&z.add(&u).unwrap()).unwrap().max_abs() < 1e-12);
        let a = rng.normal_tensor(&[3, 3], 1.0);
        let (w, _) = solve_w(&z, &u, &a, 1.0, 1e6).unwrap();
        assert!(w.frob_norm() < 1e-4 * z.add(&u).unwrap().frob_norm());
    }

    #[test]
    fn w_rank_deficient_is_reported() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        let z = Tensor::from_rows(&[&[1.0, 2.0]]);
        let (w, shift) = solve_w(&z, &Tensor::zeros(&[1, 2]), &a, 1.0, 0.0).unwrap();
        assert!(shift > 0.0);
        assert!(w.all_finite());
    }

    #[test]
    fn a_limits() {
        let mut rng = Rng::new(2);
        let z = rng.normal_tensor(&[3, 4], 1.0);
        let v = rng.normal_tensor(&[3, 4], 0.1);
        let zn = rng.normal_tensor(&[2, 4], 1.0);
        let un = rng.normal_tensor(&[2, 4], 0.1);
        let want = relu(&z).sub(&v).unwrap();
        let a = solve_a(&zn, &un, &Tensor::zeros(&[2, 3]), &z, &v, 1.0, 1.0).unwrap();
        assert!(a.sub(&want).unwrap().max_abs() < 1e-12);
        let w = rng.normal_tensor(&[2, 3], 1.0);
        let a = solve_a(&zn, &un, &w, &z, &v, 1.0, 1e9).unwrap();
        assert!(a.sub(&want).unwrap().max_abs() < 1e-7);
    }

    #[test]
    fn z_scalar_cases() {
        assert_eq!(solve_z_scalar(0.7, 0.7, 2.0, 3.0), 0.7);
        let z = solve_z_scalar(-1.0, -0.5, 1.0, 1.0);
        assert_eq!(z, -1.0);
        let obj = |z: f64| 0.5 * (z + 1.0) * (z + 1.0) + 0.5 * (-0.5 - z.max(0.0)).powi(2);
        assert!((obj(z) - 0.125).abs() < 1e-15);
        assert!((obj(0.0) - 0.625).abs() < 1e-15);
        // exact tie: β/2 a² = γ/2 b² with a < 0 and b = 0 positive-branch value
        assert_eq!(solve_z_scalar(0.0, 0.0, 1.0, 1.0), 0.0);
    }

    #[test]
    fn z_last_cases() {
        let w = Tensor::identity(1);
        let a = Tensor::zeros(&[1, 1]);
        let u = Tensor::zeros(&[1, 1]);
        let y = Tensor::column_vector(&[1.0]);
        let z = solve_z_last(&y, &w, &a, &u, 1.0, LossKind::Mse, &a, 0, 0.1).unwrap();
        assert_eq!(z.data(), &[0.5]);
        let z = solve_z_last(&y, &w, &Tensor::column_vector(&[3.0]), &u, 1e-12, LossKind::Mse, &a, 0, 0.1).unwrap();
        assert!((z.data()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn z_last_ce_never_worse_than_start() {
        let mut rng = Rng::new(3);
        let y = Tensor::from_fn(3, 4, |i, j| if i == j % 3 { 1.0 } else { 0.0 });
        let w = rng.normal_tensor(&[3, 2], 1.0);
        let a = rng.normal_tensor(&[2, 4], 1.0);
        let u = Tensor::zeros(&[3, 4]);
        let start = matmul(&w, &a).unwrap();
        let loss = LossKind::SoftmaxCrossEntropy;
        let obj = |z: &Tensor| loss.value(&y, z).unwrap() + 0.5 * z.sub(&start).unwrap().sum_sq();
        let z = solve_z_last(&y, &w, &a, &u, 1.0, loss, &start, 50, 1e-2).unwrap();
        assert!(obj(&z) < obj(&start));
    }

    fn small_problem(seed: u64) -> (Dataset, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let x = rng.normal_tensor(&[4, 12], 1.0);
        let labels: Vec<usize> = (0..12).map(|j| j % 3).collect();
        let y = crate::data::one_hot(&labels, 3).unwrap();
        (Dataset::new(x, y, "s", crate::data::Split::Train).unwrap(), vec![4, 5, 5, 3])
    }

    #[test]
    fn lagrangian_non_increasing_per_step() {
        let (ds, dims) = small_problem(4);
        let cfg = StandardAdmmConfig {
            init_range: (0.0, 0.3),
            beta: vec![2.0],
            gamma: vec![3.0],
            ..Default::default()
        };
        let mut st = init_state(&ds.x, &dims, &cfg, &mut Rng::new(4)).unwrap();
        let (x, y) = (&ds.x, &ds.y);
        for _ in 0..5 {
            let mut prev = augmented_lagrangian(&st, x, y, cfg.loss).unwrap();
            let mut check = |st: &LayerAdmmState| {
                let now = augmented_lagrangian(st, x, y, cfg.loss).unwrap();
                assert!(now <= prev + 1e-10 * prev.abs().max(1.0), "{now} > {prev}");
                prev = now;
            };
            update_weights(&mut st, x).unwrap();
            check(&st);
            for l in 0..st.layers() - 1 {
                update_hidden(&mut st, x, l).unwrap();
                check(&st);
            }
            update_last(&mut st, x, y, &cfg).unwrap();
            check(&st);
            update_duals(&mut st, x).unwrap();
        }
    }

    #[test]
    fn duals_exact() {
        let (ds, dims) = small_problem(5);
        let cfg = StandardAdmmConfig::default();
        let mut st = init_state(&ds.x, &dims, &cfg, &mut Rng::new(5)).unwrap();
        primal_sweep(&mut st, &ds.x, &ds.y, &cfg).unwrap();
        let before = st.clone();
        update_duals(&mut st, &ds.x).unwrap();
        for l in 0..3 {
            let r = before.z[l].sub(&matmul(&before.w[l], before.input_of(&ds.x, l)).unwrap()).unwrap();
            let du = st.u[l].sub(&before.u[l]).unwrap();
            assert!(du.sub(&r).unwrap().max_abs() <= 1e-12);
        }
        for l in 0..2 {
            let q = before.a[l].sub(&relu(&before.z[l])).unwrap();
            assert!(st.v[l].sub(&before.v[l]).unwrap().sub(&q).unwrap().max_abs() <= 1e-12);
        }
    }

    #[test]
    fn train_deterministic_and_exports_blocks() {
        let (ds, dims) = small_problem(6);
        let cfg = StandardAdmmConfig { epochs: 4, seed: 3, ..Default::default() };
        let a = standard_admm_train(&ds, None, &dims, &cfg).unwrap();
        let b = standard_admm_train(&ds, None, &dims, &cfg).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.metrics.len(), 4);
        let blocks = a.state.to_blocks().unwrap();
        let via_blocks = crate::blocks::straight_through_forward(&blocks, &ds.x).unwrap();
        assert_eq!(via_blocks, a.state.predict(&ds.x).unwrap());
    }
}
