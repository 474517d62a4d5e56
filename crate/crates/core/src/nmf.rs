//! Non-negative factorization `Z_t ≈ M S` inserted after block `t`.
//!
//! The factorization is tied to `Z_t` by `γ/2 ‖Z_t − M S + V‖²_F` and only
//! the scores `S` feed the next block. Training first fits `M`, `S`, `V` with
//! the blocks frozen, then runs batch Block-ADMM cycles with the factorization
//! updates folded in. At test time activations are projected with NNLS
//! against the learned basis.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::batch::{self, penalty_param_grad, per_block, residual_plus_dual, BatchAdmmConfig, CouplingState};
use crate::blocks::{block_forward, Block, BlockCache, Layer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::accuracy;
use crate::metrics::MetricsRecord;
use crate::nnls::nnls_columns;
use crate::optim::{adam_step, AdamState};
use crate::rng::Rng;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// `[N, C, H, W]` → `[C, N·H·W]`, column index `(n·H + h)·W + w`.
pub fn reshape_activations(z: &Tensor) -> Result<Tensor> {
    let &[n, c, h, w] = z.shape() else {
        return Err(Error::InvalidArgument(format!("expected a rank-4 tensor, got {:?}", z.shape())));
    };
    let cols = n * h * w;
    let src = z.data();
    let mut out = vec![0.0; c * cols];
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    out[ci * cols + (ni * h + hi) * w + wi] = src[((ni * c + ci) * h + hi) * w + wi];
                }
            }
        }
    }
    Tensor::new(vec![c, cols], out)
}

/// Inverse of [`reshape_activations`].
pub fn unreshape_activations(m: &Tensor, n: usize, h: usize, w: usize) -> Result<Tensor> {
    let (c, cols) = (m.rows(), m.cols());
    if m.rank() != 2 || cols != n * h * w {
        return Err(Error::shape("unreshape_activations", m.shape(), &[c, n * h * w]));
    }
    let src = m.data();
    let mut out = vec![0.0; c * cols];
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    out[((ni * c + ci) * h + hi) * w + wi] = src[ci * cols + (ni * h + hi) * w + wi];
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NmfInit {
    /// `|N(0, σ²)|` entries.
    AbsNormal(f64),
    /// Leading `min(m, r)` diagonal set to one.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmfState {
    /// `[m, r]`, entrywise ≥ 0
    pub m: Tensor,
    /// `[r, n]`, entrywise ≥ 0
    pub s: Tensor,
    /// `[m, n]`
    pub v: Tensor,
    pub gamma: f64,
    s_adam: AdamState,
    /// NNLS solves that stopped at the iteration cap.
    pub capped_solves: usize,
}

/// The block that consumes `S`, with its target and dual.
#[derive(Clone, Copy)]
pub struct NextCoupling<'a> {
    pub block: &'a Block,
    pub z_next: &'a Tensor,
    pub u_next: &'a Tensor,
    pub beta: f64,
}

impl NmfState {
    /// Basis from `init`, scores from one NNLS pass against `z`, zero dual.
    pub fn init(z: &Tensor, rank: usize, gamma: f64, init: NmfInit, rng: &mut Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("nmf rank must be at least 1".into()));
        }
        if !(gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
        }
        let (m, n) = (z.rows(), z.cols());
        if rank > m.min(n) {
            eprintln!("warning: nmf rank {rank} exceeds min({m}, {n}); the factorization is not unique");
        }
        let basis = match init {
            NmfInit::AbsNormal(sigma) => rng.normal_tensor(&[m, rank], sigma).map(f64::abs),
            NmfInit::Identity => Tensor::from_fn(m, rank, |i, j| if i == j { 1.0 } else { 0.0 }),
        };
        let mut state = Self {
            m: basis,
            s: Tensor::zeros(&[rank, n]),
            v: Tensor::zeros(&[m, n]),
            gamma,
            s_adam: AdamState::new(&[rank, n]),
            capped_solves: 0,
        };
        update_s(&mut state, z, None, 0, 0.0)?;
        Ok(state)
    }

    pub fn rank(&self) -> usize {
        self.m.cols()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.m.data().iter().chain(self.s.data()).all(|&v| v >= 0.0)
    }

    /// `‖Z − M S‖_F / ‖Z‖_F`
    pub fn relative_residual(&self, z: &Tensor) -> Result<f64> {
        let r = z.sub(&matmul(&self.m, &self.s)?)?.frob_norm();
        let base = z.frob_norm();
        Ok(if base > 0.0 { r / base } else { r })
    }
}

/// `A` and `b` with `block(x) = A x + b 1ᵀ`, when the block is purely affine.
pub fn affine_map(block: &Block) -> Option<(Tensor, Tensor)> {
    if !block.is_affine() {
        return None;
    }
    let mut acc: Option<(Tensor, Tensor)> = None;
    for layer in block.layers() {
        let Layer::Linear(lin) = layer else { return None };
        let bias = lin.bias.clone().unwrap_or_else(|| Tensor::zeros(&[lin.weight.rows(), 1]));
        acc = Some(match acc {
            None => (lin.weight.clone(), bias),
            Some((a, b)) => {
                let a2 = matmul(&lin.weight, &a).ok()?;
                let b2 = matmul(&lin.weight, &b).ok()?.add(&bias).ok()?;
                (a2, b2)
            }
        });
    }
    acc
}

/// `γ/2 ‖Z − MS + V‖² (+ β/2 ‖Z_next − block(S) + U_next‖²)`
pub fn s_objective(nmf: &NmfState, z: &Tensor, s: &Tensor, next: Option<NextCoupling<'_>>) -> Result<f64> {
    let fit = z.sub(&matmul(&nmf.m, s)?)?.add(&nmf.v)?;
    let mut total = 0.5 * nmf.gamma * fit.sum_sq();
    if let Some(nc) = next {
        let out = nc.block.forward(s)?;
        total += 0.5 * nc.beta * residual_plus_dual(nc.z_next, &out, nc.u_next).sum_sq();
    }
    Ok(total)
}

/// Minimizes the `S` objective over `S ≥ 0`. Exact (stacked NNLS per column)
/// when the next block is affine or absent; otherwise `pg_steps` projected
/// Adam steps, each backtracked so the objective never rises.
pub fn update_s(nmf: &mut NmfState, z: &Tensor, next: Option<NextCoupling<'_>>, pg_steps: usize, pg_lr: f64) -> Result<()> {
    let target = z.add(&nmf.v)?;
    let affine = match next {
        None => Some(None),
        Some(nc) => affine_map(nc.block).map(|ab| Some((ab, nc))),
    };
    if let Some(extra) = affine {
        let mut g = matmul_tn(&nmf.m, &nmf.m)?.scale(nmf.gamma);
        let mut h = matmul_tn(&nmf.m, &target)?.scale(nmf.gamma);
        if let Some(((a, b), nc)) = extra {
            g.axpy(nc.beta, &matmul_tn(&a, &a)?)?;
            let mut rhs = nc.z_next.add(nc.u_next)?;
            for j in 0..rhs.cols() {
                for i in 0..rhs.rows() {
                    rhs.set(i, j, rhs.get(i, j) - b.get(i, 0));
                }
            }
            h.axpy(nc.beta, &matmul_tn(&a, &rhs)?)?;
        }
        let (s, capped) = nnls_columns(&g, &h)?;
        nmf.capped_solves += capped;
        // keep the old scores if rounding made the solve worse
        if s_objective(nmf, z, &s, next)? <= s_objective(nmf, z, &nmf.s, next)? {
            nmf.s = s;
        }
        return Ok(());
    }
    let nc = next.expect("non-affine path has a next block");
    let mut current = s_objective(nmf, z, &nmf.s, next)?;
    for _ in 0..pg_steps {
        let fit = matmul(&nmf.m, &nmf.s)?.sub(&target)?;
        let mut grad = matmul_tn(&nmf.m, &fit)?.scale(nmf.gamma);
        let (out, cache) = block_forward(nc.block, &nmf.s)?;
        let upstream = residual_plus_dual(nc.z_next, &out, nc.u_next).scale(-nc.beta);
        let (_, gi) = nc.block.backward(&cache, &upstream, false, true)?;
        grad.axpy(1.0, &gi.expect("requested"))?;
        let mut moved = nmf.s.clone();
        adam_step(&mut moved, &grad, &mut nmf.s_adam, pg_lr)?;
        let dir = nmf.s.sub(&moved)?;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let mut cand = nmf.s.clone();
            cand.axpy(-step, &dir)?;
            cand.map_inplace(|v| v.max(0.0));
            let f = s_objective(nmf, z, &cand, next)?;
            if f <= current {
                nmf.s = cand;
                current = f;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(())
}

/// Row-wise NNLS for `M ≥ 0` against `Z + V` with `S` fixed.
pub fn update_m(nmf: &mut NmfState, z: &Tensor) -> Result<()> {
    let target = z.add(&nmf.v)?;
    let g = matmul_nt(&nmf.s, &nmf.s)?;
    let h = matmul_nt(&nmf.s, &target)?;
    let (mt, capped) = nnls_columns(&g, &h)?;
    nmf.capped_solves += capped;
    let m = mt.transpose();
    let obj = |m: &Tensor| -> Result<f64> { Ok(target.sub(&matmul(m, &nmf.s)?)?.sum_sq()) };
    if obj(&m)? <= obj(&nmf.m)? {
        nmf.m = m;
    }
    Ok(())
}

/// `V += Z − M S`
pub fn update_v(nmf: &mut NmfState, z: &Tensor) -> Result<()> {
    let r = z.sub(&matmul(&nmf.m, &nmf.s)?)?;
    nmf.v.axpy(1.0, &r)
}

/// `s = argmin ‖M s − z‖` over `s ≥ 0` for every column of `z`.
pub fn project_test_time(m: &Tensor, z: &Tensor) -> Result<Tensor> {
    let g = matmul_tn(m, m)?;
    let h = matmul_tn(m, z)?;
    Ok(nnls_columns(&g, &h)?.0)
}

/// Inference: blocks up to `position`, projection onto `M`, remaining blocks.
pub fn deepfacto_predict(blocks: &[Block], m: &Tensor, position: usize, x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for (t, b) in blocks.iter().enumerate() {
        h = b.forward(&h)?;
        if t == position {
            h = project_test_time(m, &h)?;
        }
    }
    Ok(h)
}

/// Scores as CSV: one row per factor, one column per sample.
pub fn s_csv(s: &Tensor) -> String {
    let mut out = String::from("factor");
    for j in 0..s.cols() {
        out.push_str(&format!(",s{j}"));
    }
    out.push('\n');
    for i in 0..s.rows() {
        out.push_str(&i.to_string());
        for v in s.row(i) {
            out.push_str(&format!(",{v:e}"));
        }
        out.push('\n');
    }
    out
}

pub fn write_s_csv(path: &Path, s: &Tensor) -> Result<()> {
    std::fs::File::create(path)?.write_all(s_csv(s).as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepFactoConfig {
    pub admm: BatchAdmmConfig,
    /// Index of the block whose output is factorized; a block must follow it.
    pub position: usize,
    pub rank: usize,
    pub gamma: f64,
    pub phase1_iters: usize,
    /// Stop phase 1 once `‖Z − MS‖/‖Z‖` drops below this.
    pub phase1_tol: f64,
    pub pg_steps: usize,
    pub pg_lr: f64,
    pub init: NmfInit,
}

impl Default for DeepFactoConfig {
    fn default() -> Self {
        Self {
            admm: BatchAdmmConfig::default(),
            position: 0,
            rank: 8,
            gamma: 1.0,
            phase1_iters: 200,
            phase1_tol: 1e-4,
            pg_steps: 5,
            pg_lr: 1e-2,
            init: NmfInit::AbsNormal(0.1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeepFactoRun {
    pub blocks: Vec<Block>,
    pub nmf: NmfState,
    pub coupling: CouplingState,
    pub metrics: Vec<MetricsRecord>,
    pub phase1_residual: f64,
    pub phase1_iters: usize,
    /// Times `M` or `S` held a negative entry after an update (always 0).
    pub nonneg_violations: usize,
}

fn block_input<'a>(t: usize, x: &'a Tensor, st: &'a CouplingState, nmf: &'a NmfState, pos: usize) -> &'a Tensor {
    if t == 0 {
        x
    } else if t == pos + 1 {
        &nmf.s
    } else {
        &st.z[t - 1]
    }
}

/// Fits `M`, `S`, `V` to `z` with nothing else moving. Returns the final
/// relative residual and the number of iterations run.
pub fn phase1(nmf: &mut NmfState, z: &Tensor, iters: usize, tol: f64, violations: &mut usize) -> Result<(f64, usize)> {
    let mut resid = nmf.relative_residual(z)?;
    let mut done = 0;
    while done < iters && resid >= tol {
        update_s(nmf, z, None, 0, 0.0)?;
        update_m(nmf, z)?;
        update_v(nmf, z)?;
        *violations += usize::from(!nmf.is_nonnegative());
        resid = nmf.relative_residual(z)?;
        done += 1;
    }
    Ok((resid, done))
}

fn nmf_cycle(
    st: &mut CouplingState,
    nmf: &mut NmfState,
    blocks: &mut [Block],
    data: &Dataset,
    cfg: &DeepFactoConfig,
    rng: &mut Rng,
    violations: &mut usize,
) -> Result<f64> {
    let (x, y) = (&data.x, &data.y);
    let pos = cfg.position;
    let nb = blocks.len();
    let admm = &cfg.admm;
    for _ in 0..admm.primal_steps {
        let mut next: Option<(Tensor, BlockCache)> = None;
        for t in (0..nb).rev() {
            let input = block_input(t, x, st, nmf, pos);
            let keep = t > 0 && t != pos + 1;
            let (own_out, own_cache) = if keep {
                let (o, c) = block_forward(&blocks[t], input)?;
                (o, Some(c))
            } else {
                (blocks[t].forward(input)?, None)
            };
            let mut g = residual_plus_dual(&st.z[t], &own_out, &st.u[t]).scale(st.beta[t]);
            if t == nb - 1 {
                g.axpy(1.0, &admm.loss.grad(y, &st.z[t])?)?;
            } else if t == pos {
                let fit = st.z[t].sub(&matmul(&nmf.m, &nmf.s)?)?.add(&nmf.v)?;
                g.axpy(nmf.gamma, &fit)?;
            } else {
                let (out, cache) = next.as_ref().expect("cache of the following block");
                let s = t + 1;
                let upstream = residual_plus_dual(&st.z[s], out, &st.u[s]).scale(-st.beta[s]);
                let (_, gi) = blocks[s].backward(cache, &upstream, false, true)?;
                g.axpy(1.0, &gi.expect("requested"))?;
            }
            st.step_z(t, &g, per_block(&admm.z_lr, t))?;
            next = own_cache.map(|c| (own_out, c));
        }

        let nc = NextCoupling {
            block: &blocks[pos + 1],
            z_next: &st.z[pos + 1],
            u_next: &st.u[pos + 1],
            beta: st.beta[pos + 1],
        };
        update_s(nmf, &st.z[pos], Some(nc), cfg.pg_steps, cfg.pg_lr)?;
        update_m(nmf, &st.z[pos])?;
        *violations += usize::from(!nmf.is_nonnegative());

        let n = x.cols();
        let bs = admm.batch_size.min(n);
        for t in 0..nb {
            if !blocks[t].has_params() {
                continue;
            }
            let lr = per_block(&admm.theta_lr, t);
            let perm = rng.permutation(n);
            let batches: Vec<&[usize]> = perm.chunks(bs).collect();
            let steps = admm.theta_steps.unwrap_or(batches.len());
            for k in 0..steps {
                let input = block_input(t, x, st, nmf, pos);
                let g = penalty_param_grad(&blocks[t], input, &st.z[t], &st.u[t], st.beta[t], batches[k % batches.len()])?;
                blocks[t].apply_grads(&g, lr)?;
            }
        }
    }
    let mut total = 0.0;
    for t in 0..nb {
        let out = blocks[t].forward(block_input(t, x, st, nmf, pos))?;
        let r = st.z[t].sub(&out)?;
        total += r.frob_norm();
        st.u[t].axpy(1.0, &r)?;
    }
    total += nmf.relative_residual(&st.z[pos])? * st.z[pos].frob_norm();
    update_v(nmf, &st.z[pos])?;
    Ok(total)
}

/// Phase 1 (blocks frozen, factorization only) then `admm.epochs` joint cycles.
pub fn deepfacto_train(mut blocks: Vec<Block>, data: &Dataset, test: Option<&Dataset>, cfg: &DeepFactoConfig) -> Result<DeepFactoRun> {
    let nb = blocks.len();
    if cfg.position + 1 >= nb {
        return Err(Error::Config(format!(
            "nmf position {} needs a block after it ({} blocks)",
            cfg.position, nb
        )));
    }
    cfg.admm.validate(nb)?;
    for b in &mut blocks {
        if b.optimizer_kind() != cfg.admm.theta_optimizer {
            b.set_optimizer(cfg.admm.theta_optimizer);
        }
    }
    let root = Rng::new(cfg.admm.seed);
    let mut init_rng = root.fork(0x40);
    let mut rng = root.fork(0x41);
    let pos = cfg.position;
    let mut h = data.x.clone();
    let mut z = Vec::with_capacity(nb);
    for b in &blocks[..=pos] {
        h = b.forward(&h)?;
        z.push(h.clone());
    }
    let mut nmf = NmfState::init(&z[pos], cfg.rank, cfg.gamma, cfg.init, &mut init_rng)?;
    let mut violations = usize::from(!nmf.is_nonnegative());
    let (phase1_residual, phase1_iters) = phase1(&mut nmf, &z[pos], cfg.phase1_iters, cfg.phase1_tol, &mut violations)?;

    // the remaining blocks start from the scores, not from Z_pos
    let mut h = nmf.s.clone();
    for b in &blocks[pos + 1..] {
        h = b.forward(&h)?;
        z.push(h.clone());
    }
    let u = z
        .iter()
        .map(|zt| match cfg.admm.dual_init {
            batch::DualInit::Zero => Ok(Tensor::zeros(zt.shape())),
            batch::DualInit::Uniform(lo, hi) => crate::rng::init_uniform(zt.shape(), lo, hi, &mut init_rng),
        })
        .collect::<Result<Vec<_>>>()?;
    let beta = (0..nb).map(|t| per_block(&cfg.admm.beta, t)).collect();
    let mut st = CouplingState::new(z, u, beta, cfg.admm.z_optimizer)?;

    let mut metrics = Vec::with_capacity(cfg.admm.epochs);
    let mut elapsed = 0.0;
    for epoch in 1..=cfg.admm.epochs {
        let start = Instant::now();
        let residual = nmf_cycle(&mut st, &mut nmf, &mut blocks, data, cfg, &mut rng, &mut violations)?;
        elapsed += start.elapsed().as_secs_f64();
        let out = deepfacto_predict(&blocks, &nmf.m, pos, &data.x)?;
        let train_loss = cfg.admm.loss.value(&data.y, &out)?;
        if !train_loss.is_finite() || !residual.is_finite() {
            return Err(Error::Numeric("deepfacto training diverged".into()));
        }
        let test_accuracy = match test {
            Some(t) => accuracy(&t.y, &deepfacto_predict(&blocks, &nmf.m, pos, &t.x)?)?,
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
    Ok(DeepFactoRun {
        blocks,
        nmf,
        coupling: st,
        metrics,
        phase1_residual,
        phase1_iters,
        nonneg_violations: violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{one_hot, Split};
    use crate::loss::LossKind;
    use crate::nnls::nnls;

    #[test]
    fn reshape_round_trip_and_indexing() {
        let t = Tensor::new(vec![2, 3, 2, 2], (0..24).map(|v| v as f64).collect()).unwrap();
        let m = reshape_activations(&t).unwrap();
        assert_eq!(m.shape(), &[3, 8]);
        for n in 0..2 {
            for c in 0..3 {
                for h in 0..2 {
                    for w in 0..2 {
                        let v = (((n * 3 + c) * 2 + h) * 2 + w) as f64;
                        assert_eq!(m.get(c, (n * 2 + h) * 2 + w), v);
                    }
                }
            }
        }
        assert_eq!(unreshape_activations(&m, 2, 2, 2).unwrap(), t);
        let one = Tensor::new(vec![1, 1, 1, 1], vec![4.5]).unwrap();
        assert_eq!(reshape_activations(&one).unwrap().data(), &[4.5]);
        assert!(reshape_activations(&Tensor::zeros(&[2, 2])).is_err());
    }

    fn state(m: Tensor, s: Tensor, gamma: f64) -> NmfState {
        let (rows, cols) = (m.rows(), s.cols());
        NmfState {
            s_adam: AdamState::new(s.shape()),
            m,
            s,
            v: Tensor::zeros(&[rows, cols]),
            gamma,
            capped_solves: 0,
        }
    }

    #[test]
    fn s_update_simple_cases() {
        let mut nmf = state(Tensor::from_rows(&[&[1.0], &[1.0]]), Tensor::zeros(&[1, 1]), 1.0);
        update_s(&mut nmf, &Tensor::column_vector(&[1.0, 3.0]), None, 0, 0.0).unwrap();
        assert!((nmf.s.data()[0] - 2.0).abs() < 1e-14);

        let mut rng = Rng::new(1);
        let m = rng.normal_tensor(&[4, 2], 1.0).map(f64::abs);
        let s = rng.normal_tensor(&[2, 3], 1.0).map(f64::abs);
        let z = matmul(&m, &s).unwrap();
        let next = Block::new(1, vec![Layer::linear(rng.normal_tensor(&[2, 2], 1.0), None).unwrap()]).unwrap();
        let zn = next.forward(&s).unwrap();
        let un = Tensor::zeros(zn.shape());
        let mut nmf = state(m, s.clone(), 1.0);
        let nc = NextCoupling { block: &next, z_next: &zn, u_next: &un, beta: 1.0 };
        update_s(&mut nmf, &z, Some(nc), 0, 0.0).unwrap();
        assert!(nmf.s.sub(&s).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn s_update_never_increases_both_paths() {
        for seed in 0..6 {
            let mut rng = Rng::new(10 + seed);
            let m = rng.normal_tensor(&[5, 3], 1.0).map(f64::abs);
            let s0 = rng.normal_tensor(&[3, 6], 1.0).map(f64::abs);
            let z = rng.normal_tensor(&[5, 6], 1.0);
            let zn = rng.normal_tensor(&[2, 6], 1.0);
            let un = rng.normal_tensor(&[2, 6], 0.1);
            let affine = Block::new(
                1,
                vec![Layer::linear(rng.normal_tensor(&[2, 3], 1.0), Some(rng.normal_tensor(&[2, 1], 1.0))).unwrap()],
            )
            .unwrap();
            let nonlinear = Block::new(
                1,
                vec![
                    Layer::linear(rng.normal_tensor(&[4, 3], 1.0), None).unwrap(),
                    Layer::Relu,
                    Layer::linear(rng.normal_tensor(&[2, 4], 1.0), None).unwrap(),
                ],
            )
            .unwrap();
            for block in [&affine, &nonlinear] {
                let mut nmf = state(m.clone(), s0.clone(), 0.7);
                nmf.v = rng.normal_tensor(&[5, 6], 0.1);
                let nc = NextCoupling { block, z_next: &zn, u_next: &un, beta: 1.3 };
                let before = s_objective(&nmf, &z, &nmf.s, Some(nc)).unwrap();
                update_s(&mut nmf, &z, Some(nc), 10, 1e-2).unwrap();
                let after = s_objective(&nmf, &z, &nmf.s, Some(nc)).unwrap();
                assert!(after <= before, "{after} > {before}");
                assert!(nmf.s.min() >= 0.0);
                if block.is_affine() {
                    assert!(after < before);
                }
            }
        }
    }

    #[test]
    fn m_update_cases() {
        let mut rng = Rng::new(2);
        let z = rng.normal_tensor(&[3, 4], 1.0);
        let mut nmf = state(Tensor::zeros(&[3, 4]), Tensor::identity(4), 1.0);
        update_m(&mut nmf, &z).unwrap();
        assert!(nmf.m.sub(&z.map(|v| v.max(0.0))).unwrap().max_abs() < 1e-12);

        let m = rng.normal_tensor(&[4, 2], 1.0).map(f64::abs);
        let s = rng.normal_tensor(&[2, 5], 1.0).map(f64::abs);
        let z = matmul(&m, &s).unwrap();
        let mut nmf = state(m.clone(), s.clone(), 1.0);
        update_m(&mut nmf, &z).unwrap();
        assert!(nmf.m.sub(&m).unwrap().max_abs() < 1e-9);

        // per-row oracle
        let z = rng.normal_tensor(&[4, 5], 1.0);
        let mut nmf = state(m, s.clone(), 1.0);
        update_m(&mut nmf, &z).unwrap();
        for i in 0..4 {
            let want = nnls(&s.transpose(), z.row(i)).unwrap().x;
            for (a, b) in want.iter().zip(nmf.m.row(i)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn v_update_cases() {
        let m = Tensor::from_rows(&[&[1.0], &[2.0]]);
        let s = Tensor::from_rows(&[&[0.5]]);
        let mut nmf = state(m, s, 1.0);
        update_v(&mut nmf, &Tensor::column_vector(&[0.5, 1.0])).unwrap();
        assert_eq!(nmf.v.data(), &[0.0, 0.0]);
        update_v(&mut nmf, &Tensor::column_vector(&[1.5, 1.0])).unwrap();
        assert_eq!(nmf.v.data(), &[1.0, 0.0]);
    }

    #[test]
    fn v_scalar_trace_two_cycles() {
        // scalar z = 2, m₀ = 1, s₀ = 0.5: s ← (z+v)/m, m ← (z+v)/s, v += z − ms
        let z = 2.0f64;
        let (mut m, mut s, mut v) = (1.0f64, 0.5f64, 0.0f64);
        let mut nmf = state(Tensor::from_rows(&[&[m]]), Tensor::from_rows(&[&[s]]), 1.0);
        let zt = Tensor::column_vector(&[z]);
        for _ in 0..2 {
            s = ((z + v) / m).max(0.0);
            m = ((z + v) / s).max(0.0);
            v += z - m * s;
            update_s(&mut nmf, &zt, None, 0, 0.0).unwrap();
            update_m(&mut nmf, &zt).unwrap();
            update_v(&mut nmf, &zt).unwrap();
            assert!((nmf.s.data()[0] - s).abs() < 1e-12);
            assert!((nmf.m.data()[0] - m).abs() < 1e-12);
            assert!((nmf.v.data()[0] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_cases() {
        let mut rng = Rng::new(3);
        let m = rng.normal_tensor(&[6, 3], 1.0).map(f64::abs);
        let s0 = rng.normal_tensor(&[3, 4], 1.0).map(f64::abs);
        let s = project_test_time(&m, &matmul(&m, &s0).unwrap()).unwrap();
        assert!(s.sub(&s0).unwrap().max_abs() < 1e-8);
        let s = project_test_time(&Tensor::from_rows(&[&[1.0]]), &Tensor::column_vector(&[-1.0])).unwrap();
        assert_eq!(s.data(), &[0.0]);

        // long projected gradient descent oracle
        let z = rng.normal_tensor(&[6, 1], 1.0);
        let s = project_test_time(&m, &z).unwrap();
        let g = matmul_tn(&m, &m).unwrap();
        let h = matmul_tn(&m, &z).unwrap();
        let step = 1.0 / (0..3).map(|i| g.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
        let mut x = vec![0.0; 3];
        for _ in 0..200_000 {
            for i in 0..3 {
                let gi = (0..3).map(|j| g.get(i, j) * x[j]).sum::<f64>() - h.get(i, 0);
                x[i] = (x[i] - step * gi).max(0.0);
            }
        }
        for (a, b) in x.iter().zip(s.data()) {
            assert!((a - b).abs() < 1e-6, "{x:?} vs {:?}", s.data());
        }
    }

    #[test]
    fn s_csv_layout() {
        let s = Tensor::from_rows(&[&[1.0, 0.0], &[0.5, 2.0]]);
        assert_eq!(s_csv(&s), "factor,s0,s1\n0,1e0,0e0\n1,5e-1,2e0\n");
    }

    #[test]
    fn affine_composition() {
        let mut rng = Rng::new(4);
        let b = Block::new(
            0,
            vec![
                Layer::linear(rng.normal_tensor(&[3, 2], 1.0), Some(rng.normal_tensor(&[3, 1], 1.0))).unwrap(),
                Layer::linear(rng.normal_tensor(&[2, 3], 1.0), Some(rng.normal_tensor(&[2, 1], 1.0))).unwrap(),
            ],
        )
        .unwrap();
        let (a, c) = affine_map(&b).unwrap();
        let x = rng.normal_tensor(&[2, 5], 1.0);
        let mut want = matmul(&a, &x).unwrap();
        for j in 0..5 {
            for i in 0..2 {
                want.set(i, j, want.get(i, j) + c.get(i, 0));
            }
        }
        assert!(b.forward(&x).unwrap().sub(&want).unwrap().max_abs() < 1e-12);
        let nl = Block::new(0, vec![Layer::Relu]).unwrap();
        assert!(affine_map(&nl).is_none());
    }

    fn toy(n: usize, seed: u64) -> (Vec<Block>, Dataset) {
        let mut rng = Rng::new(seed);
        let x = rng.normal_tensor(&[3, n], 1.0).map(f64::abs);
        let labels: Vec<usize> = (0..n).map(|j| usize::from(x.get(0, j) > x.get(1, j))).collect();
        let ds = Dataset::new(x, one_hot(&labels, 2).unwrap(), "toy", Split::Train).unwrap();
        let b0 = Block::new(0, vec![Layer::linear(Tensor::identity(3), None).unwrap(), Layer::Relu]).unwrap();
        let b1 = Block::new(1, vec![Layer::linear(rng.normal_tensor(&[2, 3], 0.5), None).unwrap()]).unwrap();
        (vec![b0, b1], ds)
    }

    #[test]
    fn identity_rank_is_exact_and_trains() {
        let (blocks, ds) = toy(20, 5);
        let cfg = DeepFactoConfig {
            rank: 3,
            init: NmfInit::Identity,
            admm: BatchAdmmConfig {
                epochs: 5,
                loss: LossKind::Mse,
                batch_size: 5,
                ..Default::default()
            },
            ..Default::default()
        };
        let run = deepfacto_train(blocks, &ds, None, &cfg).unwrap();
        assert!(run.phase1_residual < 1e-6, "{}", run.phase1_residual);
        assert_eq!(run.nonneg_violations, 0);
        assert!(run.nmf.is_nonnegative());
        assert_eq!(run.nmf.s.shape(), &[3, 20]);
        assert_eq!(run.metrics.len(), 5);
        let again = deepfacto_train(toy(20, 5).0, &ds, None, &cfg).unwrap();
        assert_eq!(run.nmf, again.nmf);
    }

    #[test]
    fn rejects_missing_next_block() {
        let (blocks, ds) = toy(10, 6);
        let cfg = DeepFactoConfig { position: 1, ..Default::default() };
        assert!(deepfacto_train(blocks, &ds, None, &cfg).is_err());
    }
}
