//! Guidance, deterministic solver steps, teacher rollouts and few-step student sampling.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::GaussianOracle;
use crate::error::{invalid, Error, Result};
use crate::grad::{ParamStore, Tensor};
use crate::nets::{Cond, DenoiserNet};
use crate::schedule::{NoiseSchedule, ALPHA_FLOOR};
use crate::timesteps::inference_grid;

/// Anything that predicts the noise in `z` at per-row times `ts`.
pub trait EpsModel {
    fn eps(&self, z: &Tensor, ts: &[f64], conds: &[Cond]) -> Result<Tensor>;

    /// Clean-sample prediction `z/α − ε̂·σ/α`. States at `t` are read at the
    /// clamped time `min(t, 1 − clamp)`. Matches [`DenoiserNet::x0`] bit for bit.
    fn x0(&self, sched: &NoiseSchedule, z: &Tensor, ts: &[f64], conds: &[Cond]) -> Result<Tensor> {
        if let Some(&t) = ts.iter().find(|&&t| t <= 0.0) {
            return Err(Error::TimeOutOfRange { t, range: "(0, 1]" });
        }
        let tcs: Vec<f64> = ts.iter().map(|&t| sched.x0_time(t)).collect();
        let eps = self.eps(z, &tcs, conds)?;
        let d = z.cols();
        let mut out = Vec::with_capacity(z.len());
        for (r, &t) in ts.iter().enumerate() {
            let tc = sched.x0_time(t);
            let a = sched.alpha(tc);
            if a < ALPHA_FLOOR {
                return Err(Error::Singular { t, what: "alpha(t) ~ 0 in student prediction" });
            }
            let (ia, sa) = (1.0 / a, sched.sigma(tc) / a);
            for c in 0..d {
                out.push(z.row(r)[c] * ia - eps.row(r)[c] * sa);
            }
        }
        Tensor::new(z.shape().to_vec(), out)
    }
}

/// A network read from a parameter store.
#[derive(Clone, Copy)]
pub struct NetModel<'a> {
    pub net: &'a DenoiserNet,
    pub store: &'a ParamStore,
}

impl<'a> NetModel<'a> {
    pub fn new(net: &'a DenoiserNet, store: &'a ParamStore) -> Self {
        Self { net, store }
    }
}

impl EpsModel for NetModel<'_> {
    fn eps(&self, z: &Tensor, ts: &[f64], conds: &[Cond]) -> Result<Tensor> {
        self.net.forward(self.store, z, ts, conds)
    }
}

/// The exact noise predictor of a Gaussian data law; ignores the condition.
#[derive(Clone, Debug)]
pub struct OracleModel {
    pub oracle: GaussianOracle,
    pub sched: NoiseSchedule,
}

impl EpsModel for OracleModel {
    fn eps(&self, z: &Tensor, ts: &[f64], _conds: &[Cond]) -> Result<Tensor> {
        if ts.len() != z.rows() {
            return Err(Error::Shape {
                op: "oracle eps",
                detail: format!("{} timesteps for {} rows", ts.len(), z.rows()),
            });
        }
        if ts.iter().all(|&t| t == ts[0]) {
            return self.oracle.eps_star(z, ts[0], &self.sched);
        }
        let mut out = Vec::with_capacity(z.len());
        for (r, &t) in ts.iter().enumerate() {
            let row = z.select_rows(&[r]);
            out.extend(self.oracle.eps_star(&row, t, &self.sched)?.into_data());
        }
        Tensor::new(z.shape().to_vec(), out)
    }
}

/// `ω·ε_cond + (1−ω)·ε_uncond`, returning the matching input exactly at ω ∈ {0, 1}.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, omega: f64) -> Result<Tensor> {
    eps_cond.same_shape(eps_uncond, "cfg_combine")?;
    if !(omega >= 0.0 && omega.is_finite()) {
        return Err(invalid(format!("guidance scale must be finite and non-negative, got {omega}")));
    }
    if omega == 1.0 {
        return Ok(eps_cond.clone());
    }
    if omega == 0.0 {
        return Ok(eps_uncond.clone());
    }
    // Written around the conditional branch so equal inputs come back unchanged.
    eps_cond.zip(eps_uncond, |c, u| c + (omega - 1.0) * (c - u), "cfg_combine")
}

/// Guided noise estimate and the number of network evaluations spent on it.
/// With `skip_unit` set, `ω = 1` evaluates only the conditional branch.
pub fn guided_eps(
    model: &dyn EpsModel,
    z: &Tensor,
    ts: &[f64],
    conds: &[Cond],
    omega: f64,
    skip_unit: bool,
) -> Result<(Tensor, usize)> {
    let cond = model.eps(z, ts, conds)?;
    if skip_unit && omega == 1.0 {
        return Ok((cond, 1));
    }
    let nulls = vec![Cond::Null; conds.len()];
    let uncond = model.eps(z, ts, &nulls)?;
    Ok((cfg_combine(&cond, &uncond, omega)?, 2))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    /// Deterministic exponential integrator.
    Ddim,
    /// Explicit Euler on the probability-flow ODE.
    EulerPfOde,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Ddim => "ddim",
            SolverKind::EulerPfOde => "euler_pf_ode",
        }
    }
}

/// A solver and the descending grid it integrates over.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverSpec {
    pub kind: SolverKind,
    pub grid: Vec<f64>,
}

impl SolverSpec {
    /// Checks the grid is strictly decreasing and lies on `{i/K}`.
    pub fn new(kind: SolverKind, grid: Vec<f64>, k: usize) -> Result<Self> {
        if grid.len() < 2 {
            return Err(invalid("solver grid needs at least two times"));
        }
        if grid.windows(2).any(|w| w[0] <= w[1]) {
            return Err(invalid(format!("solver grid must be strictly decreasing: {grid:?}")));
        }
        for &t in &grid {
            let scaled = t * k as f64;
            if !(0.0..=1.0).contains(&t) || (scaled - scaled.round()).abs() > 1e-9 {
                return Err(invalid(format!("grid time {t} is not a multiple of 1/{k}")));
            }
        }
        Ok(Self { kind, grid })
    }

    /// `n` equal steps from `t = 1` down to `0`.
    pub fn uniform(kind: SolverKind, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid("solver needs at least one step"));
        }
        Self::new(kind, (0..=n).rev().map(|j| j as f64 / n as f64).collect(), n)
    }

    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }
}

/// One deterministic step of `z` from `t_from` down to `t_to`.
pub fn solver_step(
    z: &Tensor,
    eps: &Tensor,
    t_from: f64,
    t_to: f64,
    sched: &NoiseSchedule,
    kind: SolverKind,
) -> Result<Tensor> {
    if !(t_from > t_to && t_to >= 0.0 && t_from <= 1.0) {
        return Err(invalid(format!("solver step needs 1 ≥ t_from > t_to ≥ 0, got {t_from} → {t_to}")));
    }
    z.same_shape(eps, "solver_step")?;
    match kind {
        SolverKind::Ddim => {
            let x0 = sched.eps_to_x0(z, eps, sched.x0_time(t_from))?;
            if t_to == 0.0 {
                return Ok(x0);
            }
            let (a, s) = (sched.alpha(t_to), sched.sigma(t_to));
            x0.zip(eps, |x, e| a * x + s * e, "solver_step")
        }
        SolverKind::EulerPfOde => {
            // Coefficients diverge at t = 1; their combination stays bounded, so
            // they are read just below it.
            let tc = sched.x0_time(t_from);
            let (f, g2) = sched.pf_ode_coeffs(tc)?;
            let s = sched.sigma(tc);
            let dt = t_to - t_from;
            z.zip(eps, |zv, e| zv + dt * (f * zv + 0.5 * g2 * e / s), "solver_step")
        }
    }
}

/// Integrates `z` along `grid` with guided noise estimates. Returns the terminal
/// state and the network evaluations spent. The model sees clamped times, so a
/// grid starting at `t = 1` is read just below it.
#[allow(clippy::too_many_arguments)]
pub fn integrate(
    model: &dyn EpsModel,
    z: &Tensor,
    grid: &[f64],
    omega: f64,
    conds: &[Cond],
    sched: &NoiseSchedule,
    kind: SolverKind,
    skip_unit: bool,
) -> Result<(Tensor, usize)> {
    let mut z = z.clone();
    let mut nfe = 0;
    let mut ts = vec![0.0; z.rows()];
    for w in grid.windows(2) {
        ts.fill(sched.x0_time(w[0]));
        let (eps, n) = guided_eps(model, &z, &ts, conds, omega, skip_unit)?;
        nfe += n;
        z = solver_step(&z, &eps, w[0], w[1], sched, kind)?;
    }
    Ok((z, nfe))
}

/// Which sub-grid a teacher rollout from atom `i` walks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutGrid {
    /// Every atom `j/K` for `j = i … 0`.
    Full,
    /// At most `n` evenly spread atoms below `i`.
    Thinned(usize),
}

impl RolloutGrid {
    /// Descending times from `i/K` to `0`.
    pub fn times(self, i: usize, k: usize) -> Result<Vec<f64>> {
        if i == 0 || i > k {
            return Err(invalid(format!("rollout index {i} outside 1..={k}")));
        }
        let idx: Vec<usize> = match self {
            RolloutGrid::Full => (0..=i).rev().collect(),
            RolloutGrid::Thinned(0) => return Err(invalid("thinned rollout needs at least one step")),
            RolloutGrid::Thinned(n) => {
                let n = n.min(i);
                let mut v: Vec<usize> = (0..=n).rev().map(|m| (i * m + n / 2) / n).collect();
                v.dedup();
                v
            }
        };
        Ok(idx.into_iter().map(|j| j as f64 / k as f64).collect())
    }
}

/// Output of a teacher rollout.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub x0: Tensor,
    pub nfe: usize,
}

/// Guided teacher trajectory from `z_t` at `t = i/K` to a clean estimate. Both CFG
/// branches are always evaluated, so the cost is two evaluations per step. The
/// result is a plain tensor and carries no gradient path.
#[allow(clippy::too_many_arguments)]
pub fn teacher_rollout(
    teacher: &dyn EpsModel,
    z_t: &Tensor,
    i: usize,
    omega: f64,
    conds: &[Cond],
    sched: &NoiseSchedule,
    k: usize,
    kind: SolverKind,
    grid: RolloutGrid,
) -> Result<Rollout> {
    let times = grid.times(i, k)?;
    let (x0, nfe) = integrate(teacher, z_t, &times, omega, conds, sched, kind, false)?;
    Ok(Rollout { x0, nfe })
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Result<Tensor> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect())
}

/// Samples from pure noise with the teacher on `spec.grid`. Unit guidance skips
/// the unconditional branch.
pub fn teacher_sample<R: Rng + ?Sized>(
    teacher: &dyn EpsModel,
    spec: &SolverSpec,
    omega: f64,
    conds: &[Cond],
    sched: &NoiseSchedule,
    dim: usize,
    rng: &mut R,
) -> Result<(Tensor, usize)> {
    if spec.grid[0] != 1.0 || *spec.grid.last().expect("non-empty grid") != 0.0 {
        return Err(invalid("sampling grid must run from 1 to 0"));
    }
    let z = standard_normal(rng, conds.len(), dim)?;
    integrate(teacher, &z, &spec.grid, omega, conds, sched, spec.kind, true)
}

/// Few-step student sampling: denoise at each grid time, re-noise the estimate to
/// the next time with fresh noise. One evaluation per step, no guidance.
pub fn student_sample<R: Rng + ?Sized>(
    student: &dyn EpsModel,
    sched: &NoiseSchedule,
    n_steps: usize,
    k: usize,
    conds: &[Cond],
    dim: usize,
    rng: &mut R,
) -> Result<(Tensor, usize)> {
    let grid = inference_grid(n_steps, k)?;
    let n = conds.len();
    let mut z = standard_normal(rng, n, dim)?;
    let mut x0 = z.clone();
    for (s, &t) in grid.iter().enumerate() {
        x0 = student.x0(sched, &z, &vec![t; n], conds)?;
        if let Some(&next) = grid.get(s + 1) {
            let eps = standard_normal(rng, n, dim)?;
            z = sched.forward_diffuse(&x0, next, &eps)?;
        }
    }
    Ok((x0, grid.len()))
}
