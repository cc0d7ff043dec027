//! Bounded m-solutions: enforce `E g(x(t)) = 0` and keep
//! `P(|lambda(t)| > eps) <= alpha` by replacing the constraint with
//!
//! ```text
//! h(x,u) = (Dg) f + 1/2 Tr(sigma' D2g sigma) + b g
//! ```
//!
//! On `h = 0` the Itô drift of `lambda = g(x)` is `-b lambda`, so
//! `E|lambda|^2 <= J (1 - e^{-2bt}) / (2b)` with `J = sup Tr(A A')`,
//! `A = (Dg) sigma`, and Chebyshev turns this into the probability bound once
//! `b > J / (2 eps^2 alpha)`.

use crate::error::{Error, Result};
use crate::expr::{Compiled, Expr, Var};
use crate::index1::{solve_index1_with, Index1Reduction};
use crate::integrator::{constraint_process, fault_status, finish_path, steps_for, PathStatus, SamplePath};
use crate::linalg::{Lu, Matrix};
use crate::problem::{compile_all, eval_all, SdaeProblem, SINGULAR_GUARD};
use crate::reduction::reduce_once;
use crate::rng::wiener_increments;
use crate::wellposed::{grid_len, grid_point};

/// Inflation applied to the grid estimate of `J`.
pub const DEFAULT_TRACE_SAFETY: f64 = 1.05;
/// Margin above the threshold `J / (2 eps^2 alpha)` when picking `b`.
pub const DEFAULT_GAIN_SAFETY: f64 = 1.1;
pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct BoundedConfig {
    pub epsilon: f64,
    pub alpha: f64,
    /// Region for the supremum: one interval per `x` coordinate, followed by
    /// one per `u` coordinate when the noise depends on `u`.
    pub bx: Vec<(f64, f64)>,
    pub grid_per_dim: usize,
    pub trace_safety: f64,
    /// Explicit gain; `None` means [`choose_b`].
    pub b: Option<f64>,
}

impl BoundedConfig {
    pub fn new(epsilon: f64, alpha: f64, bx: Vec<(f64, f64)>) -> Self {
        Self { epsilon, alpha, bx, grid_per_dim: 101, trace_safety: DEFAULT_TRACE_SAFETY, b: None }
    }

    fn check(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Precondition(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Precondition(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(self.trace_safety >= 1.0) {
            return Err(Error::Precondition("the trace safety factor must be at least 1".into()));
        }
        Ok(())
    }
}

/// Grid estimate of `J = sup Tr(A A')`.
#[derive(Debug, Clone, PartialEq)]
pub struct SupTrace {
    /// Largest value on the coarse grid.
    pub grid_max: f64,
    /// After one refinement around the coarse argmax.
    pub raw: f64,
    /// `raw * safety`.
    pub inflated: f64,
    pub argmax: Vec<f64>,
}

fn trace_code(pr: &SdaeProblem) -> Result<Vec<Compiled>> {
    let (n, p, d) = (pr.n, pr.p, pr.d);
    let xs: Vec<Var> = (1..=n).map(Var::X).collect();
    let grads: Vec<Vec<Expr>> = pr.constraint.iter().map(|g| g.gradient(&xs)).collect();
    let a: Vec<Expr> = (0..p)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| {
            let dgs = Expr::sum((0..n).map(|w| Expr::mul(grads[i][w].clone(), pr.diffusion[w][j].clone())));
            Expr::add(dgs, pr.constraint_noise[i][j].clone())
        })
        .collect();
    compile_all(&a, pr.layout())
}

/// `sup Tr(A A')` over `bx`: grid maximum, then a grid at half spacing over
/// the cells adjacent to the argmax.
pub fn sup_trace(pr: &SdaeProblem, bx: &[(f64, f64)], grid_per_dim: usize, safety: f64) -> Result<SupTrace> {
    let (n, m) = (pr.n, pr.m);
    let needs_u = pr.diffusion_mentions_u()
        || pr.constraint.iter().any(Expr::mentions_u)
        || pr.constraint_noise.iter().flatten().any(Expr::mentions_u);
    let dims = if needs_u { n + m } else { n };
    if bx.len() != dims {
        return Err(Error::DimensionMismatch(format!(
            "the box needs {dims} intervals ({}), got {}",
            if needs_u { "x then u" } else { "one per x" },
            bx.len()
        )));
    }
    let per_dim = grid_per_dim.max(2);
    let code = trace_code(pr)?;
    let mut slots = vec![0.0; n + m];
    slots[n..].copy_from_slice(&pr.u0);
    let mut stack = Vec::new();
    let mut a = vec![0.0; code.len()];
    let mut trace_at = |pt: &[f64]| -> Result<f64> {
        slots[..dims].copy_from_slice(pt);
        eval_all(&code, &slots, &mut a, &mut stack)?;
        Ok(a.iter().map(|v| v * v).sum())
    };
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for k in 0..grid_len(dims, per_dim) {
        let pt = grid_point(bx, per_dim, k);
        let v = trace_at(&pt)?;
        if v > best.0 {
            best = (v, pt);
        }
    }
    let grid_max = best.0;
    let local: Vec<(f64, f64)> = bx
        .iter()
        .zip(&best.1)
        .map(|(&(lo, hi), &c)| {
            let h = (hi - lo) / (per_dim - 1) as f64;
            ((c - h).max(lo), (c + h).min(hi))
        })
        .collect();
    for k in 0..grid_len(dims, 5) {
        let pt = grid_point(&local, 5, k);
        let v = trace_at(&pt)?;
        if v > best.0 {
            best = (v, pt);
        }
    }
    Ok(SupTrace { grid_max, raw: best.0, inflated: best.0 * safety, argmax: best.1 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gain {
    /// `J / (2 eps^2 alpha)`
    pub threshold: f64,
    pub b: f64,
}

/// `b = safety * J / (2 eps^2 alpha)`, or 1 when `J = 0`.
pub fn choose_b(j: f64, epsilon: f64, alpha: f64, safety: f64) -> Gain {
    let threshold = j / (2.0 * epsilon * epsilon * alpha);
    let b = if j > 0.0 { safety * threshold } else { 1.0 };
    Gain { threshold, b }
}

/// `J (1 - e^{-2bt}) / (2b)`.
pub fn bound_curve(j: f64, b: f64, t: f64) -> f64 {
    if b == 0.0 {
        j * t
    } else {
        j * (-(-2.0 * b * t).exp_m1()) / (2.0 * b)
    }
}

/// The index-1 problem with constraint `h`.
pub fn build_bounded_constraint(pr: &SdaeProblem, b: f64) -> Result<SdaeProblem> {
    if !pr.is_high_index() {
        return Err(Error::Precondition("the constraint already references u; the problem is index 1".into()));
    }
    if pr.m != pr.p {
        return Err(Error::DimensionMismatch(format!("need m = p, got m = {} and p = {}", pr.m, pr.p)));
    }
    if pr.has_constraint_noise() {
        return Err(Error::Precondition("the constraint carries noise; suspend the problem first".into()));
    }
    let step = reduce_once(pr)?;
    let constraint = (0..pr.p)
        .map(|i| Expr::add(step.problem.constraint[i].clone(), Expr::mul(Expr::constant(b), pr.constraint[i].clone())))
        .collect();
    Ok(SdaeProblem {
        name: format!("{}-bounded", pr.name),
        constraint,
        constraint_noise: vec![vec![Expr::zero(); pr.d]; pr.p],
        ..pr.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundedMode {
    /// Euler–Maruyama on `x`, Newton for `u` at every step.
    #[default]
    NewtonPerStep,
    /// Euler–Maruyama on the index-1 reduction of `h = 0`.
    Lemma1Reduction,
}

/// `h` with its `u`-Jacobian, compiled.
#[derive(Debug, Clone)]
pub struct BoundedSystem {
    pub problem: SdaeProblem,
    pub b: f64,
    f: Vec<Compiled>,
    sigma: Vec<Compiled>,
    h: Vec<Compiled>,
    dh: Vec<Compiled>,
}

impl BoundedSystem {
    pub fn new(pr: &SdaeProblem, b: f64) -> Result<Self> {
        let problem = build_bounded_constraint(pr, b)?;
        let layout = pr.layout();
        let us = layout.u_vars();
        let dh: Vec<Expr> = problem.constraint.iter().flat_map(|h| h.gradient(&us)).collect();
        Ok(Self {
            f: compile_all(&pr.drift, layout)?,
            sigma: compile_all(pr.diffusion.iter().flatten(), layout)?,
            h: compile_all(&problem.constraint, layout)?,
            dh: compile_all(&dh, layout)?,
            problem,
            b,
        })
    }

    /// Newton on `h(x, .) = 0` from `guess`; returns `u` and the iteration count.
    pub fn solve_u(&self, x: &[f64], guess: &[f64], stack: &mut Vec<f64>) -> Result<(Vec<f64>, usize)> {
        let (n, m) = (self.problem.n, self.problem.m);
        let mut slots = Vec::with_capacity(n + m);
        slots.extend_from_slice(x);
        slots.extend_from_slice(guess);
        let mut r = vec![0.0; m];
        let mut jac = Matrix::zeros(m, m);
        let mut residual = f64::INFINITY;
        for it in 0..=NEWTON_MAX_ITER {
            eval_all(&self.h, &slots, &mut r, stack)?;
            residual = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if residual <= NEWTON_TOL {
                return Ok((slots[n..].to_vec(), it));
            }
            if !residual.is_finite() || it == NEWTON_MAX_ITER {
                break;
            }
            eval_all(&self.dh, &slots, jac.as_mut_slice(), stack)?;
            if m == 1 {
                let j = jac.as_slice()[0];
                if !(j.abs() >= SINGULAR_GUARD) {
                    return Err(Error::SingularJacobian(j));
                }
                slots[n] -= r[0] / j;
                continue;
            }
            let lu = Lu::new(&jac);
            let det = lu.det();
            if !(det.abs() >= SINGULAR_GUARD) {
                return Err(Error::SingularJacobian(det));
            }
            lu.solve_in_place(&mut r);
            for (u, dr) in slots[n..].iter_mut().zip(&r) {
                *u -= dr;
            }
        }
        Err(Error::NewtonDivergence { iterations: NEWTON_MAX_ITER, residual })
    }

    /// `u0` with `h(x0, u0) = 0`, checking that `D_u h` is invertible there.
    pub fn initial_u(&self) -> Result<Vec<f64>> {
        let pr = &self.problem;
        let mut stack = Vec::new();
        let u0 = match self.solve_u(&pr.x0, &pr.u0, &mut stack) {
            Err(Error::SingularJacobian(det)) => return Err(Error::SingularReduction { det: det.abs(), guard: SINGULAR_GUARD }),
            other => other?.0,
        };
        let mut slots = pr.x0.clone();
        slots.extend_from_slice(&u0);
        let mut jac = Matrix::zeros(pr.m, pr.m);
        eval_all(&self.dh, &slots, jac.as_mut_slice(), &mut stack)?;
        let det = Lu::new(&jac).det();
        if !(det.abs() >= SINGULAR_GUARD) {
            return Err(Error::SingularReduction { det: det.abs(), guard: SINGULAR_GUARD });
        }
        Ok(u0)
    }

    /// Per-step Newton path from `(x0, u0)`.
    pub fn integrate(&self, u0: &[f64], dt: f64, t_end: f64, increments: &[f64], seed: u64) -> Result<(SamplePath, Vec<usize>)> {
        let pr = &self.problem;
        let (n, m, d) = (pr.n, pr.m, pr.d);
        let steps = steps_for(t_end, dt);
        if increments.len() < steps * d {
            return Err(Error::DimensionMismatch(format!("{} increments supplied, {} needed", increments.len(), steps * d)));
        }
        let dim = n + m;
        let mut states = Vec::with_capacity((steps + 1) * dim);
        states.extend_from_slice(&pr.x0);
        states.extend_from_slice(u0);
        let mut iterations = Vec::with_capacity(steps);
        let (mut f, mut sig) = (vec![0.0; n], vec![0.0; n * d]);
        let mut stack = Vec::new();
        let mut next = vec![0.0; n];
        let (mut status, mut detail) = (PathStatus::Completed, None);
        for k in 0..steps {
            let s = &states[k * dim..(k + 1) * dim];
            if let Err(e) = eval_all(&self.f, s, &mut f, &mut stack).and_then(|_| eval_all(&self.sigma, s, &mut sig, &mut stack)) {
                (status, detail) = fault_status(e.into(), k);
                break;
            }
            let dw = &increments[k * d..(k + 1) * d];
            for i in 0..n {
                next[i] = s[i] + f[i] * dt + (0..d).map(|j| sig[i * d + j] * dw[j]).sum::<f64>();
            }
            if next.iter().any(|v| !v.is_finite()) {
                (status, detail) = (PathStatus::DomainError { step: k }, Some("state became non-finite".into()));
                break;
            }
            let guess = s[n..].to_vec();
            match self.solve_u(&next, &guess, &mut stack) {
                Ok((u, it)) => {
                    iterations.push(it);
                    states.extend_from_slice(&next);
                    states.extend_from_slice(&u);
                }
                Err(Error::NewtonDivergence { residual, .. }) => {
                    status = PathStatus::DomainError { step: k };
                    detail = Some(format!("Newton did not converge (residual {residual:e})"));
                    break;
                }
                Err(e) => {
                    (status, detail) = fault_status(e.into(), k);
                    break;
                }
            }
        }
        let labels = pr.layout().vars().iter().map(|v| v.to_string()).collect();
        let path = finish_path(labels, dt, states, d, increments[..steps * d].to_vec(), seed, status, detail);
        Ok((path, iterations))
    }

    /// `(Dg) f + 1/2 Tr(sigma' D2g sigma)` at `(x, u)` with the tree evaluator;
    /// equals `-b g` wherever `h = 0`.
    pub fn lambda_drift(&self, pr: &SdaeProblem, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let bind = crate::expr::Bindings::from_state(x, u);
        let xs: Vec<Var> = (1..=pr.n).map(Var::X).collect();
        let f: Vec<f64> = pr.drift.iter().map(|e| e.evaluate(&bind)).collect::<Result<_>>()?;
        let s: Vec<Vec<f64>> =
            pr.diffusion.iter().map(|r| r.iter().map(|e| e.evaluate(&bind)).collect()).collect::<Result<_>>()?;
        pr.constraint
            .iter()
            .map(|g| {
                let grad = g.gradient(&xs);
                let mut v = 0.0;
                for (a, ga) in grad.iter().enumerate() {
                    v += ga.evaluate(&bind)? * f[a];
                    for (c, xc) in xs.iter().enumerate() {
                        let hac = ga.differentiate(*xc).evaluate(&bind)?;
                        v += 0.5 * hac * (0..pr.d).map(|j| s[a][j] * s[c][j]).sum::<f64>();
                    }
                }
                Ok(v)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct BoundedSolution {
    pub path: SamplePath,
    /// Row-major `len x p` values of `lambda = g(x)`.
    pub lambda: Vec<f64>,
    /// Newton iterations per step; empty for the reduction mode.
    pub newton_iterations: Vec<usize>,
    pub b: f64,
    pub u0: Vec<f64>,
}

impl BoundedSolution {
    /// 1 when the path was stopped by the singularity guard.
    pub fn guard_trips(&self) -> usize {
        usize::from(matches!(self.path.status, PathStatus::SingularReduction { .. }))
    }
}

/// Gain from the config: explicit `b`, else [`choose_b`] on the raw grid
/// supremum. Returns the gain and the trace estimate.
pub fn resolve_gain(pr: &SdaeProblem, cfg: &BoundedConfig) -> Result<(Gain, SupTrace)> {
    cfg.check()?;
    let j = sup_trace(pr, &cfg.bx, cfg.grid_per_dim, cfg.trace_safety)?;
    let auto = choose_b(j.raw, cfg.epsilon, cfg.alpha, DEFAULT_GAIN_SAFETY);
    let gain = match cfg.b {
        Some(b) => Gain { threshold: auto.threshold, b },
        None => auto,
    };
    Ok((gain, j))
}

pub fn solve_bounded(
    pr: &SdaeProblem,
    cfg: &BoundedConfig,
    dt: f64,
    t_end: f64,
    seed: u64,
    mode: BoundedMode,
) -> Result<BoundedSolution> {
    let (gain, _) = resolve_gain(pr, cfg)?;
    let sys = BoundedSystem::new(pr, gain.b)?;
    let inc = wiener_increments(seed, steps_for(t_end, dt), pr.d, dt);
    solve_bounded_with(pr, &sys, dt, t_end, &inc, seed, mode)
}

/// As [`solve_bounded`] with a prepared system and given increments.
pub fn solve_bounded_with(
    pr: &SdaeProblem,
    sys: &BoundedSystem,
    dt: f64,
    t_end: f64,
    increments: &[f64],
    seed: u64,
    mode: BoundedMode,
) -> Result<BoundedSolution> {
    let u0 = sys.initial_u()?;
    let (path, newton_iterations) = match mode {
        BoundedMode::NewtonPerStep => sys.integrate(&u0, dt, t_end, increments, seed)?,
        BoundedMode::Lemma1Reduction => {
            let mut h = sys.problem.clone();
            h.u0 = u0.clone();
            let red = Index1Reduction::new(&h)?;
            (solve_index1_with(&red, dt, t_end, increments, seed)?.path, Vec::new())
        }
    };
    let lambda = constraint_process(pr, &path)?;
    Ok(BoundedSolution { path, lambda, newton_iterations, b: sys.b, u0 })
}
