//! Approximate solutions that keep `|g(x(t))| < eps` with probability one.
//!
//! The user supplies a characteristic map `y(0, v)` with `|g(y(0,v))| < eps`
//! everywhere. Choosing the algebraic dynamics `du = a dt + B dW` so that
//! `z_t(v) = g(y(t,v))` stays frozen gives, with `K = (Dg) D_v y`,
//!
//! ```text
//! B      = K^-1 (Dg) sigma
//! Lambda = sigma - D_v y B
//! chi_i  = sum_w d_w g_i (f_w - 1/2 B_km d2_jk y_w B_jm - d_l Lambda_wj B_lj)
//!          + 1/2 Lambda_kj d2_kl g_i Lambda_lj
//! a      = K^-1 chi
//! ```
//!
//! `Dg` is taken at the current state and `D_v y` at the current `u`. The
//! derivative `d_l Lambda` is the total derivative along `x = y(v)`,
//! assembled exactly from first and second symbolic derivatives.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::expr::{Bindings, Compiled, Expr, Var, VarLayout};
use crate::integrator::{euler_maruyama, steps_for, AugmentedSde, Fault, SamplePath, SdeField, Workspace};
use crate::linalg::{newton, Lu, Matrix};
use crate::problem::{compile_all, eval_all, SdaeProblem, SINGULAR_GUARD};
use crate::rng::wiener_increments;
use crate::wellposed::{grid_len, grid_point};

/// `y(0, v)` written in `u1..um`, and the bound it has to respect.
#[derive(Debug, Clone, PartialEq)]
pub struct CharacteristicSpec {
    pub y: Vec<Expr>,
    pub epsilon: f64,
}

/// Grid used to check `sup |g(y(0,v))| < eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationGrid {
    /// One interval per algebraic variable.
    pub bx: Vec<(f64, f64)>,
    pub per_dim: usize,
}

impl ValidationGrid {
    pub fn default_for(m: usize) -> Self {
        Self { bx: vec![(-10.0, 10.0); m], per_dim: 101 }
    }
}

impl CharacteristicSpec {
    pub fn parse(y: &[&str], epsilon: f64) -> Result<Self> {
        Ok(Self { y: y.iter().map(|s| crate::expr::parse(s)).collect::<Result<_>>()?, epsilon })
    }

    /// The worked example's `y = (-(eps/4pi) atan(u1), 0)`.
    pub fn worked_example(epsilon: f64) -> Self {
        let c = -epsilon / (4.0 * std::f64::consts::PI);
        Self {
            y: vec![
                Expr::mul(Expr::constant(c), Expr::unary(crate::expr::UnaryOp::Atan, Expr::var(Var::U(1)))),
                Expr::zero(),
            ],
            epsilon,
        }
    }

    /// Shape and variable checks plus the sampled bound. Returns the
    /// largest `|g(y(0,v))|` seen on the grid.
    pub fn validate(&self, pr: &SdaeProblem, grid: &ValidationGrid) -> Result<f64> {
        if !(self.epsilon > 0.0) {
            return Err(Error::SpecInvalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.y.len() != pr.n {
            return Err(Error::SpecInvalid(format!("y has {} components, expected n = {}", self.y.len(), pr.n)));
        }
        for e in &self.y {
            for v in e.free_vars() {
                if !matches!(v, Var::U(k) if (1..=pr.m).contains(&k)) {
                    return Err(Error::SpecInvalid(format!("y may only use u1..u{}, found {v}", pr.m)));
                }
            }
        }
        if grid.bx.len() != pr.m {
            return Err(Error::SpecInvalid(format!("validation box has {} intervals, expected m = {}", grid.bx.len(), pr.m)));
        }
        let total = grid_len(pr.m, grid.per_dim);
        let mut worst = 0.0f64;
        for k in 0..total {
            let v = grid_point(&grid.bx, grid.per_dim, k);
            let norm = self.z0_norm(pr, &v)?;
            if !(norm < self.epsilon) {
                return Err(Error::SpecInvalid(format!(
                    "|g(y(0,v))| = {norm:.6e} is not below epsilon = {} at v = {v:?}",
                    self.epsilon
                )));
            }
            worst = worst.max(norm);
        }
        Ok(worst)
    }

    /// `y(0, v)`.
    pub fn y_at(&self, v: &[f64]) -> Result<Vec<f64>> {
        let b = Bindings::from_state(&[], v);
        self.y.iter().map(|e| e.evaluate(&b)).collect()
    }

    /// `z0(v) = g(y(0, v))`.
    pub fn z0(&self, pr: &SdaeProblem, v: &[f64]) -> Result<Vec<f64>> {
        pr.constraint_at(&self.y_at(v)?, v)
    }

    fn z0_norm(&self, pr: &SdaeProblem, v: &[f64]) -> Result<f64> {
        Ok(self.z0(pr, v)?.iter().map(|g| g * g).sum::<f64>().sqrt())
    }
}

/// Compiled pieces of the construction.
#[derive(Debug, Clone)]
pub struct UnitProbReduction {
    pub problem: SdaeProblem,
    pub spec: CharacteristicSpec,
    /// Closed-form `B` (m rows of d) for `m <= 2`.
    pub symbolic_b: Option<Vec<Vec<Expr>>>,
    /// Closed-form `Lambda` (n rows of d) for `m <= 2`.
    pub symbolic_lambda: Option<Vec<Vec<Expr>>>,
    f: Vec<Compiled>,
    sigma: Vec<Compiled>,
    /// `d sigma / dx_k`, index `k * n*d + (row*d + col)`.
    sigma_dx: Vec<Compiled>,
    /// `d sigma / du_l`, same layout with `l`.
    sigma_du: Vec<Compiled>,
    /// `p x n`
    dg: Vec<Compiled>,
    /// `p x n x n`
    d2g: Vec<Compiled>,
    /// `n x m`
    dy: Vec<Compiled>,
    /// `n x m x m`
    d2y: Vec<Compiled>,
}

/// Everything the construction produces at one point.
#[derive(Debug, Clone)]
pub struct UnitProbPoint {
    pub f: Vec<f64>,
    pub sigma: Matrix,
    /// `Dg` at `x`
    pub dg: Matrix,
    /// `D_v y` at `u`
    pub dy: Matrix,
    pub k: Matrix,
    pub b: Matrix,
    pub lambda: Matrix,
    /// `d Lambda / dv_l` for each `l`.
    pub dlambda: Vec<Matrix>,
    /// `F = f - D_v y a - 1/2 B'd2y B - dLambda B`
    pub big_f: Vec<f64>,
    pub chi: Vec<f64>,
    pub a: Vec<f64>,
    pub det: f64,
}

impl UnitProbReduction {
    pub fn new(pr: &SdaeProblem, spec: &CharacteristicSpec) -> Result<Self> {
        if !pr.is_high_index() {
            return Err(Error::Precondition("the constraint references algebraic variables; use the index-1 reduction".into()));
        }
        if pr.has_constraint_noise() {
            return Err(Error::Precondition(
                "the constraint carries noise; suspend the problem first so that Gamma = 0".into(),
            ));
        }
        if pr.m != pr.p {
            return Err(Error::DimensionMismatch(format!("need m = p, got m = {} and p = {}", pr.m, pr.p)));
        }
        if spec.y.len() != pr.n {
            return Err(Error::SpecInvalid(format!("y has {} components, expected n = {}", spec.y.len(), pr.n)));
        }
        let (n, m) = (pr.n, pr.m);
        let layout = VarLayout::new(n, m);
        let (xs, us) = (layout.x_vars(), layout.u_vars());
        let sig: Vec<&Expr> = pr.diffusion.iter().flatten().collect();
        let sigma_dx: Vec<Expr> = xs.iter().flat_map(|v| sig.iter().map(move |e| e.differentiate(*v))).collect();
        let sigma_du: Vec<Expr> = us.iter().flat_map(|v| sig.iter().map(move |e| e.differentiate(*v))).collect();
        let dg: Vec<Expr> = pr.constraint.iter().flat_map(|g| g.gradient(&xs)).collect();
        let d2g: Vec<Expr> = dg.iter().flat_map(|e| e.gradient(&xs)).collect();
        let dy: Vec<Expr> = spec.y.iter().flat_map(|e| e.gradient(&us)).collect();
        let d2y: Vec<Expr> = dy.iter().flat_map(|e| e.gradient(&us)).collect();
        let (symbolic_b, symbolic_lambda) = if m <= 2 {
            let (b, l) = symbolic_b_lambda(pr, &dg, &dy);
            (Some(b), Some(l))
        } else {
            (None, None)
        };
        Ok(Self {
            problem: pr.clone(),
            spec: spec.clone(),
            symbolic_b,
            symbolic_lambda,
            f: compile_all(&pr.drift, layout)?,
            sigma: compile_all(sig.iter().copied(), layout)?,
            sigma_dx: compile_all(&sigma_dx, layout)?,
            sigma_du: compile_all(&sigma_du, layout)?,
            dg: compile_all(&dg, layout)?,
            d2g: compile_all(&d2g, layout)?,
            dy: compile_all(&dy, layout)?,
            d2y: compile_all(&d2y, layout)?,
        })
    }

    pub fn at(&self, state: &[f64], stack: &mut Vec<f64>) -> Result<UnitProbPoint> {
        let pr = &self.problem;
        let (n, m, d) = (pr.n, pr.m, pr.d);
        let ev = |code: &[Compiled], rows: usize, cols: usize, stack: &mut Vec<f64>| -> Result<Matrix> {
            let mut out = Matrix::zeros(rows, cols);
            eval_all(code, state, out.as_mut_slice(), stack)?;
            Ok(out)
        };
        let mut f = vec![0.0; n];
        eval_all(&self.f, state, &mut f, stack)?;
        let sigma = ev(&self.sigma, n, d, stack)?;
        let dg = ev(&self.dg, m, n, stack)?;
        let dy = ev(&self.dy, n, m, stack)?;
        let mut d2g = Vec::with_capacity(m);
        for i in 0..m {
            d2g.push(ev(&self.d2g[i * n * n..(i + 1) * n * n], n, n, stack)?);
        }
        // d2y[w] is the m x m Hessian of y_w
        let mut d2y = Vec::with_capacity(n);
        for w in 0..n {
            d2y.push(ev(&self.d2y[w * m * m..(w + 1) * m * m], m, m, stack)?);
        }

        let k = dg.matmul(&dy);
        let lu = Lu::new(&k);
        let det = lu.det();
        if !(det.abs() >= SINGULAR_GUARD) {
            return Err(Error::SingularReduction { det: det.abs(), guard: SINGULAR_GUARD });
        }
        let s = dg.matmul(&sigma);
        let b = lu.solve_matrix(&s);
        let lambda = sub(&sigma, &dy.matmul(&b));

        // total derivatives along x = y(v), one matrix per l
        let mut dlambda = Vec::with_capacity(m);
        for l in 0..m {
            let mut dl_g = Matrix::zeros(m, n);
            for i in 0..m {
                for w in 0..n {
                    dl_g[(i, w)] = (0..n).map(|kk| dy[(kk, l)] * d2g[i][(kk, w)]).sum();
                }
            }
            let mut dl_y = Matrix::zeros(n, m);
            for w in 0..n {
                for j in 0..m {
                    dl_y[(w, j)] = d2y[w][(j, l)];
                }
            }
            let mut dl_sigma = ev(&self.sigma_du[l * n * d..(l + 1) * n * d], n, d, stack)?;
            for kk in 0..n {
                let ds = ev(&self.sigma_dx[kk * n * d..(kk + 1) * n * d], n, d, stack)?;
                let c = dy[(kk, l)];
                for (t, v) in dl_sigma.as_mut_slice().iter_mut().zip(ds.as_slice()) {
                    *t += c * v;
                }
            }
            let dl_k = add(&dl_g.matmul(&dy), &dg.matmul(&dl_y));
            let dl_s = add(&dl_g.matmul(&sigma), &dg.matmul(&dl_sigma));
            let dl_b = lu.solve_matrix(&sub(&dl_s, &dl_k.matmul(&b)));
            dlambda.push(sub(&sub(&dl_sigma, &dl_y.matmul(&b)), &dy.matmul(&dl_b)));
        }

        // f - 1/2 B'd2y B - dLambda B, before the a-term
        let mut reduced = f.clone();
        for w in 0..n {
            let mut curv = 0.0;
            for col in 0..d {
                for j in 0..m {
                    for kk in 0..m {
                        curv += b[(kk, col)] * d2y[w][(j, kk)] * b[(j, col)];
                    }
                }
            }
            let corr: f64 = (0..m).map(|l| (0..d).map(|j| dlambda[l][(w, j)] * b[(l, j)]).sum::<f64>()).sum();
            reduced[w] -= 0.5 * curv + corr;
        }
        let mut chi = dg.matvec(&reduced);
        for i in 0..m {
            let mut t = 0.0;
            for j in 0..d {
                for kk in 0..n {
                    for l in 0..n {
                        t += lambda[(kk, j)] * d2g[i][(kk, l)] * lambda[(l, j)];
                    }
                }
            }
            chi[i] += 0.5 * t;
        }
        let mut a = chi.clone();
        lu.solve_in_place(&mut a);
        let ya = dy.matvec(&a);
        let big_f: Vec<f64> = reduced.iter().zip(&ya).map(|(r, v)| r - v).collect();
        Ok(UnitProbPoint { f, sigma, dg, dy, k, b, lambda, dlambda, big_f, chi, a, det })
    }

    /// Drift of the frozen `z`: `(Dg) F + 1/2 Tr(Lambda' D2g Lambda)`,
    /// rebuilt with the tree evaluator.
    pub fn frozen_drift(&self, state: &[f64]) -> Result<Vec<f64>> {
        let pr = &self.problem;
        let pt = self.at(state, &mut Vec::new())?;
        let (n, m) = (pr.n, pr.m);
        let bind = Bindings::from_state(&state[..n], &state[n..n + m]);
        let xs: Vec<Var> = (1..=n).map(Var::X).collect();
        let mut out = Vec::with_capacity(m);
        for g in &pr.constraint {
            let grad = g.gradient(&xs);
            let mut v = 0.0;
            for (w, gw) in grad.iter().enumerate() {
                v += gw.evaluate(&bind)? * pt.big_f[w];
                for (l, xl) in xs.iter().enumerate() {
                    let h = gw.differentiate(*xl).evaluate(&bind)?;
                    v += 0.5 * h * (0..pr.d).map(|j| pt.lambda[(w, j)] * pt.lambda[(l, j)]).sum::<f64>();
                }
            }
            out.push(v);
        }
        Ok(out)
    }

    pub fn sde(&self) -> AugmentedSde {
        AugmentedSde {
            labels: self.problem.layout().vars().iter().map(|v| v.to_string()).collect(),
            d: self.problem.d,
            origin: "unit-prob".into(),
            field: Arc::new(self.clone()),
        }
    }
}

impl SdeField for UnitProbReduction {
    fn evaluate(
        &self,
        state: &[f64],
        drift: &mut [f64],
        diffusion: &mut [f64],
        ws: &mut Workspace,
    ) -> std::result::Result<(), Fault> {
        let pt = self.at(state, &mut ws.stack)?;
        let (n, d) = (self.problem.n, self.problem.d);
        drift[..n].copy_from_slice(&pt.f);
        drift[n..].copy_from_slice(&pt.a);
        diffusion[..n * d].copy_from_slice(pt.sigma.as_slice());
        diffusion[n * d..].copy_from_slice(pt.b.as_slice());
        Ok(())
    }
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    out.as_mut_slice().iter_mut().zip(b.as_slice()).for_each(|(x, y)| *x += y);
    out
}

fn sub(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    out.as_mut_slice().iter_mut().zip(b.as_slice()).for_each(|(x, y)| *x -= y);
    out
}

fn symbolic_b_lambda(pr: &SdaeProblem, dg: &[Expr], dy: &[Expr]) -> (Vec<Vec<Expr>>, Vec<Vec<Expr>>) {
    let (n, m, d) = (pr.n, pr.m, pr.d);
    let dot = |terms: Vec<(Expr, Expr)>| Expr::sum(terms.into_iter().map(|(a, b)| Expr::mul(a, b)));
    let k: Vec<Expr> = (0..m)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| dot((0..n).map(|w| (dg[i * n + w].clone(), dy[w * m + j].clone())).collect()))
        .collect();
    let s: Vec<Vec<Expr>> = (0..m)
        .map(|i| (0..d).map(|j| dot((0..n).map(|w| (dg[i * n + w].clone(), pr.diffusion[w][j].clone())).collect())).collect())
        .collect();
    let inverse: Vec<Vec<Expr>> = match m {
        0 => Vec::new(),
        1 => vec![vec![Expr::div(Expr::one(), k[0].clone())]],
        _ => {
            let det = Expr::sub(Expr::mul(k[0].clone(), k[3].clone()), Expr::mul(k[1].clone(), k[2].clone()));
            let over = |e: Expr| Expr::div(e, det.clone());
            vec![
                vec![over(k[3].clone()), over(Expr::neg(k[1].clone()))],
                vec![over(Expr::neg(k[2].clone())), over(k[0].clone())],
            ]
        }
    };
    let b: Vec<Vec<Expr>> = (0..m)
        .map(|i| {
            (0..d)
                .map(|j| {
                    if m == 1 {
                        // keep the division outermost so common factors stay visible
                        Expr::div(s[0][j].clone(), k[0].clone())
                    } else {
                        dot((0..m).map(|l| (inverse[i][l].clone(), s[l][j].clone())).collect())
                    }
                })
                .collect()
        })
        .collect();
    let lambda: Vec<Vec<Expr>> = (0..n)
        .map(|w| {
            (0..d)
                .map(|j| Expr::sub(pr.diffusion[w][j].clone(), dot((0..m).map(|l| (dy[w * m + l].clone(), b[l][j].clone())).collect())))
                .collect()
        })
        .collect();
    (b, lambda)
}

pub fn build_unit_prob_sde(pr: &SdaeProblem, spec: &CharacteristicSpec) -> Result<UnitProbReduction> {
    build_unit_prob_sde_on(pr, spec, &ValidationGrid::default_for(pr.m))
}

/// Validates the spec on `grid`, then builds the reduction.
pub fn build_unit_prob_sde_on(
    pr: &SdaeProblem,
    spec: &CharacteristicSpec,
    grid: &ValidationGrid,
) -> Result<UnitProbReduction> {
    let red = UnitProbReduction::new(pr, spec)?;
    spec.validate(pr, grid)?;
    Ok(red)
}

/// Newton on `v -> g(y(0, v)) = 0` from `u_guess`.
pub fn consistent_init(spec: &CharacteristicSpec, pr: &SdaeProblem, u_guess: &[f64]) -> Result<Vec<f64>> {
    let layout = VarLayout::new(pr.n, pr.m);
    let (xs, us) = (layout.x_vars(), layout.u_vars());
    let dg: Vec<Expr> = pr.constraint.iter().flat_map(|g| g.gradient(&xs)).collect();
    let dy: Vec<Expr> = spec.y.iter().flat_map(|e| e.gradient(&us)).collect();
    let (n, m) = (pr.n, pr.m);
    let (u, _) = newton(u_guess.to_vec(), 1e-12, 50, SINGULAR_GUARD, |v| {
        let y = spec.y_at(v)?;
        let b = Bindings::from_state(&y, v);
        let r = pr.constraint_at(&y, v)?;
        let g = Matrix::from_rows(m, n, dg.iter().map(|e| e.evaluate(&b)).collect::<Result<_>>()?);
        let yv = Matrix::from_rows(n, m, dy.iter().map(|e| e.evaluate(&b)).collect::<Result<_>>()?);
        Ok((r, g.matmul(&yv)))
    })?;
    Ok(u)
}

#[derive(Debug, Clone)]
pub struct UnitProbSolution {
    pub path: SamplePath,
    pub u0: Vec<f64>,
    /// `max_k |g(x_k)|` over the steps reached.
    pub sup_g: f64,
    /// Fraction of grid points with `|g(x_k)| < eps`.
    pub fraction_within: f64,
    pub warnings: Vec<String>,
}

/// Stiffness heuristic: `|B|^2 dt` above this triggers a warning.
pub const STIFFNESS_LIMIT: f64 = 0.1;

pub fn stiffness_warning(b: &Matrix, dt: f64) -> Option<String> {
    let b2 = b.frobenius_sq();
    (b2 * dt > STIFFNESS_LIMIT).then(|| {
        format!(
            "|B|^2 dt = {:.3e} exceeds {STIFFNESS_LIMIT}; the algebraic diffusion is stiff, use dt <= {:.3e}",
            b2 * dt,
            STIFFNESS_LIMIT / b2
        )
    })
}

/// Full pipeline: build, find `u0`, integrate.
pub fn solve_unit_prob(
    pr: &SdaeProblem,
    spec: &CharacteristicSpec,
    dt: f64,
    t_end: f64,
    seed: u64,
) -> Result<UnitProbSolution> {
    let red = build_unit_prob_sde(pr, spec)?;
    let u0 = consistent_init(spec, pr, &pr.u0)?;
    let inc = wiener_increments(seed, steps_for(t_end, dt), pr.d, dt);
    solve_unit_prob_with(&red, &u0, dt, t_end, &inc, seed)
}

/// Integrates a prepared reduction from `(x0, u0)` with given increments.
pub fn solve_unit_prob_with(
    red: &UnitProbReduction,
    u0: &[f64],
    dt: f64,
    t_end: f64,
    increments: &[f64],
    seed: u64,
) -> Result<UnitProbSolution> {
    let pr = &red.problem;
    let mut start = pr.x0.clone();
    start.extend_from_slice(u0);
    let mut warnings = Vec::new();
    let pt = red.at(&start, &mut Vec::new())?;
    warnings.extend(stiffness_warning(&pt.b, dt));
    let path = euler_maruyama(&red.sde(), &start, dt, t_end, increments, seed)?;
    let (sup_g, fraction_within) = constraint_summary(pr, &path, red.spec.epsilon)?;
    Ok(UnitProbSolution { path, u0: u0.to_vec(), sup_g, fraction_within, warnings })
}

/// `(max_k |g(x_k)|, fraction of k with |g(x_k)| < eps)`.
pub fn constraint_summary(pr: &SdaeProblem, path: &SamplePath, epsilon: f64) -> Result<(f64, f64)> {
    let mut sup = 0.0f64;
    let mut inside = 0usize;
    for k in 0..path.len() {
        let s = path.state(k);
        let g = pr.constraint_at(&s[..pr.n], &s[pr.n..pr.n + pr.m])?;
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        sup = sup.max(norm);
        if norm < epsilon {
            inside += 1;
        }
    }
    Ok((sup, inside as f64 / path.len() as f64))
}
