//! Reduction of an index-1 problem to an SDE on `(x, u)`.
//!
//! Differentiating `g(x,u) + int Gamma dW = 0` with Itô's formula and asking
//! both the `dW` and the `dt` parts to vanish gives
//!
//! ```text
//! B = -(D_u g)^-1 ((D_x g) sigma + Gamma)
//! a = -(D_u g)^-1 ((D_x g) f + T/2)
//! T_i = sum_j v_j' H_i v_j,   v_j = (sigma_j, B_j),   H_i = Hessian of g_i in (x,u)
//! ```
//!
//! so that `du = a dt + B dW`. Both are computed per point by an LU solve;
//! closed-form expressions are available for `m <= 2`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::expr::{Compiled, Expr, Var, VarLayout};
use crate::integrator::{euler_maruyama, AugmentedSde, Fault, SamplePath, SdeField, Workspace};
use crate::linalg::{Lu, Matrix};
use crate::problem::{compile_all, eval_all, IndexKind, SdaeProblem, SINGULAR_GUARD};
use crate::rng::wiener_increments;

/// Nonzero second derivatives of a vector of expressions, upper triangle.
#[derive(Debug, Clone)]
pub(crate) struct HessianTable {
    /// `(row, a, b, d^2 e_row / dv_a dv_b)` with `a <= b`.
    entries: Vec<(usize, usize, usize, Compiled)>,
    rows: usize,
}

impl HessianTable {
    pub(crate) fn new(exprs: &[Expr], vars: &[Var], layout: VarLayout) -> Result<Self> {
        let mut entries = Vec::new();
        for (row, e) in exprs.iter().enumerate() {
            for (a, va) in vars.iter().enumerate() {
                let da = e.differentiate(*va);
                if da.is_zero() {
                    continue;
                }
                for (b, vb) in vars.iter().enumerate().skip(a) {
                    let dab = da.differentiate(*vb);
                    if !dab.is_zero() {
                        entries.push((row, a, b, Compiled::new(&dab, layout)?));
                    }
                }
            }
        }
        Ok(Self { entries, rows: exprs.len() })
    }

    /// `out_i = sum_j v_j' H_i v_j` where `v` is row-major `vars x d`.
    pub(crate) fn quadratic_trace(
        &self,
        slots: &[f64],
        v: &[f64],
        d: usize,
        out: &mut [f64],
        stack: &mut Vec<f64>,
    ) -> Result<()> {
        out[..self.rows].iter_mut().for_each(|o| *o = 0.0);
        for (row, a, b, h) in &self.entries {
            let hv = h.eval(slots, stack)?;
            let dot: f64 = (0..d).map(|j| v[a * d + j] * v[b * d + j]).sum();
            out[*row] += if a == b { hv * dot } else { 2.0 * hv * dot };
        }
        Ok(())
    }
}

/// Compiled pieces of the index-1 reduction of one problem.
#[derive(Debug, Clone)]
pub struct Index1Reduction {
    pub problem: SdaeProblem,
    pub singular_guard: f64,
    /// Closed-form `a` (length m), only when `m <= 2`.
    pub symbolic_a: Option<Vec<Expr>>,
    /// Closed-form `B` (m rows of d), only when `m <= 2`.
    pub symbolic_b: Option<Vec<Vec<Expr>>>,
    f: Vec<Compiled>,
    sigma: Vec<Compiled>,
    gamma: Vec<Compiled>,
    dxg: Vec<Compiled>,
    dug: Vec<Compiled>,
    hessians: HessianTable,
}

/// `a`, `B` and the matrices they were solved from at one point.
#[derive(Debug, Clone)]
pub struct Index1Point {
    pub f: Vec<f64>,
    /// `n x d`
    pub sigma: Matrix,
    pub a: Vec<f64>,
    /// `m x d`
    pub b: Matrix,
    pub dxg: Matrix,
    pub dug: Matrix,
    pub gamma: Matrix,
    pub det: f64,
}

impl Index1Reduction {
    pub fn new(pr: &SdaeProblem) -> Result<Self> {
        if pr.is_high_index() {
            return Err(Error::Precondition(
                "D_u g = 0: the constraint does not reference any algebraic variable, so the problem is \
                 not index 1 (use index reduction or an approximate method)"
                    .into(),
            ));
        }
        if pr.m != pr.p {
            return Err(Error::DimensionMismatch(format!(
                "index-1 reduction needs m = p, got m = {} and p = {}",
                pr.m, pr.p
            )));
        }
        let layout = pr.layout();
        let (xs, us, all) = (layout.x_vars(), layout.u_vars(), layout.vars());
        let dxg: Vec<Expr> = pr.constraint.iter().flat_map(|g| g.gradient(&xs)).collect();
        let dug: Vec<Expr> = pr.constraint.iter().flat_map(|g| g.gradient(&us)).collect();
        let (symbolic_a, symbolic_b) = if pr.m <= 2 {
            let (a, b) = symbolic_solution(pr, &dxg, &dug);
            (Some(a), Some(b))
        } else {
            (None, None)
        };
        Ok(Self {
            problem: pr.clone(),
            singular_guard: SINGULAR_GUARD,
            symbolic_a,
            symbolic_b,
            f: compile_all(&pr.drift, layout)?,
            sigma: compile_all(pr.diffusion.iter().flatten(), layout)?,
            gamma: compile_all(pr.constraint_noise.iter().flatten(), layout)?,
            dxg: compile_all(&dxg, layout)?,
            dug: compile_all(&dug, layout)?,
            hessians: HessianTable::new(&pr.constraint, &all, layout)?,
        })
    }

    /// Everything at `state = (x, u)`.
    pub fn at(&self, state: &[f64], stack: &mut Vec<f64>) -> Result<Index1Point> {
        let pr = &self.problem;
        let (n, m, d) = (pr.n, pr.m, pr.d);
        let mut f = vec![0.0; n];
        eval_all(&self.f, state, &mut f, stack)?;
        let mut sigma = Matrix::zeros(n, d);
        eval_all(&self.sigma, state, sigma.as_mut_slice(), stack)?;
        let mut gamma = Matrix::zeros(m, d);
        eval_all(&self.gamma, state, gamma.as_mut_slice(), stack)?;
        let mut dxg = Matrix::zeros(m, n);
        eval_all(&self.dxg, state, dxg.as_mut_slice(), stack)?;
        let mut dug = Matrix::zeros(m, m);
        eval_all(&self.dug, state, dug.as_mut_slice(), stack)?;

        let lu = Lu::new(&dug);
        let det = lu.det();
        if !(det.abs() >= self.singular_guard) {
            return Err(Error::SingularReduction { det: det.abs(), guard: self.singular_guard });
        }
        let mut rhs = dxg.matmul(&sigma);
        for (r, g) in rhs.as_mut_slice().iter_mut().zip(gamma.as_slice()) {
            *r = -(*r + g);
        }
        let b = lu.solve_matrix(&rhs);

        // stacked (sigma; B), one column per noise source
        let mut v = Vec::with_capacity((n + m) * d);
        v.extend_from_slice(sigma.as_slice());
        v.extend_from_slice(b.as_slice());
        let mut trace = vec![0.0; m];
        self.hessians.quadratic_trace(state, &v, d, &mut trace, stack)?;
        let mut a: Vec<f64> = dxg.matvec(&f).iter().zip(&trace).map(|(l, t)| -(l + 0.5 * t)).collect();
        lu.solve_in_place(&mut a);
        Ok(Index1Point { f, sigma, a, b, dxg, dug, gamma, det })
    }

    /// `(D_x g) sigma + (D_u g) B + Gamma`, evaluated independently of the
    /// solve through the tree evaluator.
    pub fn diffusion_identity(&self, state: &[f64]) -> Result<Matrix> {
        let pt = self.at(state, &mut Vec::new())?;
        let mut r = pt.dxg.matmul(&pt.sigma);
        let ub = pt.dug.matmul(&pt.b);
        for ((r, u), g) in r.as_mut_slice().iter_mut().zip(ub.as_slice()).zip(pt.gamma.as_slice()) {
            *r += u + g;
        }
        Ok(r)
    }

    /// `(D_x g) f + (D_u g) a + T/2` with `T` rebuilt from the tree
    /// evaluator's Hessians.
    pub fn drift_identity(&self, state: &[f64]) -> Result<Vec<f64>> {
        let pr = &self.problem;
        let pt = self.at(state, &mut Vec::new())?;
        let (n, m, d) = (pr.n, pr.m, pr.d);
        let vars = pr.layout().vars();
        let bind = crate::expr::Bindings::from_state(&state[..n], &state[n..n + m]);
        let col = |k: usize, j: usize| if k < n { pt.sigma[(k, j)] } else { pt.b[(k - n, j)] };
        let mut out = Vec::with_capacity(m);
        for (i, g) in pr.constraint.iter().enumerate() {
            let mut t = 0.0;
            for (ka, va) in vars.iter().enumerate() {
                let ga = g.differentiate(*va);
                for (kb, vb) in vars.iter().enumerate() {
                    let h = ga.differentiate(*vb).evaluate(&bind)?;
                    t += h * (0..d).map(|j| col(ka, j) * col(kb, j)).sum::<f64>();
                }
            }
            let lin: f64 = (0..n).map(|k| pt.dxg[(i, k)] * pt.f[k]).sum::<f64>()
                + (0..m).map(|k| pt.dug[(i, k)] * pt.a[k]).sum::<f64>();
            out.push(lin + 0.5 * t);
        }
        Ok(out)
    }

    pub fn sde(&self) -> AugmentedSde {
        let pr = &self.problem;
        AugmentedSde {
            labels: pr.layout().vars().iter().map(|v| v.to_string()).collect(),
            d: pr.d,
            origin: "index1".into(),
            field: Arc::new(self.clone()),
        }
    }
}

impl SdeField for Index1Reduction {
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

/// Closed forms for `m <= 2` through the adjugate of `D_u g`.
fn symbolic_solution(pr: &SdaeProblem, dxg: &[Expr], dug: &[Expr]) -> (Vec<Expr>, Vec<Vec<Expr>>) {
    let (n, m, d) = (pr.n, pr.m, pr.d);
    let inverse: Vec<Vec<Expr>> = match m {
        0 => Vec::new(),
        1 => vec![vec![Expr::div(Expr::one(), dug[0].clone())]],
        _ => {
            let det = Expr::sub(
                Expr::mul(dug[0].clone(), dug[3].clone()),
                Expr::mul(dug[1].clone(), dug[2].clone()),
            );
            let over = |e: Expr| Expr::div(e, det.clone());
            vec![
                vec![over(dug[3].clone()), over(Expr::neg(dug[1].clone()))],
                vec![over(Expr::neg(dug[2].clone())), over(dug[0].clone())],
            ]
        }
    };
    let apply_neg_inverse = |rhs: &[Expr]| -> Vec<Expr> {
        (0..m)
            .map(|i| Expr::neg(Expr::sum((0..m).map(|k| Expr::mul(inverse[i][k].clone(), rhs[k].clone())))))
            .collect()
    };
    // B column by column
    let mut b = vec![vec![Expr::zero(); d]; m];
    for j in 0..d {
        let rhs: Vec<Expr> = (0..m)
            .map(|i| {
                Expr::add(
                    Expr::sum((0..n).map(|k| Expr::mul(dxg[i * n + k].clone(), pr.diffusion[k][j].clone()))),
                    pr.constraint_noise[i][j].clone(),
                )
            })
            .collect();
        for (i, e) in apply_neg_inverse(&rhs).into_iter().enumerate() {
            b[i][j] = e;
        }
    }
    let vars = pr.layout().vars();
    let col = |k: usize, j: usize| if k < n { pr.diffusion[k][j].clone() } else { b[k - n][j].clone() };
    let rhs: Vec<Expr> = pr
        .constraint
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let lin = Expr::sum((0..n).map(|k| Expr::mul(dxg[i * n + k].clone(), pr.drift[k].clone())));
            let mut terms = Vec::new();
            for (ka, va) in vars.iter().enumerate() {
                let ga = g.differentiate(*va);
                for (kb, vb) in vars.iter().enumerate() {
                    let h = ga.differentiate(*vb);
                    if h.is_zero() {
                        continue;
                    }
                    for j in 0..d {
                        terms.push(Expr::mul(h.clone(), Expr::mul(col(ka, j), col(kb, j))));
                    }
                }
            }
            Expr::add(lin, Expr::mul(Expr::constant(0.5), Expr::sum(terms)))
        })
        .collect();
    (apply_neg_inverse(&rhs), b)
}

/// Builds the reduced SDE on `(x, u)` after checking the starting point.
pub fn build_index1_sde(pr: &SdaeProblem) -> Result<AugmentedSde> {
    let red = checked_reduction(pr)?;
    Ok(red.sde())
}

/// Classifies, builds the reduction and checks the starting point.
pub fn checked_reduction(pr: &SdaeProblem) -> Result<Index1Reduction> {
    if crate::problem::classify(pr).kind != IndexKind::Index1 {
        return Err(Error::Precondition(
            "D_u g = 0: the constraint does not reference any algebraic variable".into(),
        ));
    }
    let red = Index1Reduction::new(pr)?;
    let mut start = pr.x0.clone();
    start.extend_from_slice(&pr.u0);
    red.at(&start, &mut Vec::new())?;
    Ok(red)
}

#[derive(Debug, Clone)]
pub struct Index1Solution {
    pub path: SamplePath,
    /// `max_k max_i |g_i(x_k, u_k)|` along the path.
    pub max_constraint: f64,
}

/// Euler–Maruyama on the reduced SDE from a consistent start.
pub fn solve_index1(pr: &SdaeProblem, dt: f64, t_end: f64, seed: u64) -> Result<Index1Solution> {
    let red = checked_reduction(pr)?;
    pr.require_consistent_init()?;
    let steps = crate::integrator::steps_for(t_end, dt);
    let inc = wiener_increments(seed, steps, pr.d, dt);
    solve_index1_with(&red, dt, t_end, &inc, seed)
}

/// As [`solve_index1`] with caller-supplied increments.
pub fn solve_index1_with(
    red: &Index1Reduction,
    dt: f64,
    t_end: f64,
    increments: &[f64],
    seed: u64,
) -> Result<Index1Solution> {
    let pr = &red.problem;
    let mut start = pr.x0.clone();
    start.extend_from_slice(&pr.u0);
    let path = euler_maruyama(&red.sde(), &start, dt, t_end, increments, seed)?;
    let mut max_constraint = 0.0f64;
    for k in 0..path.len() {
        let s = path.state(k);
        for v in pr.constraint_at(&s[..pr.n], &s[pr.n..])? {
            max_constraint = max_constraint.max(v.abs());
        }
    }
    Ok(Index1Solution { path, max_constraint })
}
