//! Index reduction for high-index problems.
//!
//! With `lambda = g(x) + int Gamma dW`, Itô's formula gives
//! `d lambda = h_0 dt + sum_j h_j dW_j`, and a solution has to make every
//! coefficient vanish. One step replaces the `p` constraint rows by the
//! `p(1+d)` rows
//!
//! ```text
//! h_0 = (D_x g) f + 1/2 sum_j sigma_j' (D_xx g) sigma_j
//! h_j = (D_x g) sigma_j + Gamma_j          j = 1..d
//! ```
//!
//! The index is one plus the number of steps until `D_u h` is invertible,
//! which forces `m = p(1+d)^(J-1)`.

use std::fmt;

use crate::error::{Error, Result};
use crate::expr::{Bindings, Expr, Var};
use crate::linalg::{det, newton, Matrix};
use crate::problem::{SdaeProblem, SINGULAR_GUARD};

/// Steps beyond this are refused; expressions grow quickly.
pub const MAX_STEPS: usize = 4;

#[derive(Debug, Clone)]
pub struct ReductionStep {
    pub source: SdaeProblem,
    /// Same SDE, constraint `h`, no constraint noise.
    pub problem: SdaeProblem,
    /// `max |h(x0, u0)|`; reported, not enforced.
    pub residual_at_init: Option<f64>,
}

impl ReductionStep {
    pub fn h(&self) -> &[Expr] {
        &self.problem.constraint
    }
}

fn require_high_index(pr: &SdaeProblem) -> Result<()> {
    if pr.is_high_index() {
        Ok(())
    } else {
        Err(Error::Precondition(
            "the constraint references algebraic variables; the problem is index 1, reduce it directly".into(),
        ))
    }
}

/// One differentiation step.
pub fn reduce_once(pr: &SdaeProblem) -> Result<ReductionStep> {
    require_high_index(pr)?;
    let (n, p, d) = (pr.n, pr.p, pr.d);
    let xs: Vec<Var> = (1..=n).map(Var::X).collect();
    let mut h = vec![Expr::zero(); p * (1 + d)];
    for (i, g) in pr.constraint.iter().enumerate() {
        let grad = g.gradient(&xs);
        let lin = Expr::sum(grad.iter().zip(&pr.drift).map(|(a, f)| Expr::mul(a.clone(), f.clone())));
        let mut quad = Vec::new();
        for (a, ga) in grad.iter().enumerate() {
            for (b, vb) in xs.iter().enumerate() {
                let hab = ga.differentiate(*vb);
                if hab.is_zero() {
                    continue;
                }
                for j in 0..d {
                    let (sa, sb) = (&pr.diffusion[a][j], &pr.diffusion[b][j]);
                    if sa.is_zero() || sb.is_zero() {
                        continue;
                    }
                    quad.push(Expr::mul(Expr::mul(sa.clone(), hab.clone()), sb.clone()));
                }
            }
        }
        h[i] = Expr::add(lin, Expr::mul(Expr::constant(0.5), Expr::sum(quad)));
        for j in 0..d {
            let noise = Expr::sum(grad.iter().enumerate().map(|(k, a)| Expr::mul(a.clone(), pr.diffusion[k][j].clone())));
            h[p * (j + 1) + i] = Expr::add(noise, pr.constraint_noise[i][j].clone());
        }
    }
    let problem = SdaeProblem {
        name: format!("{}-reduced", pr.name),
        p: p * (1 + d),
        constraint: h,
        constraint_noise: vec![vec![Expr::zero(); d]; p * (1 + d)],
        ..pr.clone()
    };
    let residual_at_init = problem.initial_residual().ok();
    Ok(ReductionStep { source: pr.clone(), problem, residual_at_init })
}

#[derive(Debug, Clone, PartialEq)]
pub enum IndexOutcome {
    Index(usize),
    ExceededLimit { max_steps: usize, diagnosis: String },
}

impl fmt::Display for IndexOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IndexOutcome::Index(j) => write!(f, "index {j}"),
            IndexOutcome::ExceededLimit { max_steps, diagnosis } => {
                write!(f, "exceeded limit of {max_steps} steps: {diagnosis}")
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct IndexReport {
    pub outcome: IndexOutcome,
    pub steps: Vec<ReductionStep>,
    /// `m = p(1+d)^(J-1)`; false when no index was found.
    pub dimension_law_holds: bool,
    /// `u` solving `h(x0, u) = 0` when Newton succeeded.
    pub consistent_u0: Option<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl IndexReport {
    pub fn index(&self) -> Option<usize> {
        match self.outcome {
            IndexOutcome::Index(j) => Some(j),
            IndexOutcome::ExceededLimit { .. } => None,
        }
    }

    /// The index-1 problem the chain ends in, with a consistent `u0` when
    /// one was found.
    pub fn reduced_problem(&self) -> Option<SdaeProblem> {
        self.index()?;
        let mut pr = self.steps.last()?.problem.clone();
        if let Some(u0) = &self.consistent_u0 {
            pr.u0 = u0.clone();
        }
        Some(pr)
    }
}

fn du(pr: &SdaeProblem, x: &[f64], u: &[f64]) -> Result<Matrix> {
    crate::problem::du_g(pr, x, u)
}

/// Applies [`reduce_once`] until `D_u h` is square and invertible at the
/// initial point.
pub fn compute_index(pr: &SdaeProblem, max_steps: usize) -> Result<IndexReport> {
    require_high_index(pr)?;
    if max_steps > MAX_STEPS {
        return Err(Error::Precondition(format!("at most {MAX_STEPS} reduction steps are supported")));
    }
    let (m, p, d) = (pr.m, pr.p, pr.d);
    let mut steps: Vec<ReductionStep> = Vec::new();
    let mut warnings = Vec::new();
    let exceeded = |diagnosis: String, steps: Vec<ReductionStep>, warnings| IndexReport {
        outcome: IndexOutcome::ExceededLimit { max_steps, diagnosis },
        steps,
        dimension_law_holds: false,
        consistent_u0: None,
        warnings,
    };
    let mut current = pr.clone();
    for k in 1..=max_steps {
        let step = reduce_once(&current)?;
        let h = step.problem.clone();
        steps.push(step);
        if h.is_high_index() {
            current = h;
            continue;
        }
        let rows = p * (1 + d).pow(k as u32);
        if h.p != m {
            let diagnosis = format!(
                "after {k} step(s) D_u h is {}x{m}, not square: m = {m} but p(1+d)^{k} = {rows}",
                h.p
            );
            return Ok(exceeded(diagnosis, steps, warnings));
        }
        let det0 = det(&du(&h, &h.x0, &h.u0)?);
        if det0.abs() < SINGULAR_GUARD {
            let diagnosis = format!("after {k} step(s) D_u h is singular at the initial point (|det| = {:e})", det0.abs());
            return Ok(exceeded(diagnosis, steps, warnings));
        }
        let consistent_u0 = match newton(h.u0.clone(), 1e-12, 50, SINGULAR_GUARD, |u| {
            Ok((h.constraint_at(&h.x0, u)?, du(&h, &h.x0, u)?))
        }) {
            Ok((u, _)) => Some(u),
            Err(e) => {
                warnings.push(format!("consistent initialization of the reduced constraint failed: {e}"));
                None
            }
        };
        return Ok(IndexReport {
            outcome: IndexOutcome::Index(k + 1),
            steps,
            dimension_law_holds: m == rows,
            consistent_u0,
            warnings,
        });
    }
    let diagnosis = format!("the constraint still does not reference u after {max_steps} step(s)");
    Ok(exceeded(diagnosis, steps, warnings))
}

/// Evaluates every row of `h` at `(x, u)`; convenience for reports.
pub fn evaluate_rows(rows: &[Expr], x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    let b = Bindings::from_state(x, u);
    rows.iter().map(|e| e.evaluate(&b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::builtin;

    #[test]
    fn worked_example_rows() {
        let step = reduce_once(&builtin("paper-example").unwrap()).unwrap();
        assert_eq!(step.problem.p, 3);
        let h = step.h();
        for &(x1, x2, u) in &[(0.3, -1.2, 0.7), (-1.5, 2.0, -0.4), (0.0, 0.0, 0.0)] {
            let got = evaluate_rows(h, &[x1, x2], &[u]).unwrap();
            let want0 = (2.0 - 3.0 * x1 * x1) * (x1 + x1 * x1 + u) - 2.0 * (4.0 * x2).cos() - 0.12 * x1;
            assert!((got[0] - want0).abs() < 1e-12, "{} vs {want0}", got[0]);
            assert!((got[1] - 0.2 * (2.0 - 3.0 * x1 * x1)).abs() < 1e-14);
            assert_eq!(got[2], 0.0);
        }
        assert!(h[2].is_zero());
        assert!(step.problem.constraint_noise.iter().flatten().all(Expr::is_zero));
    }

    #[test]
    fn linear_constraint_rows() {
        let pr = SdaeProblem::from_text(
            "lin",
            &["sin(x1) + u1"],
            &[&["0.7", "0.1"]],
            &["3*x1"],
            &[&["0", "0"]],
            &[0.0],
            &[0.0],
            (1, 1, 1, 2),
        )
        .unwrap();
        let h = reduce_once(&pr).unwrap().problem.constraint;
        assert_eq!(h[0].to_string(), "3*(sin(x1) + u1)");
        assert_eq!(h[1].as_const(), Some(3.0 * 0.7));
        assert_eq!(h[2].as_const(), Some(3.0 * 0.1));
    }

    #[test]
    fn noiseless_step_is_classical() {
        let pr = SdaeProblem::from_text("dae", &["u1"], &[&[]], &["x1^2"], &[&[]], &[0.0], &[0.0], (1, 1, 1, 0)).unwrap();
        let step = reduce_once(&pr).unwrap();
        assert_eq!(step.problem.p, 1);
        assert_eq!(step.h()[0].to_string(), "2*(x1*u1)");
    }

    #[test]
    fn index2_demo() {
        let rep = compute_index(&builtin("index2-demo").unwrap(), MAX_STEPS).unwrap();
        assert_eq!(rep.outcome, IndexOutcome::Index(2));
        assert!(rep.dimension_law_holds);
        let h = rep.steps[0].h();
        assert_eq!(h[0].to_string(), "u1");
        assert_eq!(h[1].to_string(), "u2");
        let red = rep.reduced_problem().unwrap();
        let j = crate::problem::du_g(&red, &[0.3], &[0.1, -0.2]).unwrap();
        assert_eq!(j, Matrix::identity(2));
    }

    #[test]
    fn worked_example_exceeds() {
        let rep = compute_index(&builtin("paper-example").unwrap(), MAX_STEPS).unwrap();
        match &rep.outcome {
            IndexOutcome::ExceededLimit { diagnosis, .. } => {
                assert!(diagnosis.contains("3x1"), "{diagnosis}");
                assert!(diagnosis.contains("m = 1 but p(1+d)^1 = 3"), "{diagnosis}");
            }
            other => panic!("{other:?}"),
        }
        assert!(!rep.dimension_law_holds);
    }

    #[test]
    fn index1_input_rejected() {
        assert!(matches!(compute_index(&builtin("linear-index1").unwrap(), 2), Err(Error::Precondition(_))));
        assert!(matches!(reduce_once(&builtin("linear-index1").unwrap()), Err(Error::Precondition(_))));
    }

    #[test]
    fn row_count_law() {
        for name in ["paper-example", "cooling", "index2-demo"] {
            let pr = builtin(name).unwrap();
            assert_eq!(reduce_once(&pr).unwrap().problem.p, pr.p * (1 + pr.d));
        }
    }
}
