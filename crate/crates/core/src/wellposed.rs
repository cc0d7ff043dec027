//! Suspension of noisy constraints and the tangency test for uncontrollable
//! noise.
//!
//! For a high-index problem whose diffusion ignores `u`, the noise image has
//! to lie in the kernel of `[D_x g  I]`, which is the same as
//! `R = (D_x g) sigma + Gamma = 0`. The residual is sampled on a grid; a
//! nonzero residual anywhere proves ill-posedness at that point, while a
//! clean sample proves nothing beyond the samples.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::expr::{Compiled, Expr, Var};
use crate::linalg::Matrix;
use crate::problem::{compile_all, SdaeProblem};

pub const DEFAULT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    IllPosed,
    NotIllPosedAtSamples,
    Inapplicable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TangencyReport {
    pub verdict: Verdict,
    /// Largest `max |R_ij|` over the probes.
    pub max_residual_norm: f64,
    /// State at which the maximum was first reached.
    pub worst_point: Vec<f64>,
    /// `R` at the worst point.
    pub worst_residual: Matrix,
    pub probes: usize,
    pub tolerance: f64,
}

/// Adjoins `z = int Gamma dW` as `p` extra states so the constraint becomes
/// the noiseless `g(x,u) + z = 0`.
pub fn suspend(pr: &SdaeProblem) -> SdaeProblem {
    let (n, p) = (pr.n, pr.p);
    let mut drift = pr.drift.clone();
    drift.extend((0..p).map(|_| Expr::zero()));
    let mut diffusion = pr.diffusion.clone();
    diffusion.extend(pr.constraint_noise.iter().cloned());
    let constraint = pr
        .constraint
        .iter()
        .enumerate()
        .map(|(i, g)| Expr::add(g.clone(), Expr::var(Var::X(n + i + 1))))
        .collect();
    let mut x0 = pr.x0.clone();
    x0.extend(std::iter::repeat_n(0.0, p));
    SdaeProblem {
        name: format!("{}-suspended", pr.name),
        n: n + p,
        m: pr.m,
        p,
        d: pr.d,
        drift,
        diffusion,
        constraint,
        constraint_noise: vec![vec![Expr::zero(); pr.d]; p],
        x0,
        u0: pr.u0.clone(),
    }
}

fn require_unsdae(pr: &SdaeProblem) -> Result<()> {
    if !pr.is_high_index() {
        return Err(Error::Inapplicable(
            "the constraint references algebraic variables (index-1 form)".into(),
        ));
    }
    if pr.diffusion_mentions_u() {
        return Err(Error::Inapplicable(
            "the diffusion references algebraic variables; the tangency condition involves the unknown B"
                .into(),
        ));
    }
    Ok(())
}

/// Compiled `D_x g`, `sigma`, `Gamma` for repeated residual evaluation.
struct Residual {
    n: usize,
    p: usize,
    d: usize,
    dg: Vec<Compiled>,
    sigma: Vec<Compiled>,
    gamma: Vec<Compiled>,
}

impl Residual {
    fn new(pr: &SdaeProblem) -> Result<Self> {
        let layout = pr.layout();
        let xs = layout.x_vars();
        let dg: Vec<Expr> = pr.constraint.iter().flat_map(|g| g.gradient(&xs)).collect();
        Ok(Self {
            n: pr.n,
            p: pr.p,
            d: pr.d,
            dg: compile_all(&dg, layout)?,
            sigma: compile_all(pr.diffusion.iter().flatten(), layout)?,
            gamma: compile_all(pr.constraint_noise.iter().flatten(), layout)?,
        })
    }

    fn at(&self, slots: &[f64], stack: &mut Vec<f64>) -> Result<Matrix> {
        let (n, p, d) = (self.n, self.p, self.d);
        let mut dg = vec![0.0; p * n];
        crate::problem::eval_all(&self.dg, slots, &mut dg, stack)?;
        let mut sigma = vec![0.0; n * d];
        crate::problem::eval_all(&self.sigma, slots, &mut sigma, stack)?;
        let mut r = Matrix::zeros(p, d);
        crate::problem::eval_all(&self.gamma, slots, r.as_mut_slice(), stack)?;
        let r_data = r.as_mut_slice();
        for i in 0..p {
            for k in 0..n {
                let a = dg[i * n + k];
                if a != 0.0 {
                    for j in 0..d {
                        r_data[i * d + j] += a * sigma[k * d + j];
                    }
                }
            }
        }
        Ok(r)
    }
}

/// `R = (D_x g) sigma + Gamma` at `point = (x, u)`; `u` may be omitted since
/// nothing here depends on it.
pub fn tangency_residual(pr: &SdaeProblem, point: &[f64]) -> Result<Matrix> {
    require_unsdae(pr)?;
    if point.len() != pr.n && point.len() != pr.n + pr.m {
        return Err(Error::DimensionMismatch(format!(
            "point has {} coordinates, expected {} or {}",
            point.len(),
            pr.n,
            pr.n + pr.m
        )));
    }
    let res = Residual::new(pr)?;
    let slots = pad(point, pr);
    res.at(&slots, &mut Vec::new())
}

fn pad(point: &[f64], pr: &SdaeProblem) -> Vec<f64> {
    let mut slots = point.to_vec();
    if slots.len() == pr.n {
        slots.extend_from_slice(&pr.u0);
    }
    slots
}

/// Points of a tensor grid with `per_dim` points along each interval, in
/// lexicographic order (last coordinate fastest).
pub fn grid_point(bx: &[(f64, f64)], per_dim: usize, mut index: usize) -> Vec<f64> {
    let mut out = vec![0.0; bx.len()];
    for (slot, &(lo, hi)) in out.iter_mut().zip(bx).rev() {
        let k = index % per_dim;
        index /= per_dim;
        *slot = if per_dim == 1 { 0.5 * (lo + hi) } else { lo + (hi - lo) * k as f64 / (per_dim - 1) as f64 };
    }
    out
}

pub fn grid_len(dims: usize, per_dim: usize) -> usize {
    per_dim.checked_pow(dims as u32).expect("grid too large")
}

/// Samples `R` at `x0` and on a grid over `bx` (one interval per state).
pub fn is_ill_posed(
    pr: &SdaeProblem,
    bx: &[(f64, f64)],
    grid_per_dim: usize,
    tol: f64,
) -> Result<TangencyReport> {
    require_unsdae(pr)?;
    if bx.len() != pr.n {
        return Err(Error::DimensionMismatch(format!("box has {} intervals, expected n = {}", bx.len(), pr.n)));
    }
    if grid_per_dim == 0 {
        return Err(Error::Precondition("grid must have at least one point per dimension".into()));
    }
    let res = Residual::new(pr)?;
    let total = grid_len(pr.n, grid_per_dim);
    let evaluate = |x: Vec<f64>| -> Result<(f64, Vec<f64>, Matrix)> {
        let r = res.at(&pad(&x, pr), &mut Vec::new())?;
        Ok((r.max_abs(), x, r))
    };
    let mut results = vec![evaluate(pr.x0.clone())?];
    let grid: Vec<_> = (0..total)
        .into_par_iter()
        .map(|k| evaluate(grid_point(bx, grid_per_dim, k)))
        .collect::<Result<_>>()?;
    results.extend(grid);
    let probes = results.len();
    // first maximum in probe order
    let (max, worst, r) = results
        .into_iter()
        .reduce(|best, cur| if cur.0 > best.0 { cur } else { best })
        .expect("at least one probe");
    Ok(TangencyReport {
        verdict: if max > tol { Verdict::IllPosed } else { Verdict::NotIllPosedAtSamples },
        max_residual_norm: max,
        worst_point: worst,
        worst_residual: r,
        probes,
        tolerance: tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::builtin;

    fn toy(sigma: &str, gamma: &str, g: &str) -> SdaeProblem {
        SdaeProblem::from_text("toy", &["u1"], &[&[sigma]], &[g], &[&[gamma]], &[0.0], &[0.0], (1, 1, 1, 1))
            .unwrap()
    }

    #[test]
    fn worked_example_residual_at_origin() {
        let r = tangency_residual(&builtin("paper-example").unwrap(), &[0.0, 0.0]).unwrap();
        assert_eq!(r.as_slice(), &[0.4, 0.0]);
    }

    #[test]
    fn worked_example_is_ill_posed_on_wide_box() {
        let pr = builtin("paper-example").unwrap();
        let rep = is_ill_posed(&pr, &[(-2.0, 2.0), (-5.0, 5.0)], 21, DEFAULT_TOL).unwrap();
        assert_eq!(rep.verdict, Verdict::IllPosed);
        // 0.2 * |2 - 3 x1^2| peaks at x1 = +-2 with value 2
        assert!((rep.max_residual_norm - 2.0).abs() < 1e-12);
        assert_eq!(rep.probes, 1 + 21 * 21);
    }

    #[test]
    fn noiseless_toy_is_clean() {
        let pr = toy("0", "0", "x1");
        assert!(tangency_residual(&pr, &[0.3]).unwrap().max_abs() == 0.0);
        let rep = is_ill_posed(&pr, &[(-1.0, 1.0)], 5, DEFAULT_TOL).unwrap();
        assert_eq!(rep.verdict, Verdict::NotIllPosedAtSamples);
    }

    #[test]
    fn cooling_residual() {
        let pr = builtin("cooling").unwrap();
        assert_eq!(tangency_residual(&pr, &[1.0]).unwrap().as_slice(), &[0.5]);
        assert_eq!(is_ill_posed(&pr, &[(0.0, 2.0)], 11, DEFAULT_TOL).unwrap().verdict, Verdict::IllPosed);
    }

    #[test]
    fn compensated_noise_passes() {
        // D_x g sigma = 2 * 0.5 cancels Gamma = -1
        let pr = toy("0.5", "-1", "2*x1");
        let rep = is_ill_posed(&pr, &[(-1.0, 1.0)], 7, DEFAULT_TOL).unwrap();
        assert_eq!(rep.verdict, Verdict::NotIllPosedAtSamples);
    }

    #[test]
    fn index1_is_inapplicable() {
        let pr = builtin("linear-index1").unwrap();
        assert!(matches!(tangency_residual(&pr, &[0.0, 0.0]), Err(Error::Inapplicable(_))));
        let pr = builtin("index2-demo").unwrap();
        assert!(matches!(is_ill_posed(&pr, &[(-1.0, 1.0)], 3, 1e-8), Err(Error::Inapplicable(_))));
    }

    #[test]
    fn suspension_of_noisy_constraint() {
        let pr = toy("0.3", "1", "x1");
        let s = suspend(&pr);
        assert_eq!((s.n, s.m, s.p, s.d), (2, 1, 1, 1));
        assert_eq!(s.constraint[0].to_string(), "x1 + x2");
        assert_eq!(s.diffusion[1][0].to_string(), "1");
        assert!(s.drift[1].is_zero());
        assert!(!s.has_constraint_noise());
        assert_eq!(s.x0, vec![0.0, 0.0]);
        s.validate().unwrap();
    }

    #[test]
    fn suspension_with_zero_noise() {
        let pr = builtin("paper-example").unwrap();
        let s = suspend(&pr);
        assert_eq!(s.n, 3);
        assert!(s.diffusion[2].iter().all(Expr::is_zero));
        // z = 0 recovers the original constraint
        let g = pr.constraint_at(&[0.3, 0.7], &[0.1]).unwrap();
        let h = s.constraint_at(&[0.3, 0.7, 0.0], &[0.1]).unwrap();
        assert_eq!(g, h);
    }

    #[test]
    fn grid_enumeration() {
        let bx = [(-1.0, 1.0), (0.0, 4.0)];
        assert_eq!(grid_point(&bx, 3, 0), vec![-1.0, 0.0]);
        assert_eq!(grid_point(&bx, 3, 1), vec![-1.0, 2.0]);
        assert_eq!(grid_point(&bx, 3, 8), vec![1.0, 4.0]);
    }
}
