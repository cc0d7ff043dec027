//! Ensembles and the constraint statistics computed over them.
//!
//! Paths are simulated in parallel in fixed-size chunks and folded into the
//! statistics in path order, so results do not depend on the thread count.
//! A truncated path contributes only while it is alive.

use std::io::{self, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::integrator::{constraint_process, euler_maruyama, steps_for, AugmentedSde, PathStatus, SamplePath};
use crate::problem::SdaeProblem;
use crate::rng::{derive_seed, wiener_increments};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959963984540054;

const CHUNK: usize = 64;

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub base_seed: u64,
    pub paths: Vec<SamplePath>,
}

impl Ensemble {
    pub fn completed(&self) -> usize {
        self.paths.iter().filter(|p| p.status.is_completed()).count()
    }
}

/// Seed of path `k`.
pub fn path_seed(base_seed: u64, k: usize) -> u64 {
    derive_seed(base_seed, k as u64)
}

/// Euler–Maruyama ensemble of `sde` from `init`.
pub fn run_ensemble(
    sde: &AugmentedSde,
    init: &[f64],
    dt: f64,
    t_end: f64,
    paths: usize,
    base_seed: u64,
) -> Result<Ensemble> {
    let steps = steps_for(t_end, dt);
    let paths = simulate_paths(paths, base_seed, |seed| {
        let inc = wiener_increments(seed, steps, sde.d, dt);
        euler_maruyama(sde, init, dt, t_end, &inc, seed)
    })?;
    Ok(Ensemble { base_seed, paths })
}

/// Runs `simulate` for each derived seed, in parallel, keeping path order.
pub fn simulate_paths<T: Send>(
    paths: usize,
    base_seed: u64,
    simulate: impl Fn(u64) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if paths == 0 {
        return Err(Error::EmptyEnsemble);
    }
    (0..paths).into_par_iter().map(|k| simulate(path_seed(base_seed, k))).collect()
}

/// Streams an ensemble through `sink` in path order without holding every
/// path in memory.
pub fn stream_paths<T: Send>(
    paths: usize,
    base_seed: u64,
    simulate: impl Fn(u64) -> Result<T> + Sync,
    mut sink: impl FnMut(usize, T) -> Result<()>,
) -> Result<()> {
    if paths == 0 {
        return Err(Error::EmptyEnsemble);
    }
    for start in (0..paths).step_by(CHUNK) {
        let end = (start + CHUNK).min(paths);
        let chunk: Vec<T> =
            (start..end).into_par_iter().map(|k| simulate(path_seed(base_seed, k))).collect::<Result<_>>()?;
        for (k, item) in (start..end).zip(chunk) {
            sink(k, item)?;
        }
    }
    Ok(())
}

/// Running sums per grid time.
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    p: usize,
    epsilon: f64,
    alive: Vec<usize>,
    exceed: Vec<usize>,
    sum_sq: Vec<f64>,
    sum_quad: Vec<f64>,
    sum_g: Vec<f64>,
    completed: usize,
    truncated: usize,
}

impl StatsAccumulator {
    /// `times` grid points, `p` constraint rows.
    pub fn new(times: usize, p: usize, epsilon: f64) -> Self {
        Self {
            p,
            epsilon,
            alive: vec![0; times],
            exceed: vec![0; times],
            sum_sq: vec![0.0; times],
            sum_quad: vec![0.0; times],
            sum_g: vec![0.0; times * p],
            completed: 0,
            truncated: 0,
        }
    }

    /// Adds one path's `lambda` (row-major `len x p`).
    pub fn push(&mut self, lambda: &[f64], status: PathStatus) {
        let p = self.p;
        let len = (lambda.len() / p.max(1)).min(self.alive.len());
        for k in 0..len {
            let row = &lambda[k * p..(k + 1) * p];
            let sq: f64 = row.iter().map(|v| v * v).sum();
            self.alive[k] += 1;
            if sq.sqrt() > self.epsilon {
                self.exceed[k] += 1;
            }
            self.sum_sq[k] += sq;
            self.sum_quad[k] += sq * sq;
            for (acc, v) in self.sum_g[k * p..(k + 1) * p].iter_mut().zip(row) {
                *acc += v;
            }
        }
        if status.is_completed() {
            self.completed += 1;
        } else {
            self.truncated += 1;
        }
    }

    /// `bound` is `(J, b)` for the mean-square bound curve.
    pub fn finish(&self, dt: f64, bound: Option<(f64, f64)>) -> Result<ViolationReport> {
        if self.completed + self.truncated == 0 {
            return Err(Error::EmptyEnsemble);
        }
        let times = self.alive.len();
        let p = self.p;
        let t_grid: Vec<f64> = (0..times).map(|k| k as f64 * dt).collect();
        let mut rep = ViolationReport {
            epsilon: self.epsilon,
            p,
            alive: self.alive.clone(),
            empirical_p: Vec::with_capacity(times),
            wilson: Vec::with_capacity(times),
            mean_sq_lambda: Vec::with_capacity(times),
            se_sq_lambda: Vec::with_capacity(times),
            bound_curve: bound.map(|(j, b)| t_grid.iter().map(|&t| crate::bounded::bound_curve(j, b, t)).collect()),
            mean_g: vec![f64::NAN; times * p],
            completed: self.completed,
            truncated: self.truncated,
            t_grid,
        };
        for k in 0..times {
            let n = self.alive[k];
            if n == 0 {
                rep.empirical_p.push(f64::NAN);
                rep.wilson.push((0.0, 1.0));
                rep.mean_sq_lambda.push(f64::NAN);
                rep.se_sq_lambda.push(f64::NAN);
                continue;
            }
            let nf = n as f64;
            rep.empirical_p.push(self.exceed[k] as f64 / nf);
            rep.wilson.push(wilson(self.exceed[k], n));
            let mean = self.sum_sq[k] / nf;
            rep.mean_sq_lambda.push(mean);
            let var = if n > 1 { ((self.sum_quad[k] - nf * mean * mean) / (nf - 1.0)).max(0.0) } else { 0.0 };
            rep.se_sq_lambda.push((var / nf).sqrt());
            for i in 0..p {
                rep.mean_g[k * p + i] = self.sum_g[k * p + i] / nf;
            }
        }
        Ok(rep)
    }
}

/// Wilson score interval for `k` successes out of `n`.
pub fn wilson(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let (nf, ph) = (n as f64, k as f64 / n as f64);
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / nf;
    let center = (ph + z2 / (2.0 * nf)) / denom;
    let half = Z95 / denom * (ph * (1.0 - ph) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let lo = if k == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if k == n { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViolationReport {
    pub epsilon: f64,
    pub p: usize,
    pub t_grid: Vec<f64>,
    /// Paths alive at each time.
    pub alive: Vec<usize>,
    /// `P(|lambda(t)| > eps)` among alive paths; NaN when none are alive.
    pub empirical_p: Vec<f64>,
    pub wilson: Vec<(f64, f64)>,
    pub mean_sq_lambda: Vec<f64>,
    /// Standard error of `mean_sq_lambda`.
    pub se_sq_lambda: Vec<f64>,
    pub bound_curve: Option<Vec<f64>>,
    /// Row-major `times x p`.
    pub mean_g: Vec<f64>,
    pub completed: usize,
    pub truncated: usize,
}

impl ViolationReport {
    /// Largest violation probability over times with live paths.
    pub fn max_p(&self) -> f64 {
        self.empirical_p.iter().filter(|v| !v.is_nan()).fold(0.0, |a, &v| a.max(v))
    }

    /// Times where `mean_sq_lambda > bound + k * se`.
    pub fn bound_violations(&self, k: f64) -> Vec<usize> {
        let Some(curve) = &self.bound_curve else { return Vec::new() };
        (0..self.t_grid.len())
            .filter(|&i| self.alive[i] > 0 && self.mean_sq_lambda[i] > curve[i] + k * self.se_sq_lambda[i])
            .collect()
    }

    /// `t,alive,P_viol,P_lo,P_hi,mean_sq_lambda,bound_curve,meanG_1..p`.
    pub fn write_csv(&self, w: &mut impl Write) -> io::Result<()> {
        let mut header = "t,alive,P_viol,P_lo,P_hi,mean_sq_lambda,bound_curve".to_string();
        for i in 1..=self.p {
            header.push_str(&format!(",meanG_{i}"));
        }
        writeln!(w, "{header}")?;
        for k in 0..self.t_grid.len() {
            let bound = self.bound_curve.as_ref().map_or(String::new(), |c| num(c[k]));
            let mut row = format!(
                "{},{},{},{},{},{},{}",
                num(self.t_grid[k]),
                self.alive[k],
                num(self.empirical_p[k]),
                num(self.wilson[k].0),
                num(self.wilson[k].1),
                num(self.mean_sq_lambda[k]),
                bound
            );
            for i in 0..self.p {
                row.push(',');
                row.push_str(&num(self.mean_g[k * self.p + i]));
            }
            writeln!(w, "{row}")?;
        }
        Ok(())
    }
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Statistics of `lambda` over an in-memory ensemble. Paths are folded in a
/// canonical order, so permuting the ensemble leaves the report unchanged.
pub fn violation_stats(pr: &SdaeProblem, ens: &Ensemble, epsilon: f64) -> Result<ViolationReport> {
    violation_stats_with_bound(pr, ens, epsilon, None)
}

pub fn violation_stats_with_bound(
    pr: &SdaeProblem,
    ens: &Ensemble,
    epsilon: f64,
    bound: Option<(f64, f64)>,
) -> Result<ViolationReport> {
    let first = ens.paths.first().ok_or(Error::EmptyEnsemble)?;
    let lambdas: Vec<Vec<f64>> = ens.paths.par_iter().map(|p| constraint_process(pr, p)).collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..lambdas.len()).collect();
    order.sort_by(|&a, &b| {
        let key = |i: usize| (&lambdas[i], ens.paths[i].status.to_string());
        let (la, sa) = key(a);
        let (lb, sb) = key(b);
        la.len()
            .cmp(&lb.len())
            .then_with(|| la.iter().zip(lb.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal))
            .then_with(|| sa.cmp(&sb))
    });
    let times = ens.paths.iter().map(SamplePath::len).max().unwrap_or(0);
    let mut acc = StatsAccumulator::new(times, pr.p, epsilon);
    for i in order {
        acc.push(&lambdas[i], ens.paths[i].status);
    }
    acc.finish(first.dt, bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::VarLayout;
    use crate::integrator::finish_path;

    fn constant_sde() -> AugmentedSde {
        let e = |s: &str| crate::expr::parse(s).unwrap();
        AugmentedSde::from_exprs("t", VarLayout::new(1, 0), &[e("0")], &[vec![e("0")]]).unwrap()
    }

    fn noisy_sde() -> AugmentedSde {
        let e = |s: &str| crate::expr::parse(s).unwrap();
        AugmentedSde::from_exprs("t", VarLayout::new(1, 0), &[e("-x1")], &[vec![e("0.5")]]).unwrap()
    }

    fn problem() -> SdaeProblem {
        SdaeProblem::from_text("q", &["-x1"], &[&["0.5"]], &["x1"], &[&["0"]], &[0.0], &[], (1, 0, 1, 1)).unwrap()
    }

    #[test]
    fn reproducible_and_constant() {
        let a = run_ensemble(&noisy_sde(), &[0.0], 1e-2, 1.0, 2, 7).unwrap();
        let b = run_ensemble(&noisy_sde(), &[0.0], 1e-2, 1.0, 2, 7).unwrap();
        assert_eq!(a.paths[0].states, b.paths[0].states);
        assert_ne!(a.paths[0].states, a.paths[1].states);
        let c = run_ensemble(&constant_sde(), &[1.5], 1e-2, 1.0, 3, 7).unwrap();
        assert!(c.paths.iter().all(|p| p.states.iter().all(|&v| v == 1.5)));
    }

    #[test]
    fn empty_ensemble() {
        assert_eq!(run_ensemble(&constant_sde(), &[0.0], 0.1, 1.0, 0, 1).unwrap_err(), Error::EmptyEnsemble);
        let ens = Ensemble { base_seed: 0, paths: Vec::new() };
        assert_eq!(violation_stats(&problem(), &ens, 0.5).unwrap_err(), Error::EmptyEnsemble);
    }

    #[test]
    fn zero_lambda_gives_zero_statistics() {
        let ens = run_ensemble(&constant_sde(), &[0.0], 0.1, 1.0, 4, 1).unwrap();
        let rep = violation_stats(&problem(), &ens, 0.5).unwrap();
        assert!(rep.empirical_p.iter().all(|&p| p == 0.0));
        assert!(rep.mean_g.iter().all(|&g| g == 0.0));
        assert_eq!(rep.completed, 4);
    }

    #[test]
    fn single_exceedance() {
        let states = vec![0.0, 0.0, 0.9, 0.0];
        let path = finish_path(vec!["x1".into()], 0.1, states, 1, vec![0.0; 3], 0, PathStatus::Completed, None);
        let rep = violation_stats(&problem(), &Ensemble { base_seed: 0, paths: vec![path] }, 0.5).unwrap();
        assert_eq!(rep.empirical_p, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn truncated_paths_count_while_alive() {
        let full = finish_path(vec!["x1".into()], 0.1, vec![0.0; 4], 1, vec![0.0; 3], 0, PathStatus::Completed, None);
        let short = finish_path(
            vec!["x1".into()],
            0.1,
            vec![1.0, 1.0],
            1,
            vec![0.0; 3],
            0,
            PathStatus::SingularReduction { step: 1 },
            None,
        );
        let rep = violation_stats(&problem(), &Ensemble { base_seed: 0, paths: vec![full, short] }, 0.5).unwrap();
        assert_eq!(rep.alive, vec![2, 2, 1, 1]);
        assert_eq!(rep.empirical_p, vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!((rep.completed, rep.truncated), (1, 1));
    }

    #[test]
    fn permutation_invariance() {
        let ens = run_ensemble(&noisy_sde(), &[0.0], 1e-2, 1.0, 37, 3).unwrap();
        let a = violation_stats(&problem(), &ens, 0.3).unwrap();
        let mut rev = ens.clone();
        rev.paths.reverse();
        rev.paths.swap(0, 20);
        assert_eq!(a, violation_stats(&problem(), &rev, 0.3).unwrap());
    }

    #[test]
    fn streaming_matches_in_memory() {
        let sde = noisy_sde();
        let steps = steps_for(0.5, 1e-2);
        let mut acc = StatsAccumulator::new(steps + 1, 1, 0.3);
        stream_paths(
            10,
            5,
            |seed| euler_maruyama(&sde, &[0.0], 1e-2, 0.5, &wiener_increments(seed, steps, 1, 1e-2), seed),
            |_, path| {
                acc.push(&path.states, path.status);
                Ok(())
            },
        )
        .unwrap();
        let streamed = acc.finish(1e-2, None).unwrap();
        let ens = run_ensemble(&sde, &[0.0], 1e-2, 0.5, 10, 5).unwrap();
        let direct = violation_stats(&problem(), &ens, 0.3).unwrap();
        assert_eq!(streamed.empirical_p, direct.empirical_p);
        for (a, b) in streamed.mean_sq_lambda.iter().zip(&direct.mean_sq_lambda) {
            assert!((a - b).abs() <= 1e-14 * (1.0 + b));
        }
    }

    #[test]
    fn wilson_interval() {
        let (lo, hi) = wilson(0, 10);
        assert_eq!(lo, 0.0);
        assert!((hi - 0.2775327998628899).abs() < 1e-12);
        let (lo, hi) = wilson(5, 10);
        assert!((lo + hi - 1.0).abs() < 1e-12);
        assert!(lo < 0.5 && hi > 0.5);
    }

    #[test]
    fn report_csv_layout() {
        let ens = run_ensemble(&constant_sde(), &[0.0], 0.5, 1.0, 2, 1).unwrap();
        let rep = violation_stats_with_bound(&problem(), &ens, 0.5, Some((4.0, 11.0))).unwrap();
        let mut out = Vec::new();
        rep.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,alive,P_viol,P_lo,P_hi,mean_sq_lambda,bound_curve,meanG_1"));
        assert_eq!(text.lines().count(), 4);
    }
}
