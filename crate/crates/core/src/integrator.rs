//! Fixed-step Euler–Maruyama and the constraint process.
//!
//! Reductions produce an [`AugmentedSde`], a plain SDE whose coefficients
//! are evaluated by an [`SdeField`]. A field may refuse a point (domain error
//! or a tripped singularity guard); the integrator then stops and records the
//! step in the path status instead of failing.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::expr::{Compiled, Expr, VarLayout};
use crate::problem::{compile_all, eval_all, SdaeProblem};

/// Why a field could not be evaluated at a point.
#[derive(Debug, Clone, PartialEq)]
pub enum Fault {
    Domain(String),
    /// `|det|` of the matrix the reduction has to invert.
    Singular(f64),
}

impl From<Error> for Fault {
    fn from(e: Error) -> Self {
        match e {
            Error::SingularReduction { det, .. } | Error::SingularJacobian(det) => Fault::Singular(det),
            other => Fault::Domain(other.to_string()),
        }
    }
}

/// Caller-owned scratch space so fields can be shared across threads.
#[derive(Debug, Default)]
pub struct Workspace {
    pub stack: Vec<f64>,
    pub buf: Vec<f64>,
}

pub trait SdeField: Send + Sync {
    /// Fills `drift` (length N) and `diffusion` (row-major N x d).
    fn evaluate(
        &self,
        state: &[f64],
        drift: &mut [f64],
        diffusion: &mut [f64],
        ws: &mut Workspace,
    ) -> std::result::Result<(), Fault>;
}

#[derive(Clone)]
pub struct AugmentedSde {
    pub labels: Vec<String>,
    pub d: usize,
    /// Which construction produced the SDE.
    pub origin: String,
    pub field: Arc<dyn SdeField>,
}

impl fmt::Debug for AugmentedSde {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AugmentedSde")
            .field("labels", &self.labels)
            .field("d", &self.d)
            .field("origin", &self.origin)
            .finish()
    }
}

impl AugmentedSde {
    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    /// SDE with expression coefficients over the slots of `layout`.
    pub fn from_exprs(
        origin: &str,
        layout: VarLayout,
        drift: &[Expr],
        diffusion: &[Vec<Expr>],
    ) -> Result<AugmentedSde> {
        let dim = layout.len();
        if drift.len() != dim || diffusion.len() != dim {
            return Err(Error::DimensionMismatch(format!("SDE coefficients must have {dim} rows")));
        }
        let d = diffusion.first().map_or(0, Vec::len);
        if diffusion.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch("ragged diffusion matrix".into()));
        }
        let field = ExprField {
            drift: compile_all(drift, layout)?,
            diffusion: compile_all(diffusion.iter().flatten(), layout)?,
        };
        Ok(AugmentedSde {
            labels: layout.vars().iter().map(|v| v.to_string()).collect(),
            d,
            origin: origin.to_string(),
            field: Arc::new(field),
        })
    }

    /// Drift and diffusion at one point.
    pub fn coefficients(&self, state: &[f64]) -> std::result::Result<(Vec<f64>, Vec<f64>), Fault> {
        let mut drift = vec![0.0; self.dim()];
        let mut diffusion = vec![0.0; self.dim() * self.d];
        self.field.evaluate(state, &mut drift, &mut diffusion, &mut Workspace::default())?;
        Ok((drift, diffusion))
    }
}

struct ExprField {
    drift: Vec<Compiled>,
    diffusion: Vec<Compiled>,
}

impl SdeField for ExprField {
    fn evaluate(
        &self,
        state: &[f64],
        drift: &mut [f64],
        diffusion: &mut [f64],
        ws: &mut Workspace,
    ) -> std::result::Result<(), Fault> {
        eval_all(&self.drift, state, drift, &mut ws.stack)?;
        eval_all(&self.diffusion, state, diffusion, &mut ws.stack)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathStatus {
    Completed,
    /// The step from grid index `step` could not be taken.
    DomainError { step: usize },
    SingularReduction { step: usize },
    RegionExit { step: usize },
}

impl PathStatus {
    pub fn is_completed(self) -> bool {
        self == PathStatus::Completed
    }
}

impl fmt::Display for PathStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PathStatus::Completed => f.write_str("completed"),
            PathStatus::DomainError { step } => write!(f, "domain_error@{step}"),
            PathStatus::SingularReduction { step } => write!(f, "singular@{step}"),
            PathStatus::RegionExit { step } => write!(f, "region_exit@{step}"),
        }
    }
}

impl std::str::FromStr for PathStatus {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "completed" {
            return Ok(PathStatus::Completed);
        }
        let bad = || Error::Format(format!("bad path status `{s}`"));
        let (kind, step) = s.split_once('@').ok_or_else(bad)?;
        let step: usize = step.parse().map_err(|_| bad())?;
        match kind {
            "domain_error" => Ok(PathStatus::DomainError { step }),
            "singular" => Ok(PathStatus::SingularReduction { step }),
            "region_exit" => Ok(PathStatus::RegionExit { step }),
            _ => Err(bad()),
        }
    }
}

/// One simulated trajectory. `states` holds one row per grid point reached;
/// a truncated path has fewer rows than `steps + 1` but keeps all increments.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    pub dt: f64,
    pub t_grid: Vec<f64>,
    pub labels: Vec<String>,
    /// Row-major, `t_grid.len() x labels.len()`.
    pub states: Vec<f64>,
    pub d: usize,
    /// Row-major `steps x d`.
    pub dw: Vec<f64>,
    pub seed: u64,
    pub status: PathStatus,
    /// Human-readable reason for a truncation.
    pub detail: Option<String>,
}

impl SamplePath {
    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn len(&self) -> usize {
        self.t_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_grid.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        let n = self.dim();
        &self.states[k * n..(k + 1) * n]
    }

    pub fn increment(&self, k: usize) -> &[f64] {
        &self.dw[k * self.d..(k + 1) * self.d]
    }

    /// Values of coordinate `i` along the path.
    pub fn coordinate(&self, i: usize) -> Vec<f64> {
        (0..self.len()).map(|k| self.state(k)[i]).collect()
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }
}

/// Number of steps covering `[0, t_end]`; exact multiples are not rounded up
/// by floating-point noise.
pub fn steps_for(t_end: f64, dt: f64) -> usize {
    let r = t_end / dt;
    if (r - r.round()).abs() < 1e-9 {
        r.round() as usize
    } else {
        r.ceil() as usize
    }
}

/// `[lo, hi]` per coordinate; leaving it truncates the path.
pub type Region = [(f64, f64)];

fn check_inputs(sde_dim: usize, d: usize, init: &[f64], dt: f64, t_end: f64, increments: &[f64]) -> Result<usize> {
    if init.len() != sde_dim {
        return Err(Error::DimensionMismatch(format!(
            "initial state has {} coordinates, SDE has {sde_dim}",
            init.len()
        )));
    }
    if !(dt > 0.0) || !(t_end >= 0.0) {
        return Err(Error::Precondition(format!("need dt > 0 and T >= 0, got dt={dt}, T={t_end}")));
    }
    let steps = steps_for(t_end, dt);
    if increments.len() < steps * d {
        return Err(Error::DimensionMismatch(format!(
            "{} increments supplied, {steps} steps of dimension {d} needed",
            increments.len()
        )));
    }
    Ok(steps)
}

/// `X_{k+1} = X_k + drift(X_k) dt + diffusion(X_k) dW_k`.
pub fn euler_maruyama(
    sde: &AugmentedSde,
    init: &[f64],
    dt: f64,
    t_end: f64,
    increments: &[f64],
    seed: u64,
) -> Result<SamplePath> {
    euler_maruyama_in(sde, init, dt, t_end, increments, seed, None)
}

/// As [`euler_maruyama`], stopping with `RegionExit` when a state leaves
/// `region`.
pub fn euler_maruyama_in(
    sde: &AugmentedSde,
    init: &[f64],
    dt: f64,
    t_end: f64,
    increments: &[f64],
    seed: u64,
    region: Option<&Region>,
) -> Result<SamplePath> {
    let n = sde.dim();
    let d = sde.d;
    let steps = check_inputs(n, d, init, dt, t_end, increments)?;
    let mut states = Vec::with_capacity((steps + 1) * n);
    states.extend_from_slice(init);
    let mut drift = vec![0.0; n];
    let mut diffusion = vec![0.0; n * d];
    let mut ws = Workspace::default();
    let mut next = vec![0.0; n];
    let mut status = PathStatus::Completed;
    let mut detail = None;
    for k in 0..steps {
        let x = &states[k * n..(k + 1) * n];
        if let Err(fault) = sde.field.evaluate(x, &mut drift, &mut diffusion, &mut ws) {
            (status, detail) = fault_status(fault, k);
            break;
        }
        let dw = &increments[k * d..(k + 1) * d];
        for i in 0..n {
            let mut v = x[i] + drift[i] * dt;
            let row = &diffusion[i * d..(i + 1) * d];
            for j in 0..d {
                v += row[j] * dw[j];
            }
            next[i] = v;
        }
        if next.iter().any(|v| !v.is_finite()) {
            status = PathStatus::DomainError { step: k };
            detail = Some("state became non-finite".into());
            break;
        }
        if let Some(region) = region {
            if next.iter().zip(region).any(|(v, (lo, hi))| v < lo || v > hi) {
                status = PathStatus::RegionExit { step: k };
                detail = Some("state left the region".into());
                break;
            }
        }
        states.extend_from_slice(&next);
    }
    Ok(finish_path(sde.labels.clone(), dt, states, d, increments[..steps * d].to_vec(), seed, status, detail))
}

pub(crate) fn fault_status(fault: Fault, step: usize) -> (PathStatus, Option<String>) {
    match fault {
        Fault::Domain(msg) => (PathStatus::DomainError { step }, Some(msg)),
        Fault::Singular(det) => {
            (PathStatus::SingularReduction { step }, Some(format!("singular matrix, |det| = {det:e}")))
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn finish_path(
    labels: Vec<String>,
    dt: f64,
    states: Vec<f64>,
    d: usize,
    dw: Vec<f64>,
    seed: u64,
    status: PathStatus,
    detail: Option<String>,
) -> SamplePath {
    let rows = states.len() / labels.len().max(1);
    SamplePath {
        dt,
        t_grid: (0..rows).map(|k| k as f64 * dt).collect(),
        labels,
        states,
        d,
        dw,
        seed,
        status,
        detail,
    }
}

/// `lambda_k = g(x_k, u_k) + sum_{j<k} Gamma(x_j, u_j) dW_j`, row-major
/// `len x p`. The first `n` path coordinates are `x`; the next `m` are `u`
/// when present.
pub fn constraint_process(pr: &SdaeProblem, path: &SamplePath) -> Result<Vec<f64>> {
    let (n, m, p, d) = (pr.n, pr.m, pr.p, pr.d);
    if path.d != d {
        return Err(Error::DimensionMismatch(format!("path noise dimension {} differs from d = {d}", path.d)));
    }
    let has_u = path.dim() >= n + m;
    if !has_u && (pr.constraint.iter().any(Expr::mentions_u) || pr.constraint_noise.iter().flatten().any(Expr::mentions_u)) {
        return Err(Error::Precondition("the path carries no algebraic coordinates but g needs them".into()));
    }
    if path.dim() < n {
        return Err(Error::DimensionMismatch(format!("path has {} coordinates, n = {n}", path.dim())));
    }
    let layout = pr.layout();
    let g = compile_all(&pr.constraint, layout)?;
    let gamma = compile_all(pr.constraint_noise.iter().flatten(), layout)?;
    let noisy = pr.has_constraint_noise();
    let mut slots = vec![0.0; n + m];
    let mut stack = Vec::new();
    let mut acc = vec![0.0; p];
    let mut gam = vec![0.0; p * d];
    let mut out = vec![0.0; path.len() * p];
    for k in 0..path.len() {
        let s = path.state(k);
        if has_u {
            slots.copy_from_slice(&s[..n + m]);
        } else {
            slots[..n].copy_from_slice(&s[..n]);
            slots[n..].copy_from_slice(&pr.u0);
        }
        let row = &mut out[k * p..(k + 1) * p];
        eval_all(&g, &slots, row, &mut stack)?;
        if noisy {
            for (r, a) in row.iter_mut().zip(&acc) {
                *r += a;
            }
            if k + 1 < path.len() {
                eval_all(&gamma, &slots, &mut gam, &mut stack)?;
                let dw = path.increment(k);
                for i in 0..p {
                    acc[i] += (0..d).map(|j| gam[i * d + j] * dw[j]).sum::<f64>();
                }
            }
        }
    }
    Ok(out)
}

fn sig17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `t,<labels>,lambda1..p,status`, 17 significant digits.
pub fn write_path_csv(w: &mut impl Write, path: &SamplePath, lambda: &[f64], p: usize) -> io::Result<()> {
    let mut header = vec!["t".to_string()];
    header.extend(path.labels.iter().cloned());
    header.extend((1..=p).map(|i| format!("lambda{i}")));
    header.push("status".into());
    writeln!(w, "{}", header.join(","))?;
    let status = path.status.to_string();
    for k in 0..path.len() {
        let mut row: Vec<String> = vec![sig17(path.t_grid[k])];
        row.extend(path.state(k).iter().map(|v| sig17(*v)));
        row.extend(lambda[k * p..(k + 1) * p].iter().map(|v| sig17(*v)));
        row.push(status.clone());
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// The parts of a path CSV the statistics need.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredPath {
    pub t: Vec<f64>,
    pub p: usize,
    /// Row-major `len x p`.
    pub lambda: Vec<f64>,
    pub status: PathStatus,
}

pub fn read_path_csv(r: impl BufRead) -> Result<StoredPath> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty path file".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    let lambda_cols: Vec<usize> =
        cols.iter().enumerate().filter(|(_, c)| c.starts_with("lambda")).map(|(i, _)| i).collect();
    let status_col = cols.len() - 1;
    if cols.first() != Some(&"t") || cols[status_col] != "status" {
        return Err(Error::Format("path file header must start with t and end with status".into()));
    }
    let mut out = StoredPath { t: Vec::new(), p: lambda_cols.len(), lambda: Vec::new(), status: PathStatus::Completed };
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols.len() {
            return Err(Error::Format(format!("row has {} cells, header has {}", cells.len(), cols.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number `{s}`")));
        out.t.push(num(cells[0])?);
        for &c in &lambda_cols {
            out.lambda.push(num(cells[c])?);
        }
        out.status = cells[status_col].parse()?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::rng::wiener_increments;

    fn sde(drift: &[&str], diffusion: &[&[&str]], n: usize) -> AugmentedSde {
        let drift: Vec<Expr> = drift.iter().map(|s| parse(s).unwrap()).collect();
        let diffusion: Vec<Vec<Expr>> =
            diffusion.iter().map(|r| r.iter().map(|s| parse(s).unwrap()).collect()).collect();
        AugmentedSde::from_exprs("test", VarLayout::new(n, 0), &drift, &diffusion).unwrap()
    }

    #[test]
    fn deterministic_unit_drift() {
        let s = sde(&["1"], &[&["0"]], 1);
        let inc = wiener_increments(3, 10, 1, 0.1);
        let path = euler_maruyama(&s, &[0.0], 0.1, 1.0, &inc, 3).unwrap();
        assert_eq!(path.len(), 11);
        for k in 0..=10 {
            assert_eq!(path.t_grid[k], k as f64 * 0.1);
            assert!((path.state(k)[0] - k as f64 * 0.1).abs() < 1e-15);
        }
        assert!((path.last()[0] - 1.0).abs() < 1e-15);
        assert!(path.status.is_completed());
    }

    #[test]
    fn pure_noise_is_cumulative_sum() {
        let s = sde(&["0", "0"], &[&["1", "0"], &["0", "1"]], 2);
        let inc = wiener_increments(9, 50, 2, 0.01);
        let path = euler_maruyama(&s, &[0.0, 0.0], 0.01, 0.5, &inc, 9).unwrap();
        let mut sum = [0.0, 0.0];
        for k in 0..50 {
            sum[0] += inc[2 * k];
            sum[1] += inc[2 * k + 1];
            assert_eq!(path.state(k + 1), &sum);
        }
    }

    #[test]
    fn reproducible_bits() {
        let s = sde(&["-x1 + sin(x1)"], &[&["0.3*x1"]], 1);
        let inc = wiener_increments(11, 100, 1, 0.01);
        let a = euler_maruyama(&s, &[1.0], 0.01, 1.0, &inc, 11).unwrap();
        let b = euler_maruyama(&s, &[1.0], 0.01, 1.0, &inc, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn domain_error_truncates() {
        let s = sde(&["-1"], &[&["0"]], 1);
        let s = AugmentedSde {
            field: Arc::new(ExprField {
                drift: vec![Compiled::new(&parse("-1/x1").unwrap(), VarLayout::new(1, 0)).unwrap()],
                diffusion: vec![Compiled::new(&Expr::zero(), VarLayout::new(1, 0)).unwrap()],
            }),
            ..s
        };
        let inc = vec![0.0; 10];
        let path = euler_maruyama(&s, &[0.0], 0.1, 1.0, &inc, 0).unwrap();
        assert_eq!(path.status, PathStatus::DomainError { step: 0 });
        assert_eq!(path.len(), 1);
        assert_eq!(path.dw.len(), 10);
    }

    #[test]
    fn region_exit() {
        let s = sde(&["1"], &[&["0"]], 1);
        let inc = vec![0.0; 10];
        let path = euler_maruyama_in(&s, &[0.0], 0.1, 1.0, &inc, 0, Some(&[(-1.0, 0.55)])).unwrap();
        assert_eq!(path.status, PathStatus::RegionExit { step: 5 });
        assert_eq!(path.len(), 6);
    }

    #[test]
    fn em_first_order_on_decay() {
        let s = sde(&["-x1"], &[&["0"]], 1);
        let err = |dt: f64| {
            let steps = steps_for(1.0, dt);
            let path = euler_maruyama(&s, &[1.0], dt, 1.0, &vec![0.0; steps], 0).unwrap();
            (path.last()[0] - (-1f64).exp()).abs()
        };
        for dt in [0.01, 0.005, 0.0025] {
            let ratio = err(dt) / err(dt / 2.0);
            assert!((ratio - 2.0).abs() < 0.4, "ratio {ratio}");
        }
    }

    #[test]
    fn steps_rounding() {
        assert_eq!(steps_for(1.0, 0.1), 10);
        assert_eq!(steps_for(0.5, 1e-5), 50_000);
        assert_eq!(steps_for(1.05, 0.1), 11);
    }

    fn toy(g: &str, gamma: &str) -> SdaeProblem {
        SdaeProblem::from_text("toy", &["0"], &[&["0"]], &[g], &[&[gamma]], &[0.5], &[0.0], (1, 1, 1, 1)).unwrap()
    }

    #[test]
    fn lambda_equals_g_without_constraint_noise() {
        let pr = crate::problem::builtin("paper-example").unwrap();
        let s = sde(&["0.5", "1"], &[&["0.2", "0"], &["0", "0"]], 2);
        let inc = wiener_increments(5, 100, 2, 0.01);
        let path = euler_maruyama(&s, &[0.0, 0.0], 0.01, 1.0, &inc, 5).unwrap();
        let lambda = constraint_process(&pr, &path).unwrap();
        for k in 0..path.len() {
            assert_eq!(lambda[k], pr.constraint_at(path.state(k), &[0.0]).unwrap()[0]);
        }
    }

    #[test]
    fn lambda_telescopes_with_unit_constraint_noise() {
        let pr = toy("x1", "1");
        let s = sde(&["0"], &[&["0"]], 1);
        let inc = wiener_increments(6, 20, 1, 0.05);
        let path = euler_maruyama(&s, &[0.5], 0.05, 1.0, &inc, 6).unwrap();
        let lambda = constraint_process(&pr, &path).unwrap();
        let mut w = 0.0;
        for k in 0..path.len() {
            assert!((lambda[k] - (0.5 + w)).abs() < 1e-15);
            if k < 20 {
                w += inc[k];
            }
        }
    }

    #[test]
    fn csv_round_trip_of_lambda() {
        let s = sde(&["1"], &[&["0.1"]], 1);
        let inc = wiener_increments(1, 5, 1, 0.1);
        let path = euler_maruyama(&s, &[0.0], 0.1, 0.5, &inc, 1).unwrap();
        let lambda: Vec<f64> = path.states.iter().map(|v| v - 1.0 / 3.0).collect();
        let mut buf = Vec::new();
        write_path_csv(&mut buf, &path, &lambda, 1).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,x1,lambda1,status\n"));
        let back = read_path_csv(&buf[..]).unwrap();
        assert_eq!(back.lambda, lambda);
        assert_eq!(back.t, path.t_grid);
        assert_eq!(back.status, PathStatus::Completed);
    }

    #[test]
    fn status_strings() {
        for s in [
            PathStatus::Completed,
            PathStatus::DomainError { step: 3 },
            PathStatus::SingularReduction { step: 0 },
            PathStatus::RegionExit { step: 12 },
        ] {
            assert_eq!(s.to_string().parse::<PathStatus>().unwrap(), s);
        }
    }
}
