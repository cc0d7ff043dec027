//! Existence check and Picard iteration for index-1 problems with `m = p`.
//!
//! The fixed point of
//!
//! ```text
//! phi(x, u) = ( x0 + int f dt + int sigma dW ,  u - g(x,u) - int Gamma dW )
//! ```
//!
//! is the local solution. `phi` contracts on `[0, a]` when
//! `M = sup |D(0, u - g)| < 1` and `a` is below the horizon
//!
//! ```text
//! a* = (-4dS + sqrt(16 d^2 S^2 + 4 kf^2 (1 - M^2))) / (4 kf^2),   S = n ks^2 + m kG^2
//! ```
//!
//! The Lipschitz constants are estimated from random pairs, so `a*` is an
//! estimate rather than a certificate.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::expr::{Compiled, Expr};
use crate::integrator::{finish_path, steps_for, Fault, PathStatus, SamplePath};
use crate::linalg::Matrix;
use crate::problem::{compile_all, eval_all, SdaeProblem};
use crate::rng::{wiener_increments, UniformSampler};
use crate::wellposed::{grid_len, grid_point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatrixNorm {
    #[default]
    Spectral,
    /// Largest absolute row sum.
    MaxRowSum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionReport {
    pub m_sup: f64,
    /// Where `m_sup` was attained, in `(x, u)`.
    pub m_argmax: Vec<f64>,
    pub kf: f64,
    pub k_sigma: f64,
    pub k_gamma: f64,
    pub horizon: f64,
    pub satisfied: bool,
    pub bx: Vec<(f64, f64)>,
    pub norm: MatrixNorm,
    pub notes: Vec<String>,
}

/// Sampling settings for [`check_contraction`].
#[derive(Debug, Clone)]
pub struct ContractionConfig {
    pub grid_per_dim: usize,
    pub sample_pairs: usize,
    pub norm: MatrixNorm,
    pub seed: u64,
}

impl Default for ContractionConfig {
    fn default() -> Self {
        Self { grid_per_dim: 21, sample_pairs: 10_000, norm: MatrixNorm::Spectral, seed: 0x5eed }
    }
}

/// The horizon formula with its `kf -> 0` limits.
pub fn horizon(m_sup: f64, kf: f64, k_sigma: f64, k_gamma: f64, n: usize, m: usize, d: usize) -> f64 {
    if m_sup >= 1.0 {
        return 0.0;
    }
    let s = n as f64 * k_sigma * k_sigma + m as f64 * k_gamma * k_gamma;
    let d = d as f64;
    let one_minus = 1.0 - m_sup * m_sup;
    if kf == 0.0 {
        return if s == 0.0 || d == 0.0 { f64::INFINITY } else { one_minus / (8.0 * d * s) };
    }
    let disc = 16.0 * d * d * s * s + 4.0 * kf * kf * one_minus;
    (-4.0 * d * s + disc.sqrt()) / (4.0 * kf * kf)
}

/// The lower block `[-D_x g, I - D_u g]` of `D(0, u - g)`. When `m != p`
/// the identity is the rectangular `p x m` embedding.
struct LowerBlock {
    n: usize,
    m: usize,
    p: usize,
    dg: Vec<Compiled>,
}

impl LowerBlock {
    fn new(pr: &SdaeProblem) -> Result<Self> {
        let layout = pr.layout();
        let vars = layout.vars();
        let dg: Vec<Expr> = pr.constraint.iter().flat_map(|g| g.gradient(&vars)).collect();
        Ok(Self { n: pr.n, m: pr.m, p: pr.p, dg: compile_all(&dg, layout)? })
    }

    fn norm_at(&self, point: &[f64], norm: MatrixNorm) -> Result<f64> {
        let cols = self.n + self.m;
        let mut a = Matrix::zeros(self.p, cols);
        eval_all(&self.dg, point, a.as_mut_slice(), &mut Vec::new())?;
        for v in a.as_mut_slice() {
            *v = -*v;
        }
        for i in 0..self.m.min(self.p) {
            a[(i, self.n + i)] += 1.0;
        }
        Ok(match norm {
            MatrixNorm::Spectral => a.spectral_norm(),
            MatrixNorm::MaxRowSum => a.inf_norm(),
        })
    }
}

fn lipschitz(code: &[Compiled], bx: &[(f64, f64)], pairs: usize, seed: u64) -> Result<f64> {
    if code.iter().all(|c| c.source().free_vars().is_empty()) {
        return Ok(0.0);
    }
    let mut rng = UniformSampler::new(seed);
    let mut stack = Vec::new();
    let (mut va, mut vb) = (vec![0.0; code.len()], vec![0.0; code.len()]);
    let mut best = 0.0f64;
    for _ in 0..pairs {
        let a: Vec<f64> = bx.iter().map(|&(lo, hi)| rng.in_range(lo, hi)).collect();
        let b: Vec<f64> = bx.iter().map(|&(lo, hi)| rng.in_range(lo, hi)).collect();
        let dist = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        if dist == 0.0 {
            continue;
        }
        if eval_all(code, &a, &mut va, &mut stack).is_err() || eval_all(code, &b, &mut vb, &mut stack).is_err() {
            continue;
        }
        let diff = va.iter().zip(&vb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        best = best.max(diff / dist);
    }
    Ok(best)
}

/// Evaluates the contraction hypothesis over `bx` (one interval per
/// coordinate of `(x, u)`).
pub fn check_contraction(pr: &SdaeProblem, bx: &[(f64, f64)], cfg: &ContractionConfig) -> Result<ContractionReport> {
    let dims = pr.n + pr.m;
    if bx.len() != dims {
        return Err(Error::DimensionMismatch(format!("box has {} intervals, expected n + m = {dims}", bx.len())));
    }
    let block = LowerBlock::new(pr)?;
    let total = grid_len(dims, cfg.grid_per_dim);
    let values: Vec<(f64, Vec<f64>)> = (0..total)
        .into_par_iter()
        .map(|k| {
            let p = grid_point(bx, cfg.grid_per_dim, k);
            let v = block.norm_at(&p, cfg.norm).unwrap_or(f64::NAN);
            (v, p)
        })
        .collect();
    let mut skipped = 0;
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for (v, p) in values {
        if v.is_nan() {
            skipped += 1;
        } else if v > best.0 {
            best = (v, p);
        }
    }
    if best.1.is_empty() {
        return Err(Error::Precondition("D g could not be evaluated anywhere in the box".into()));
    }
    let layout = pr.layout();
    let kf = lipschitz(&compile_all(&pr.drift, layout)?, bx, cfg.sample_pairs, cfg.seed)?;
    let k_sigma = lipschitz(&compile_all(pr.diffusion.iter().flatten(), layout)?, bx, cfg.sample_pairs, cfg.seed ^ 1)?;
    let k_gamma =
        lipschitz(&compile_all(pr.constraint_noise.iter().flatten(), layout)?, bx, cfg.sample_pairs, cfg.seed ^ 2)?;
    let a = horizon(best.0, kf, k_sigma, k_gamma, pr.n, pr.m, pr.d);
    let mut notes = vec![format!(
        "Lipschitz constants are sampled from {} random pairs and are lower bounds; the horizon is an estimate",
        cfg.sample_pairs
    )];
    if skipped > 0 {
        notes.push(format!("{skipped} grid points skipped after evaluation errors"));
    }
    if best.0 >= 1.0 {
        notes.push("M >= 1: the contraction hypothesis is violated".into());
    }
    if pr.m != pr.p {
        notes.push(format!(
            "m = {} but p = {}: the map u - g is not defined, M uses the rectangular identity and the hypothesis cannot hold",
            pr.m, pr.p
        ));
    }
    Ok(ContractionReport {
        m_sup: best.0,
        m_argmax: best.1,
        kf,
        k_sigma,
        k_gamma,
        horizon: a,
        satisfied: best.0 < 1.0 && a > 0.0 && pr.m == pr.p,
        bx: bx.to_vec(),
        norm: cfg.norm,
        notes,
    })
}

#[derive(Debug, Clone)]
pub struct PicardOptions {
    pub iterations: usize,
    pub tol: f64,
    /// Leaving this box (over `(x, u)`) truncates the iterate.
    pub region: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone)]
pub struct PicardSolution {
    pub path: SamplePath,
    pub iterations: usize,
    /// Sup-norm change of each iteration.
    pub deltas: Vec<f64>,
}

/// Iterates the discretized map with increments drawn from `seed`.
pub fn picard_solve(
    pr: &SdaeProblem,
    dt: f64,
    t_end: f64,
    iterations: usize,
    seed: u64,
    tol: f64,
) -> Result<PicardSolution> {
    let inc = wiener_increments(seed, steps_for(t_end, dt), pr.d, dt);
    picard_solve_with(pr, dt, t_end, &inc, seed, &PicardOptions { iterations, tol, region: None })
}

struct Coefficients {
    f: Vec<Compiled>,
    sigma: Vec<Compiled>,
    g: Vec<Compiled>,
    gamma: Vec<Compiled>,
}

/// One application of the discretized map.
///
/// The state row is integrated forward in time with the algebraic iterate
/// held fixed, so for a given `u` it is exactly the Euler–Maruyama path; the
/// algebraic row uses the previous iterate throughout. Returns the new
/// iterate (row-major `(x, u)` per grid point) and how far it is valid.
fn apply_map(
    c: &Coefficients,
    pr: &SdaeProblem,
    old: &[f64],
    len: usize,
    dt: f64,
    inc: &[f64],
    region: Option<&[(f64, f64)]>,
) -> (Vec<f64>, usize, PathStatus, Option<String>) {
    let (n, m, p, d) = (pr.n, pr.m, pr.p, pr.d);
    let w = n + m;
    let mut new = vec![0.0; len * w];
    let mut stack = Vec::new();
    let (mut f, mut sigma) = (vec![0.0; n], vec![0.0; n * d]);
    let (mut g, mut gamma) = (vec![0.0; p], vec![0.0; p * d]);
    let mut noise = vec![0.0; p];
    new[..n].copy_from_slice(&pr.x0);
    let mut mixed = vec![0.0; w];
    let fail = |k: usize, e: Error| {
        let (status, detail) = crate::integrator::fault_status(Fault::from(e), k);
        (k, status, detail)
    };
    for k in 0..len {
        let prev = &old[k * w..(k + 1) * w];
        // algebraic row from the old iterate
        if let Err(e) = eval_all(&c.g, prev, &mut g, &mut stack) {
            let (k, s, dtl) = fail(k, e);
            new.truncate(k.max(1) * w);
            return (new, k.max(1), s, dtl);
        }
        for i in 0..m {
            new[k * w + n + i] = prev[n + i] - g[i] - noise[i];
        }
        if k + 1 == len {
            break;
        }
        if let Err(e) = eval_all(&c.gamma, prev, &mut gamma, &mut stack) {
            let (k, s, dtl) = fail(k, e);
            new.truncate((k + 1) * w);
            return (new, k + 1, s, dtl);
        }
        let dw = &inc[k * d..(k + 1) * d];
        for i in 0..p {
            noise[i] += (0..d).map(|j| gamma[i * d + j] * dw[j]).sum::<f64>();
        }
        // state row: new x with old u
        mixed[..n].copy_from_slice(&new[k * w..k * w + n]);
        mixed[n..].copy_from_slice(&prev[n..]);
        let step = eval_all(&c.f, &mixed, &mut f, &mut stack).and_then(|_| eval_all(&c.sigma, &mixed, &mut sigma, &mut stack));
        if let Err(e) = step {
            let (k, s, dtl) = fail(k, e);
            new.truncate((k + 1) * w);
            return (new, k + 1, s, dtl);
        }
        for i in 0..n {
            let v = mixed[i] + f[i] * dt + (0..d).map(|j| sigma[i * d + j] * dw[j]).sum::<f64>();
            new[(k + 1) * w + i] = v;
        }
        let next = &new[(k + 1) * w..(k + 1) * w + n];
        if next.iter().any(|v| !v.is_finite()) {
            new.truncate((k + 1) * w);
            return (new, k + 1, PathStatus::DomainError { step: k }, Some("state became non-finite".into()));
        }
        if let Some(r) = region {
            if next.iter().zip(r).any(|(v, (lo, hi))| v < lo || v > hi) {
                new.truncate((k + 1) * w);
                return (new, k + 1, PathStatus::RegionExit { step: k }, Some("state left the box".into()));
            }
        }
    }
    (new, len, PathStatus::Completed, None)
}

/// As [`picard_solve`] with caller-supplied increments.
pub fn picard_solve_with(
    pr: &SdaeProblem,
    dt: f64,
    t_end: f64,
    increments: &[f64],
    seed: u64,
    opts: &PicardOptions,
) -> Result<PicardSolution> {
    if pr.m != pr.p {
        return Err(Error::DimensionMismatch(format!("Picard iteration needs m = p, got m = {} and p = {}", pr.m, pr.p)));
    }
    let (n, m, d) = (pr.n, pr.m, pr.d);
    let steps = steps_for(t_end, dt);
    if increments.len() < steps * d {
        return Err(Error::DimensionMismatch(format!("{} increments supplied, {} needed", increments.len(), steps * d)));
    }
    let layout = pr.layout();
    let c = Coefficients {
        f: compile_all(&pr.drift, layout)?,
        sigma: compile_all(pr.diffusion.iter().flatten(), layout)?,
        g: compile_all(&pr.constraint, layout)?,
        gamma: compile_all(pr.constraint_noise.iter().flatten(), layout)?,
    };
    let w = n + m;
    let mut len = steps + 1;
    let mut iterate: Vec<f64> = (0..len).flat_map(|_| pr.x0.iter().chain(&pr.u0).copied()).collect();
    let mut deltas = Vec::new();
    let labels: Vec<String> = layout.vars().iter().map(|v| v.to_string()).collect();
    for it in 1..=opts.iterations {
        let (new, new_len, st, dtl) = apply_map(&c, pr, &iterate, len, dt, increments, opts.region.as_deref());
        let delta = new
            .iter()
            .zip(&iterate[..new_len * w])
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        deltas.push(delta);
        iterate = new;
        len = new_len;
        if delta < opts.tol {
            let path = finish_path(labels, dt, iterate, d, increments[..steps * d].to_vec(), seed, st, dtl);
            return Ok(PicardSolution { path, iterations: it, deltas });
        }
        if !delta.is_finite() {
            break;
        }
    }
    Err(Error::NonConvergence { iterations: opts.iterations, last_delta: deltas.last().copied().unwrap_or(f64::NAN) })
}
