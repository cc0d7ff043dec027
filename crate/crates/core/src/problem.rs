//! Problem definition, the line-oriented problem file, the builtin registry,
//! and classification.
//!
//! A problem is
//!
//! ```text
//! dx = f(x,u) dt + sigma(x,u) dW
//! g(x,u) = -int_0^t Gamma(x,u) dW
//! ```
//!
//! with `n` states, `m` algebraic variables, `p` constraint rows and a
//! `d`-dimensional Wiener process. Problems are autonomous: the time
//! variable `t` is refused. A time-dependent problem is made autonomous by
//! adding a state with drift `1` and zero diffusion and writing that state
//! wherever `t` appeared (the worked example does this with `x2`).
//!
//! File format:
//!
//! ```text
//! [dims]
//! n=2 m=1 p=1 d=2
//! [drift]
//! x1 + x1^2 + u1
//! 1
//! [diffusion]
//! 0.2, 0
//! 0, 0
//! [constraint]
//! 2*x1 - x1^3 - 0.5*sin(4*x2)
//! [constraint_noise]
//! 0, 0
//! [initial]
//! x=0, 0
//! u=0
//! [meta]
//! name=paper-example
//! ```

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::expr::{parse, Compiled, Expr, Var, VarLayout};
use crate::linalg::{det, Matrix};
use crate::rng::UniformSampler;
use crate::wellposed::{self, Verdict};

/// Tolerance on `|g(x0,u0)|` for a consistent initial point.
pub const CONSISTENCY_TOL: f64 = 1e-8;
/// `|det|` below this counts as singular.
pub const SINGULAR_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SdaeProblem {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub d: usize,
    pub drift: Vec<Expr>,
    /// `n` rows of `d` entries.
    pub diffusion: Vec<Vec<Expr>>,
    pub constraint: Vec<Expr>,
    /// `p` rows of `d` entries.
    pub constraint_noise: Vec<Vec<Expr>>,
    pub x0: Vec<f64>,
    pub u0: Vec<f64>,
}

fn parse_all(rows: &[&str]) -> Result<Vec<Expr>> {
    rows.iter().map(|s| parse(s)).collect()
}

fn parse_matrix(rows: &[&[&str]]) -> Result<Vec<Vec<Expr>>> {
    rows.iter().map(|r| parse_all(r)).collect()
}

impl SdaeProblem {
    /// Builds and validates a problem from expression text.
    #[allow(clippy::too_many_arguments)]
    pub fn from_text(
        name: &str,
        drift: &[&str],
        diffusion: &[&[&str]],
        constraint: &[&str],
        constraint_noise: &[&[&str]],
        x0: &[f64],
        u0: &[f64],
        dims: (usize, usize, usize, usize),
    ) -> Result<SdaeProblem> {
        let (n, m, p, d) = dims;
        let pr = SdaeProblem {
            name: name.to_string(),
            n,
            m,
            p,
            d,
            drift: parse_all(drift)?,
            diffusion: parse_matrix(diffusion)?,
            constraint: parse_all(constraint)?,
            constraint_noise: parse_matrix(constraint_noise)?,
            x0: x0.to_vec(),
            u0: u0.to_vec(),
        };
        pr.validate()?;
        Ok(pr)
    }

    pub fn layout(&self) -> VarLayout {
        VarLayout::new(self.n, self.m)
    }

    /// Shape, variable-range and autonomy checks.
    pub fn validate(&self) -> Result<()> {
        let shape = |what: &str, got: usize, want: usize| {
            if got != want {
                Err(Error::DimensionMismatch(format!("{what} has {got} entries, expected {want}")))
            } else {
                Ok(())
            }
        };
        shape("drift", self.drift.len(), self.n)?;
        shape("diffusion", self.diffusion.len(), self.n)?;
        for (i, row) in self.diffusion.iter().enumerate() {
            shape(&format!("diffusion row {}", i + 1), row.len(), self.d)?;
        }
        shape("constraint", self.constraint.len(), self.p)?;
        shape("constraint_noise", self.constraint_noise.len(), self.p)?;
        for (i, row) in self.constraint_noise.iter().enumerate() {
            shape(&format!("constraint_noise row {}", i + 1), row.len(), self.d)?;
        }
        shape("initial x", self.x0.len(), self.n)?;
        shape("initial u", self.u0.len(), self.m)?;
        let layout = self.layout();
        for (section, e) in self.all_expressions() {
            for v in e.free_vars() {
                if v == Var::T {
                    return Err(Error::AutonomyViolation(format!("{section}: `{e}`")));
                }
                if layout.slot(v).is_none() {
                    return Err(Error::UnknownVariable(format!(
                        "{v} in {section} (n={}, m={})",
                        self.n, self.m
                    )));
                }
            }
        }
        if self.x0.iter().chain(&self.u0).any(|v| !v.is_finite()) {
            return Err(Error::Format("initial values must be finite".into()));
        }
        Ok(())
    }

    fn all_expressions(&self) -> impl Iterator<Item = (&'static str, &Expr)> {
        self.drift
            .iter()
            .map(|e| ("drift", e))
            .chain(self.diffusion.iter().flatten().map(|e| ("diffusion", e)))
            .chain(self.constraint.iter().map(|e| ("constraint", e)))
            .chain(self.constraint_noise.iter().flatten().map(|e| ("constraint_noise", e)))
    }

    /// True when neither `g` nor `Gamma` mentions an algebraic variable.
    pub fn is_high_index(&self) -> bool {
        !self
            .constraint
            .iter()
            .chain(self.constraint_noise.iter().flatten())
            .any(Expr::mentions_u)
    }

    pub fn diffusion_mentions_u(&self) -> bool {
        self.diffusion.iter().flatten().any(Expr::mentions_u)
    }

    pub fn has_constraint_noise(&self) -> bool {
        self.constraint_noise.iter().flatten().any(|e| !e.is_zero())
    }

    /// `g(x,u)` evaluated through the slow path.
    pub fn constraint_at(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let b = crate::expr::Bindings::from_state(x, u);
        self.constraint.iter().map(|e| e.evaluate(&b)).collect()
    }

    /// `max_i |g_i(x0,u0)|`.
    pub fn initial_residual(&self) -> Result<f64> {
        Ok(self
            .constraint_at(&self.x0, &self.u0)?
            .into_iter()
            .fold(0.0, |m, v| m.max(v.abs())))
    }

    pub fn require_consistent_init(&self) -> Result<()> {
        let r = self.initial_residual()?;
        if r > CONSISTENCY_TOL {
            return Err(Error::InconsistentInit { residual: r, tolerance: CONSISTENCY_TOL });
        }
        Ok(())
    }

    pub fn compile(&self) -> Result<CompiledProblem> {
        CompiledProblem::new(self)
    }

    /// Serializes to the problem file format.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        let join = |row: &[Expr]| row.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(", ");
        let nums = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
        writeln!(s, "[dims]\nn={} m={} p={} d={}", self.n, self.m, self.p, self.d).unwrap();
        s.push_str("[drift]\n");
        for e in &self.drift {
            writeln!(s, "{e}").unwrap();
        }
        s.push_str("[diffusion]\n");
        for row in &self.diffusion {
            writeln!(s, "{}", join(row)).unwrap();
        }
        s.push_str("[constraint]\n");
        for e in &self.constraint {
            writeln!(s, "{e}").unwrap();
        }
        s.push_str("[constraint_noise]\n");
        for row in &self.constraint_noise {
            writeln!(s, "{}", join(row)).unwrap();
        }
        writeln!(s, "[initial]\nx={}\nu={}", nums(&self.x0), nums(&self.u0)).unwrap();
        writeln!(s, "[meta]\nname={}", self.name).unwrap();
        s
    }
}

/// Every coefficient compiled against the `(x, u)` slot layout.
#[derive(Debug, Clone)]
pub struct CompiledProblem {
    pub layout: VarLayout,
    pub d: usize,
    pub drift: Vec<Compiled>,
    /// Row-major `n x d`.
    pub diffusion: Vec<Compiled>,
    pub constraint: Vec<Compiled>,
    /// Row-major `p x d`.
    pub constraint_noise: Vec<Compiled>,
}

pub(crate) fn compile_all<'a>(
    exprs: impl IntoIterator<Item = &'a Expr>,
    layout: VarLayout,
) -> Result<Vec<Compiled>> {
    exprs.into_iter().map(|e| Compiled::new(e, layout)).collect()
}

pub(crate) fn eval_all(
    code: &[Compiled],
    slots: &[f64],
    out: &mut [f64],
    stack: &mut Vec<f64>,
) -> Result<()> {
    for (o, c) in out.iter_mut().zip(code) {
        *o = c.eval(slots, stack)?;
    }
    Ok(())
}

impl CompiledProblem {
    fn new(pr: &SdaeProblem) -> Result<Self> {
        let layout = pr.layout();
        Ok(Self {
            layout,
            d: pr.d,
            drift: compile_all(&pr.drift, layout)?,
            diffusion: compile_all(pr.diffusion.iter().flatten(), layout)?,
            constraint: compile_all(&pr.constraint, layout)?,
            constraint_noise: compile_all(pr.constraint_noise.iter().flatten(), layout)?,
        })
    }
}

/// Parses the problem file format.
pub fn load_problem(text: &str) -> Result<SdaeProblem> {
    let mut section: Option<String> = None;
    let mut sections: Vec<(String, Vec<(usize, String)>)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            let name = line[1..line.len() - 1].trim().to_string();
            if sections.iter().any(|(s, _)| *s == name) {
                return Err(Error::Format(format!("line {}: duplicate section [{name}]", lineno + 1)));
            }
            sections.push((name.clone(), Vec::new()));
            section = Some(name);
            continue;
        }
        if section.is_none() {
            return Err(Error::Format(format!("line {}: content before the first section", lineno + 1)));
        }
        sections.last_mut().unwrap().1.push((lineno + 1, line.to_string()));
    }
    let get = |name: &str| sections.iter().find(|(s, _)| s == name).map(|(_, l)| l.as_slice());
    for (name, _) in &sections {
        if !["dims", "drift", "diffusion", "constraint", "constraint_noise", "initial", "meta"]
            .contains(&name.as_str())
        {
            return Err(Error::Format(format!("unknown section [{name}]")));
        }
    }
    let require = |name: &str| get(name).ok_or_else(|| Error::Format(format!("missing section [{name}]")));

    let dims = key_values(require("dims")?)?;
    let dim = |k: &str| -> Result<usize> {
        let v = dims
            .iter()
            .find(|(key, _)| key == k)
            .ok_or_else(|| Error::Format(format!("[dims] is missing `{k}`")))?;
        v.1.parse().map_err(|_| Error::Format(format!("[dims] `{k}` is not a non-negative integer")))
    };
    let (n, m, p, d) = (dim("n")?, dim("m")?, dim("p")?, dim("d")?);

    let exprs = |name: &str| -> Result<Vec<Expr>> {
        get(name)
            .unwrap_or(&[])
            .iter()
            .map(|(no, l)| parse(l).map_err(|e| Error::Format(format!("line {no}: {e}"))).and_then(ok))
            .collect()
    };
    let matrix = |name: &str, rows: usize| -> Result<Vec<Vec<Expr>>> {
        let lines = get(name).unwrap_or(&[]);
        if d == 0 && lines.is_empty() {
            return Ok(vec![Vec::new(); rows]);
        }
        lines
            .iter()
            .map(|(no, l)| {
                l.split(',')
                    .map(|cell| parse(cell.trim()).map_err(|e| Error::Format(format!("line {no}: {e}"))))
                    .collect()
            })
            .collect()
    };

    let drift = exprs("drift")?;
    let diffusion = matrix("diffusion", n)?;
    let constraint = exprs("constraint")?;
    let constraint_noise = matrix("constraint_noise", p)?;

    let initial = key_values(require("initial")?)?;
    let reals = |k: &str| -> Result<Vec<f64>> {
        let Some((_, v)) = initial.iter().find(|(key, _)| key == k) else {
            return Err(Error::Format(format!("[initial] is missing `{k}=`")));
        };
        if v.trim().is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Format(format!("[initial] bad number `{s}`"))))
            .collect()
    };
    let x0 = reals("x")?;
    let u0 = if m == 0 && !initial.iter().any(|(k, _)| k == "u") { Vec::new() } else { reals("u")? };

    let name = get("meta")
        .map(key_values)
        .transpose()?
        .and_then(|kv| kv.into_iter().find(|(k, _)| k == "name").map(|(_, v)| v))
        .unwrap_or_else(|| "unnamed".to_string());

    let pr = SdaeProblem { name, n, m, p, d, drift, diffusion, constraint, constraint_noise, x0, u0 };
    pr.validate()?;
    Ok(pr)
}

fn ok(e: Expr) -> Result<Expr> {
    Ok(e)
}

/// `k=v` pairs; whitespace around `=` is ignored and pairs on one line are
/// separated by whitespace. Values may contain commas and spaces after a
/// comma (`x=0, 0`).
fn key_values(lines: &[(usize, String)]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in lines {
        let mut normalized = String::new();
        let mut chars = line.chars().peekable();
        while let Some(c) = chars.next() {
            if c == '=' || c == ',' {
                while normalized.ends_with(char::is_whitespace) {
                    normalized.pop();
                }
                normalized.push(c);
                while chars.peek().is_some_and(|c| c.is_whitespace()) {
                    chars.next();
                }
            } else {
                normalized.push(c);
            }
        }
        // `name=` may carry spaces in its value; everything else splits on whitespace
        if let Some(v) = normalized.strip_prefix("name=") {
            out.push(("name".to_string(), v.to_string()));
            continue;
        }
        for token in normalized.split_whitespace() {
            let (k, v) = token
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {no}: expected key=value, got `{token}`")))?;
            out.push((k.to_string(), v.to_string()));
        }
    }
    Ok(out)
}

/// Names accepted by [`builtin`].
pub const BUILTINS: [&str; 4] = ["paper-example", "cooling", "linear-index1", "index2-demo"];

/// Canonical instances used throughout the tests and examples.
pub fn builtin(name: &str) -> Result<SdaeProblem> {
    match name {
        // time-dependent constraint made autonomous through x2 (drift 1)
        "paper-example" => SdaeProblem::from_text(
            name,
            &["x1 + x1^2 + u1", "1"],
            &[&["0.2", "0"], &["0", "0"]],
            &["2*x1 - x1^3 - 0.5*sin(4*x2)"],
            &[&["0", "0"]],
            &[0.0, 0.0],
            &[0.0],
            (2, 1, 1, 2),
        ),
        // heat balance with k = C = 1, ambient 0, set point 1, sensor noise 0.5
        "cooling" => SdaeProblem::from_text(
            name,
            &["-(x1 - 0) + u1"],
            &[&["0.5"]],
            &["x1 - 1"],
            &[&["0"]],
            &[1.0],
            &[1.0],
            (1, 1, 1, 1),
        ),
        "linear-index1" => SdaeProblem::from_text(
            name,
            &["u1"],
            &[&["0.3"]],
            &["u1 - x1"],
            &[&["0"]],
            &[1.0],
            &[1.0],
            (1, 1, 1, 1),
        ),
        "index2-demo" => SdaeProblem::from_text(
            name,
            &["u1"],
            &[&["u2"]],
            &["x1"],
            &[&["0"]],
            &[0.0],
            &[0.0, 0.0],
            (1, 2, 1, 1),
        ),
        _ => Err(Error::UnknownBuiltin { name: name.to_string(), available: BUILTINS.join(", ") }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexKind {
    Index1,
    HighIndex,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub kind: IndexKind,
    pub unsdae: bool,
    pub ill_posed: Verdict,
    /// `det D_u g(x0, u0)`; only for index-1 problems with `m == p`.
    pub det_du_g_at_init: Option<f64>,
    /// Worst tangency residual and where it was found, when the check ran.
    pub max_residual: Option<(f64, Vec<f64>)>,
    pub warnings: Vec<String>,
}

impl std::fmt::Display for Classification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            IndexKind::Index1 => {
                f.write_str("index-1")?;
                if let Some(det) = self.det_du_g_at_init {
                    write!(f, " (det D_u g at init = {det:.6e})")?;
                }
                Ok(())
            }
            IndexKind::HighIndex => {
                f.write_str("high-index")?;
                if self.unsdae {
                    f.write_str(", UNSDAE")?;
                }
                match self.ill_posed {
                    Verdict::IllPosed => f.write_str(", ill-posed")?,
                    Verdict::NotIllPosedAtSamples => f.write_str(", not ill-posed at sampled points")?,
                    Verdict::Inapplicable => {}
                }
                if let Some((r, at)) = &self.max_residual {
                    let pt = at.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",");
                    write!(f, " (max residual {r:.1e} at ({pt}))")?;
                }
                Ok(())
            }
        }
    }
}

/// Sorts a problem into index 1 / high index, flags uncontrollable noise and
/// runs the tangency check for those.
///
/// The ill-posedness check samples the box `x0 +- 1` in every state
/// coordinate; use [`wellposed::is_ill_posed`] directly for another region.
pub fn classify(pr: &SdaeProblem) -> Classification {
    let mut warnings = Vec::new();
    if pr.is_high_index() {
        let unsdae = !pr.diffusion_mentions_u();
        let (ill_posed, max_residual) = if unsdae {
            let bx: Vec<(f64, f64)> = pr.x0.iter().map(|&c| (c - 1.0, c + 1.0)).collect();
            let grid = default_grid(pr.n);
            match wellposed::is_ill_posed(pr, &bx, grid, wellposed::DEFAULT_TOL) {
                Ok(report) => (report.verdict, Some((report.max_residual_norm, report.worst_point))),
                Err(e) => {
                    warnings.push(format!("tangency check failed: {e}"));
                    (Verdict::Inapplicable, None)
                }
            }
        } else {
            (Verdict::Inapplicable, None)
        };
        return Classification {
            kind: IndexKind::HighIndex,
            unsdae,
            ill_posed,
            det_du_g_at_init: None,
            max_residual,
            warnings,
        };
    }

    let det_du_g_at_init = if pr.m == pr.p {
        match du_g_det(pr, &pr.x0, &pr.u0) {
            Ok(det0) => {
                if det0.abs() < SINGULAR_GUARD {
                    warnings.push(format!("D_u g is singular at the initial point (det = {det0:e})"));
                }
                neighbourhood_check(pr, det0, &mut warnings);
                Some(det0)
            }
            Err(e) => {
                warnings.push(format!("could not evaluate D_u g at the initial point: {e}"));
                None
            }
        }
    } else {
        warnings.push(format!("m = {} differs from p = {}; D_u g is not square", pr.m, pr.p));
        None
    };
    Classification {
        kind: IndexKind::Index1,
        unsdae: false,
        ill_posed: Verdict::Inapplicable,
        det_du_g_at_init,
        max_residual: None,
        warnings,
    }
}

fn default_grid(n: usize) -> usize {
    let mut g = 11;
    while g > 2 && (g as f64).powi(n as i32) > 20_000.0 {
        g -= 1;
    }
    g.max(2)
}

/// `D_u g` at `(x, u)`, evaluated from symbolic derivatives.
pub fn du_g(pr: &SdaeProblem, x: &[f64], u: &[f64]) -> Result<Matrix> {
    let b = crate::expr::Bindings::from_state(x, u);
    let mut j = Matrix::zeros(pr.p, pr.m);
    for (i, g) in pr.constraint.iter().enumerate() {
        for k in 0..pr.m {
            j[(i, k)] = g.differentiate(Var::U(k + 1)).evaluate(&b)?;
        }
    }
    Ok(j)
}

fn du_g_det(pr: &SdaeProblem, x: &[f64], u: &[f64]) -> Result<f64> {
    Ok(det(&du_g(pr, x, u)?))
}

// 16 points at radius 1e-3 around (x0, u0); warn if det D_u g nearly vanishes
// or changes sign there.
fn neighbourhood_check(pr: &SdaeProblem, det0: f64, warnings: &mut Vec<String>) {
    let dim = pr.n + pr.m;
    let mut rng = UniformSampler::new(0x1d);
    for _ in 0..16 {
        let mut dir: Vec<f64> = (0..dim).map(|_| rng.in_range(-1.0, 1.0)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        dir.iter_mut().for_each(|v| *v *= 1e-3 / norm);
        let x: Vec<f64> = pr.x0.iter().zip(&dir).map(|(a, b)| a + b).collect();
        let u: Vec<f64> = pr.u0.iter().zip(&dir[pr.n..]).map(|(a, b)| a + b).collect();
        match du_g_det(pr, &x, &u) {
            Ok(det) if det.abs() < SINGULAR_GUARD || det.signum() != det0.signum() => {
                warnings.push(format!(
                    "D_u g is not uniformly invertible near the initial point (det = {det:e} at radius 1e-3)"
                ));
                return;
            }
            Ok(_) => {}
            Err(e) => {
                warnings.push(format!("D_u g could not be evaluated near the initial point: {e}"));
                return;
            }
        }
    }
}
