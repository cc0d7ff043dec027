//! The `sdae` command line.
//!
//! Exit codes: 0 success, 1 usage, 2 invalid problem, 3 failed method
//! precondition, 4 runtime failure. Diagnostics go to standard error.

use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::bounded::{resolve_gain, solve_bounded_with, BoundedConfig, BoundedMode, BoundedSystem};
use crate::error::{Error, Result};
use crate::expr::parse;
use crate::index1::{checked_reduction, solve_index1_with};
use crate::integrator::{constraint_process, read_path_csv, steps_for, write_path_csv, SamplePath};
use crate::montecarlo::{stream_paths, StatsAccumulator, ViolationReport};
use crate::picard::{check_contraction, picard_solve_with, ContractionConfig, MatrixNorm, PicardOptions};
use crate::problem::{builtin, classify, load_problem, SdaeProblem, BUILTINS};
use crate::reduction::{compute_index, reduce_once, IndexOutcome, MAX_STEPS};
use crate::rng::wiener_increments;
use crate::unit_prob::{build_unit_prob_sde_on, consistent_init, solve_unit_prob_with, CharacteristicSpec, ValidationGrid};
use crate::wellposed::{is_ill_posed, DEFAULT_TOL};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_PROBLEM: i32 = 2;
pub const EXIT_PRECONDITION: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "sdae", version, about = "Stochastic differential-algebraic equation toolkit")]
pub struct Cli {
    /// Worker threads for ensembles (default: SDAE_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Index, uncontrollable noise and ill-posedness of a problem.
    Classify { problem: String },
    /// Tangency check on a box, optionally the contraction condition.
    Check(CheckArgs),
    /// Index reduction steps and the resulting index.
    Reduce {
        problem: String,
        #[arg(long, default_value_t = MAX_STEPS)]
        steps: usize,
    },
    /// Simulate with one of the solution methods.
    Solve(SolveArgs),
    /// Recompute violation statistics from a stored ensemble.
    VerifyBound(VerifyArgs),
    /// Print a builtin problem in the file format.
    Builtin {
        name: String,
        /// Write the problem file (to --out, or standard output).
        #[arg(long)]
        emit: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run a solve from its manifest and compare outputs byte for byte.
    Replay {
        dir: PathBuf,
        /// Where to write the re-run (default DIR/replay).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    pub problem: String,
    /// `lo:hi` per coordinate, comma separated: x for the tangency check,
    /// x then u for the contraction check.
    #[arg(long = "box", allow_hyphen_values = true)]
    pub bx: Option<String>,
    #[arg(long)]
    pub contraction: bool,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    /// Use the max-row-sum norm instead of the spectral norm.
    #[arg(long)]
    pub row_sum: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Index1,
    Picard,
    UnitProb,
    Bounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Newton,
    Lemma1,
}

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    pub problem: String,
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long, default_value_t = 1e-3)]
    pub dt: f64,
    #[arg(long = "t-end", default_value_t = 1.0)]
    pub t_end: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub paths: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Constraint band for the violation statistics.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Picard iteration cap.
    #[arg(long, default_value_t = 50)]
    pub iterations: usize,
    /// Picard stopping tolerance.
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
    /// File with one characteristic expression per state, in u1..um.
    #[arg(long = "y-file")]
    pub y_file: Option<PathBuf>,
    /// Characteristic expression, repeated once per state.
    #[arg(long = "y", allow_hyphen_values = true)]
    pub y: Vec<String>,
    #[arg(long = "y-box", allow_hyphen_values = true)]
    pub y_box: Option<String>,
    #[arg(long = "y-grid", default_value_t = 101)]
    pub y_grid: usize,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long = "box", allow_hyphen_values = true)]
    pub bx: Option<String>,
    /// Explicit gain; overrides the automatic choice.
    #[arg(long, allow_hyphen_values = true)]
    pub b: Option<f64>,
    #[arg(long, default_value_t = 101)]
    pub grid: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Newton)]
    pub mode: ModeArg,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    pub dir: PathBuf,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

/// Parses `argv` (without the program name) and runs it.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(std::iter::once("sdae".to_string()).chain(argv.iter().cloned())) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    configure_threads(cli.threads);
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match dispatch(cli.command, &argv, &mut out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_problem_error() {
        EXIT_PROBLEM
    } else if e.is_precondition_error() {
        EXIT_PRECONDITION
    } else {
        EXIT_RUNTIME
    }
}

fn configure_threads(flag: Option<usize>) {
    let n = flag.or_else(|| std::env::var("SDAE_THREADS").ok()?.parse().ok()).filter(|&n| n > 0);
    if let Some(n) = n {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn dispatch(cmd: Command, argv: &[String], out: &mut impl Write) -> Result<i32> {
    match cmd {
        Command::Classify { problem } => {
            let (pr, _) = load_source(&problem)?;
            let c = classify(&pr);
            writeln!(out, "{c}")?;
            for w in &c.warnings {
                eprintln!("warning: {w}");
            }
            Ok(EXIT_OK)
        }
        Command::Check(args) => check(args, out),
        Command::Reduce { problem, steps } => reduce(&problem, steps, out),
        Command::Solve(args) => {
            let (pr, text) = load_source(&args.problem)?;
            solve(&args, &pr, &text, argv, out)
        }
        Command::VerifyBound(args) => verify(args, out),
        Command::Builtin { name, emit, out: target } => {
            let text = builtin(&name)?.to_file_string();
            match (emit, target) {
                (true, Some(path)) => {
                    fs::write(&path, &text)?;
                    writeln!(out, "wrote {}", path.display())?;
                }
                _ => out.write_all(text.as_bytes())?,
            }
            Ok(EXIT_OK)
        }
        Command::Replay { dir, out: target } => replay(&dir, target, out),
    }
}

/// Reads a problem file, falling back to a builtin name (with or without a
/// `.sdae` suffix) when no such file exists. Returns the problem and the
/// text it was loaded from.
pub fn load_source(arg: &str) -> Result<(SdaeProblem, String)> {
    let path = Path::new(arg);
    let text = if path.is_file() {
        fs::read_to_string(path)?
    } else {
        let name = arg.strip_suffix(".sdae").unwrap_or(arg);
        let name = Path::new(name).file_name().and_then(|s| s.to_str()).unwrap_or(name);
        if !BUILTINS.contains(&name) {
            return Err(Error::Format(format!(
                "no file `{arg}` and no builtin of that name; builtins: {}",
                BUILTINS.join(", ")
            )));
        }
        builtin(name)?.to_file_string()
    };
    Ok((load_problem(&text)?, text))
}

/// `lo:hi,lo:hi,...`
pub fn parse_box(spec: &str) -> Result<Vec<(f64, f64)>> {
    spec.split(',')
        .map(|part| {
            let part = part.trim();
            // split on the colon that separates the bounds, not a sign
            let (lo, hi) = part.split_once(':').ok_or_else(|| Error::Format(format!("interval `{part}` is not lo:hi")))?;
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::Format(format!("bad bound `{s}` in `{part}`")));
            let (lo, hi) = (num(lo)?, num(hi)?);
            if !(lo <= hi) {
                return Err(Error::Format(format!("interval `{part}` has lo > hi")));
            }
            Ok((lo, hi))
        })
        .collect()
}

fn check(args: CheckArgs, out: &mut impl Write) -> Result<i32> {
    let (pr, _) = load_source(&args.problem)?;
    let bx = match &args.bx {
        Some(s) => parse_box(s)?,
        None => pr.x0.iter().map(|&c| (c - 1.0, c + 1.0)).collect(),
    };
    if args.contraction {
        let mut full = bx.clone();
        if full.len() == pr.n {
            full.extend(pr.u0.iter().map(|&c| (c - 1.0, c + 1.0)));
            eprintln!("note: no u intervals given; using u0 +- 1");
        }
        let mut cfg = ContractionConfig::default();
        if let Some(g) = args.grid {
            cfg.grid_per_dim = g;
        }
        if args.row_sum {
            cfg.norm = MatrixNorm::MaxRowSum;
        }
        let rep = check_contraction(&pr, &full, &cfg)?;
        writeln!(out, "M = {:.4} at ({})", rep.m_sup, join_f(&rep.m_argmax))?;
        writeln!(out, "kf = {:.4e}, k_sigma = {:.4e}, k_gamma = {:.4e}", rep.kf, rep.k_sigma, rep.k_gamma)?;
        writeln!(out, "horizon = {:e}", rep.horizon)?;
        writeln!(out, "contraction {}", if rep.satisfied { "satisfied" } else { "violated" })?;
        for note in &rep.notes {
            writeln!(out, "note: {note}")?;
        }
        return Ok(EXIT_OK);
    }
    let x_box: Vec<(f64, f64)> = bx.iter().take(pr.n).copied().collect();
    let rep = is_ill_posed(&pr, &x_box, args.grid.unwrap_or(21), args.tol)?;
    writeln!(out, "{:?}", rep.verdict)?;
    writeln!(
        out,
        "max residual {:.6e} at ({}) over {} probes",
        rep.max_residual_norm,
        join_f(&rep.worst_point),
        rep.probes
    )?;
    Ok(EXIT_OK)
}

fn reduce(problem: &str, steps: usize, out: &mut impl Write) -> Result<i32> {
    let (pr, _) = load_source(problem)?;
    let rep = compute_index(&pr, steps)?;
    for (k, step) in rep.steps.iter().enumerate() {
        writeln!(out, "step {}: {} rows", k + 1, step.problem.p)?;
        for (i, h) in step.h().iter().enumerate() {
            writeln!(out, "  h{} = {h}", i + 1)?;
        }
    }
    match &rep.outcome {
        IndexOutcome::Index(j) => {
            writeln!(out, "index {j}")?;
            writeln!(out, "dimension law m = p(1+d)^(J-1): {}", if rep.dimension_law_holds { "holds" } else { "fails" })?;
            if let Some(u0) = &rep.consistent_u0 {
                writeln!(out, "consistent u0 = ({})", join_f(u0))?;
            }
        }
        other => writeln!(out, "{other}")?,
    }
    for w in &rep.warnings {
        eprintln!("warning: {w}");
    }
    // a single explicit step is still available when the loop stops early
    if rep.steps.is_empty() && steps > 0 {
        let step = reduce_once(&pr)?;
        for h in step.h() {
            writeln!(out, "  {h}")?;
        }
    }
    Ok(EXIT_OK)
}

fn join_f(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",")
}

fn read_y_spec(args: &SolveArgs, pr: &SdaeProblem) -> Result<CharacteristicSpec> {
    let epsilon = args.epsilon.ok_or_else(|| Error::Precondition("unit-prob needs --epsilon".into()))?;
    let lines: Vec<String> = match &args.y_file {
        Some(path) => fs::read_to_string(path)?
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim().to_string())
            .filter(|l| !l.is_empty())
            .collect(),
        None => args.y.clone(),
    };
    if lines.is_empty() {
        return Err(Error::Precondition("unit-prob needs --y-file or one --y per state".into()));
    }
    let y = lines.iter().map(|l| parse(l)).collect::<Result<Vec<_>>>().map_err(|e| Error::SpecInvalid(e.to_string()))?;
    if y.len() != pr.n {
        return Err(Error::SpecInvalid(format!("{} characteristic expressions for n = {}", y.len(), pr.n)));
    }
    Ok(CharacteristicSpec { y, epsilon })
}

/// What a solve produced, before it is written out.
struct Ensemble {
    paths: Vec<(SamplePath, Vec<f64>)>,
    report: ViolationReport,
}

fn solve(args: &SolveArgs, pr: &SdaeProblem, text: &str, argv: &[String], out: &mut impl Write) -> Result<i32> {
    if args.paths == 0 {
        return Err(Error::Precondition("--paths must be at least 1".into()));
    }
    let steps = steps_for(args.t_end, args.dt);
    let d = pr.d;
    let (dt, t_end) = (args.dt, args.t_end);
    let mut params = json!({
        "method": format!("{:?}", args.method).to_lowercase(),
        "dt": dt,
        "t_end": t_end,
        "paths": args.paths,
    });
    let keep_paths = args.out.is_some();
    let mut bound = None;
    let ens = match args.method {
        Method::Index1 => {
            let red = checked_reduction(pr)?;
            pr.require_consistent_init()?;
            let eps = args.epsilon.unwrap_or(1.0);
            params["epsilon"] = json!(eps);
            run_ensemble(args, pr, eps, None, keep_paths, |seed| {
                let inc = wiener_increments(seed, steps, d, dt);
                Ok(solve_index1_with(&red, dt, t_end, &inc, seed)?.path)
            })?
        }
        Method::Picard => {
            let c = classify(pr);
            if c.ill_posed == crate::wellposed::Verdict::IllPosed {
                return Err(Error::Precondition(format!("the problem is ill-posed ({c}); no Itô solution exists")));
            }
            let eps = args.epsilon.unwrap_or(1.0);
            params["epsilon"] = json!(eps);
            params["iterations"] = json!(args.iterations);
            params["tol"] = json!(args.tol);
            let opts = PicardOptions { iterations: args.iterations, tol: args.tol, region: None };
            run_ensemble(args, pr, eps, None, keep_paths, |seed| {
                let inc = wiener_increments(seed, steps, d, dt);
                Ok(picard_solve_with(pr, dt, t_end, &inc, seed, &opts)?.path)
            })?
        }
        Method::UnitProb => {
            let spec = read_y_spec(args, pr)?;
            let grid = ValidationGrid {
                bx: match &args.y_box {
                    Some(s) => parse_box(s)?,
                    None => ValidationGrid::default_for(pr.m).bx,
                },
                per_dim: args.y_grid,
            };
            let red = build_unit_prob_sde_on(pr, &spec, &grid)?;
            let u0 = consistent_init(&spec, pr, &pr.u0)?;
            params["epsilon"] = json!(spec.epsilon);
            params["y"] = json!(spec.y.iter().map(|e| e.to_string()).collect::<Vec<_>>());
            params["y_box"] = json!(grid.bx);
            params["y_grid"] = json!(grid.per_dim);
            params["u0"] = json!(u0);
            let warned = std::sync::Once::new();
            run_ensemble(args, pr, spec.epsilon, None, keep_paths, |seed| {
                let inc = wiener_increments(seed, steps, d, dt);
                let sol = solve_unit_prob_with(&red, &u0, dt, t_end, &inc, seed)?;
                if !sol.warnings.is_empty() {
                    warned.call_once(|| sol.warnings.iter().for_each(|w| eprintln!("warning: {w}")));
                }
                Ok(sol.path)
            })?
        }
        Method::Bounded => {
            let epsilon = args.epsilon.ok_or_else(|| Error::Precondition("bounded needs --epsilon".into()))?;
            let alpha = args.alpha.ok_or_else(|| Error::Precondition("bounded needs --alpha".into()))?;
            let bx = match &args.bx {
                Some(s) => parse_box(s)?,
                None => return Err(Error::Precondition("bounded needs --box for the supremum of Tr(AA')".into())),
            };
            let mut cfg = BoundedConfig::new(epsilon, alpha, bx);
            cfg.grid_per_dim = args.grid;
            cfg.b = args.b;
            let (gain, j) = resolve_gain(pr, &cfg)?;
            writeln!(out, "J = {} (grid {}, inflated {})", j.raw, j.grid_max, j.inflated)?;
            writeln!(out, "threshold J/(2 eps^2 alpha) = {}", gain.threshold)?;
            writeln!(out, "b = {}", gain.b)?;
            if gain.b <= gain.threshold {
                eprintln!("warning: b = {} does not exceed the threshold {}", gain.b, gain.threshold);
            }
            let sys = BoundedSystem::new(pr, gain.b)?;
            sys.initial_u()?;
            let mode = match args.mode {
                ModeArg::Newton => BoundedMode::NewtonPerStep,
                ModeArg::Lemma1 => BoundedMode::Lemma1Reduction,
            };
            params["epsilon"] = json!(epsilon);
            params["alpha"] = json!(alpha);
            params["box"] = json!(cfg.bx);
            params["grid"] = json!(cfg.grid_per_dim);
            params["J"] = json!(j.raw);
            params["J_grid"] = json!(j.grid_max);
            params["J_inflated"] = json!(j.inflated);
            params["threshold"] = json!(gain.threshold);
            params["b"] = json!(gain.b);
            params["mode"] = json!(format!("{mode:?}"));
            bound = Some((j.raw, gain.b));
            run_ensemble(args, pr, epsilon, bound, keep_paths, |seed| {
                let inc = wiener_increments(seed, steps, d, dt);
                Ok(solve_bounded_with(pr, &sys, dt, t_end, &inc, seed, mode)?.path)
            })?
        }
    };
    let rep = &ens.report;
    writeln!(out, "paths: {} completed, {} truncated", rep.completed, rep.truncated)?;
    writeln!(out, "max P(|lambda| > {}) = {}", rep.epsilon, rep.max_p())?;
    if let Some(alpha) = args.alpha {
        writeln!(out, "alpha = {alpha}: {}", if rep.max_p() <= alpha { "bound holds" } else { "bound violated" })?;
    }
    if bound.is_some() {
        writeln!(out, "mean-square bound exceeded (3 SE) at {} grid times", rep.bound_violations(3.0).len())?;
    }
    if let Some(dir) = &args.out {
        let outputs = write_outputs(dir, pr, &ens)?;
        write_manifest(dir, argv, text, args.seed, params, &outputs)?;
        writeln!(out, "wrote {} files to {}", outputs.len() + 1, dir.display())?;
    }
    Ok(EXIT_OK)
}

/// Streams the ensemble through the statistics, keeping paths only when
/// they will be written.
fn run_ensemble(
    args: &SolveArgs,
    pr: &SdaeProblem,
    epsilon: f64,
    bound: Option<(f64, f64)>,
    keep: bool,
    simulate: impl Fn(u64) -> Result<SamplePath> + Sync,
) -> Result<Ensemble> {
    let steps = steps_for(args.t_end, args.dt);
    let mut acc = StatsAccumulator::new(steps + 1, pr.p, epsilon);
    let mut kept = Vec::new();
    stream_paths(
        args.paths,
        args.seed,
        |seed| {
            let path = simulate(seed)?;
            let lambda = constraint_process(pr, &path)?;
            Ok((path, lambda))
        },
        |_, (path, lambda)| {
            acc.push(&lambda, path.status);
            if keep {
                kept.push((path, lambda));
            }
            Ok(())
        },
    )?;
    Ok(Ensemble { paths: kept, report: acc.finish(args.dt, bound)? })
}

fn write_outputs(dir: &Path, pr: &SdaeProblem, ens: &Ensemble) -> Result<Vec<String>> {
    let paths_dir = dir.join("paths");
    fs::create_dir_all(&paths_dir)?;
    let mut outputs = Vec::new();
    for (k, (path, lambda)) in ens.paths.iter().enumerate() {
        let name = format!("paths/path_{k:05}.csv");
        let mut w = io::BufWriter::new(fs::File::create(dir.join(&name))?);
        write_path_csv(&mut w, path, lambda, pr.p)?;
        w.flush()?;
        outputs.push(name);
    }
    let mut w = io::BufWriter::new(fs::File::create(dir.join("report.csv"))?);
    ens.report.write_csv(&mut w)?;
    w.flush()?;
    outputs.push("report.csv".into());
    Ok(outputs)
}

pub fn problem_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn write_manifest(dir: &Path, argv: &[String], text: &str, seed: u64, params: Value, outputs: &[String]) -> Result<()> {
    let manifest = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": "solve",
        "argv": argv,
        "problem_hash": problem_hash(text),
        "problem": text,
        "seed": seed,
        "params": params,
        "outputs": outputs,
    });
    let body = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(dir.join("manifest.json"), body + "\n")?;
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<Value> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest.json: {e}")))
}

fn verify(args: VerifyArgs, out: &mut impl Write) -> Result<i32> {
    let manifest = read_manifest(&args.dir)?;
    let params = &manifest["params"];
    let epsilon = args
        .epsilon
        .or_else(|| params["epsilon"].as_f64())
        .ok_or_else(|| Error::Precondition("no epsilon given and none recorded in the manifest".into()))?;
    let alpha = args.alpha.or_else(|| params["alpha"].as_f64());
    let bound = params["J"].as_f64().zip(params["b"].as_f64());
    let dt = params["dt"].as_f64().ok_or_else(|| Error::Format("manifest lacks params.dt".into()))?;
    let mut files: Vec<PathBuf> = fs::read_dir(args.dir.join("paths"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let stored = files
        .iter()
        .map(|f| read_path_csv(BufReader::new(fs::File::open(f)?)))
        .collect::<Result<Vec<_>>>()?;
    let times = stored.iter().map(|s| s.t.len()).max().unwrap_or(0);
    let p = stored[0].p;
    let mut acc = StatsAccumulator::new(times, p, epsilon);
    for s in &stored {
        acc.push(&s.lambda, s.status);
    }
    let rep = acc.finish(dt, bound)?;
    let mut w = io::BufWriter::new(fs::File::create(args.dir.join("verify_report.csv"))?);
    rep.write_csv(&mut w)?;
    w.flush()?;
    writeln!(out, "paths: {} completed, {} truncated", rep.completed, rep.truncated)?;
    writeln!(out, "max P(|lambda| > {epsilon}) = {}", rep.max_p())?;
    let mut ok = true;
    if let Some(alpha) = alpha {
        let holds = rep.max_p() <= alpha;
        ok &= holds;
        writeln!(out, "P <= alpha = {alpha}: {}", if holds { "PASS" } else { "FAIL" })?;
    }
    if bound.is_some() {
        let bad = rep.bound_violations(3.0);
        ok &= bad.is_empty();
        writeln!(out, "E|lambda|^2 <= J(1-exp(-2bt))/(2b) + 3 SE: {}", if bad.is_empty() { "PASS" } else { "FAIL" })?;
    }
    writeln!(out, "wrote {}", args.dir.join("verify_report.csv").display())?;
    if ok {
        Ok(EXIT_OK)
    } else {
        eprintln!("error: the bound does not hold on this ensemble");
        Ok(EXIT_RUNTIME)
    }
}

fn replay(dir: &Path, target: Option<PathBuf>, out: &mut impl Write) -> Result<i32> {
    let manifest = read_manifest(dir)?;
    let argv: Vec<String> = manifest["argv"]
        .as_array()
        .ok_or_else(|| Error::Format("manifest lacks argv".into()))?
        .iter()
        .map(|v| v.as_str().unwrap_or_default().to_string())
        .collect();
    let text = manifest["problem"].as_str().ok_or_else(|| Error::Format("manifest lacks the problem text".into()))?;
    if manifest["problem_hash"].as_str() != Some(problem_hash(text).as_str()) {
        return Err(Error::Format("problem text does not match the recorded hash".into()));
    }
    let cli = Cli::try_parse_from(std::iter::once("sdae".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| Error::Format(format!("manifest argv: {e}")))?;
    let Command::Solve(mut args) = cli.command else {
        return Err(Error::Format("only solve runs can be replayed".into()));
    };
    let target = target.unwrap_or_else(|| dir.join("replay"));
    args.out = Some(target.clone());
    let pr = load_problem(text)?;
    let mut sink = Vec::new();
    solve(&args, &pr, text, &argv, &mut sink)?;
    let outputs: Vec<String> = manifest["outputs"]
        .as_array()
        .map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect())
        .unwrap_or_default();
    let mut differing = Vec::new();
    for name in &outputs {
        if fs::read(dir.join(name)).ok() != fs::read(target.join(name)).ok() {
            differing.push(name.clone());
        }
    }
    if differing.is_empty() {
        writeln!(out, "replay reproduced {} files byte for byte in {}", outputs.len(), target.display())?;
        Ok(EXIT_OK)
    } else {
        eprintln!("error: {} file(s) differ: {}", differing.len(), differing.join(", "));
        Ok(EXIT_RUNTIME)
    }
}
