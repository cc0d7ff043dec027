//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero when
//! any criterion fails.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use sdae::bounded::{
    choose_b, resolve_gain, solve_bounded_with, sup_trace, BoundedConfig, BoundedMode, BoundedSystem,
    DEFAULT_GAIN_SAFETY, DEFAULT_TRACE_SAFETY,
};
use sdae::expr::{Bindings, Expr};
use sdae::index1::{solve_index1, Index1Reduction};
use sdae::integrator::{euler_maruyama, steps_for, AugmentedSde, SamplePath};
use sdae::montecarlo::{stream_paths, StatsAccumulator};
use sdae::picard::{check_contraction, picard_solve_with, ContractionConfig, PicardOptions};
use sdae::problem::{builtin, classify, SdaeProblem, BUILTINS};
use sdae::reduction::{compute_index, IndexOutcome, MAX_STEPS};
use sdae::rng::{wiener_increments, UniformSampler};
use sdae::unit_prob::{build_unit_prob_sde, consistent_init, solve_unit_prob_with, CharacteristicSpec, UnitProbReduction};
use sdae::wellposed::{is_ill_posed, Verdict, DEFAULT_TOL};

type Outcome = Result<String, String>;
type Criterion = fn() -> Outcome;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit, format!("took {:.2}s, limit {limit}s", elapsed.as_secs_f64()))
}

fn e<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|err| err.to_string())
}

fn paper_box() -> Vec<(f64, f64)> {
    vec![(-2.0, 2.0), (-5.0, 5.0)]
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let pr = e(builtin("paper-example"))?;
    let j = e(sup_trace(&pr, &paper_box(), 101, DEFAULT_TRACE_SAFETY))?;
    let gain = choose_b(j.raw, 0.5, 0.8, DEFAULT_GAIN_SAFETY);
    let elapsed = start.elapsed();
    ensure((j.grid_max - 4.0).abs() <= 0.01, format!("grid sup {} not 4 +- 0.01", j.grid_max))?;
    ensure(gain.threshold == 10.0, format!("threshold {} is not exactly 10", gain.threshold))?;
    within(elapsed, 1.0)?;
    Ok(format!(
        "J grid = {}, refined = {}, inflated = {}, threshold = {}, b = {}, {:.3}s",
        j.grid_max,
        j.raw,
        j.inflated,
        gain.threshold,
        gain.b,
        elapsed.as_secs_f64()
    ))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let pr = e(builtin("paper-example"))?;
    let (dt, t_end, paths) = (1e-4, 1.0, 1000);
    let mut cfg = BoundedConfig::new(0.5, 0.8, paper_box());
    cfg.b = Some(11.0);
    let (gain, _) = e(resolve_gain(&pr, &cfg))?;
    let sys = e(BoundedSystem::new(&pr, gain.b))?;
    let steps = steps_for(t_end, dt);
    let mut acc = StatsAccumulator::new(steps + 1, pr.p, 0.5);
    e(stream_paths(
        paths,
        2024,
        |seed| {
            let inc = wiener_increments(seed, steps, pr.d, dt);
            solve_bounded_with(&pr, &sys, dt, t_end, &inc, seed, BoundedMode::NewtonPerStep)
        },
        |_, sol| {
            acc.push(&sol.lambda, sol.path.status);
            Ok(())
        },
    ))?;
    let rep = e(acc.finish(dt, Some((4.0, 11.0))))?;
    let elapsed = start.elapsed();
    let max_p = rep.max_p();
    ensure(max_p <= 0.8, format!("empirical violation probability reaches {max_p}"))?;
    let bad = rep.bound_violations(3.0);
    if let Some(&first) = bad.first() {
        return Err(format!("mean square above the bound + 3 SE at {} times, first t = {}", bad.len(), rep.t_grid[first]));
    }
    within(elapsed, 60.0)?;
    let worst_ratio = (1..rep.t_grid.len())
        .map(|k| rep.mean_sq_lambda[k] / rep.bound_curve.as_ref().unwrap()[k])
        .fold(0.0, f64::max);
    Ok(format!(
        "{} completed / {} truncated, max P = {max_p}, max E|l|^2 / bound = {worst_ratio:.3}, {:.1}s",
        rep.completed,
        rep.truncated,
        elapsed.as_secs_f64()
    ))
}

fn criterion_3() -> Outcome {
    let pr = e(builtin("paper-example"))?;
    let eps = 0.25;
    let red = e(UnitProbReduction::new(&pr, &CharacteristicSpec::worked_example(eps)))?;
    let sb = red.symbolic_b.clone().ok_or("no symbolic B")?;
    let mut rng = UniformSampler::new(31);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let u = rng.in_range(-3.0, 3.0);
        let x = [rng.in_range(-0.5, 0.5), rng.in_range(-5.0, 5.0)];
        let b = Bindings::from_state(&x, &[u]);
        let want = -0.8 * PI * (1.0 + u * u) / eps;
        worst = worst.max((e(sb[0][0].evaluate(&b))? - want).abs());
        worst = worst.max(e(sb[0][1].evaluate(&b))?.abs());
    }
    ensure(worst <= 1e-12, format!("max deviation {worst:e}"))?;
    Ok(format!("max |B - closed-form B| = {worst:.2e} over 100 random u"))
}

/// Sup over the common alive horizon of `|g(x_k) - g(y(0,u_k))|`, the
/// discrete defect of the frozen-constraint construction.
fn tracking_defect(pr: &SdaeProblem, spec: &CharacteristicSpec, path: &SamplePath, stride: usize, upto: usize) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for k in (0..=upto * stride).step_by(stride) {
        let s = path.state(k);
        let g = e(pr.constraint_at(&s[..pr.n], &s[pr.n..]))?;
        let z = e(spec.z0(pr, &s[pr.n..]))?;
        let d = g.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(d);
    }
    Ok(worst)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let pr = e(builtin("paper-example"))?;
    let eps = 0.25;
    let spec = CharacteristicSpec::worked_example(eps);
    let red = e(build_unit_prob_sde(&pr, &spec))?;
    let u0 = e(consistent_init(&spec, &pr, &pr.u0))?;
    let (dt, t_end) = (1e-5, 0.5);
    let fine_steps = steps_for(t_end, dt / 2.0);
    let (mut completed, mut truncated, mut worst_fraction) = (0, 0, 1.0f64);
    let (mut coarse_defect, mut fine_defect) = (Vec::new(), Vec::new());
    for seed in 0..20u64 {
        // the coarse path sees the pairwise sums of the fine increments
        let fine = wiener_increments(seed, fine_steps, pr.d, dt / 2.0);
        let coarse: Vec<f64> = (0..fine_steps / 2)
            .flat_map(|k| (0..pr.d).map(move |j| (k, j)))
            .map(|(k, j)| fine[2 * k * pr.d + j] + fine[(2 * k + 1) * pr.d + j])
            .collect();
        let a = e(solve_unit_prob_with(&red, &u0, dt, t_end, &coarse, seed))?;
        let b = e(solve_unit_prob_with(&red, &u0, dt / 2.0, t_end, &fine, seed))?;
        for sol in [&a, &b] {
            if sol.path.status.is_completed() {
                completed += 1;
            } else {
                truncated += 1;
            }
        }
        // every step a path is alive counts, completed or not
        let inside = (0..a.path.len())
            .filter(|&k| {
                let s = a.path.state(k);
                pr.constraint_at(&s[..2], &s[2..]).map(|g| g[0].abs() < eps + 0.05).unwrap_or(false)
            })
            .count();
        worst_fraction = worst_fraction.min(inside as f64 / a.path.len() as f64);
        let common = (a.path.len() - 1).min((b.path.len() - 1) / 2);
        coarse_defect.push(tracking_defect(&pr, &spec, &a.path, 1, common)?);
        fine_defect.push(tracking_defect(&pr, &spec, &b.path, 2, common)?);
    }
    let elapsed = start.elapsed();
    let (mc, mf) = (median(coarse_defect), median(fine_defect));
    ensure(worst_fraction >= 0.99, format!("a path keeps |g| < 0.3 on only {:.4} of its steps", worst_fraction))?;
    ensure(mf < mc, format!("defect does not shrink: {mc:e} at dt, {mf:e} at dt/2"))?;
    within(elapsed, 120.0)?;
    Ok(format!(
        "min fraction of alive steps with |g| < 0.3 = {worst_fraction:.4}; median defect {mc:.3e} -> {mf:.3e} at dt/2; \
         {completed} completed, {truncated} truncated by the singularity guard; {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn index1_problems() -> Result<Vec<SdaeProblem>, String> {
    let nonlinear = e(SdaeProblem::from_text(
        "nonlinear",
        &["-x1 + u2", "sin(u1)"],
        &[&["0.3", "0.1*x2"], &["0.2*u1", "0"]],
        &["u1 + 0.2*u1^3 - x1*x2", "exp(0.3*u2) - 1 + x1*u1"],
        &[&["0.1", "0"], &["0", "0.05*x1"]],
        &[0.0, 0.0],
        &[0.0, 0.0],
        (2, 2, 2, 2),
    ))?;
    let scalar = e(SdaeProblem::from_text(
        "scalar",
        &["x1*u1 - x1^3"],
        &[&["0.4*cos(u1)"]],
        &["u1 + 0.1*sin(u1) - x1^2"],
        &[&["0.05*u1"]],
        &[0.0],
        &[0.0],
        (1, 1, 1, 1),
    ))?;
    let mut out = vec![e(builtin("linear-index1"))?, nonlinear, scalar];
    let rep = e(compute_index(&e(builtin("index2-demo"))?, MAX_STEPS))?;
    out.push(rep.reduced_problem().ok_or("index2-demo has no reduced problem")?);
    out.push(e(sdae::bounded::build_bounded_constraint(&e(builtin("paper-example"))?, 11.0))?);
    Ok(out)
}

fn criterion_5() -> Outcome {
    let pr = e(builtin("linear-index1"))?;
    let sol = e(solve_index1(&pr, 1e-3, 1.0, 5))?;
    let mut gap = 0.0f64;
    for k in 0..sol.path.len() {
        let s = sol.path.state(k);
        gap = gap.max((s[1] - s[0]).abs());
    }
    ensure(sol.path.status.is_completed(), format!("path stopped: {}", sol.path.status))?;
    ensure(gap <= 1e-12, format!("max |u - x| = {gap:e}"))?;
    let mut worst = 0.0f64;
    let problems = index1_problems()?;
    for pr in &problems {
        let red = e(Index1Reduction::new(pr))?;
        let mut rng = UniformSampler::new(55);
        let mut checked = 0;
        let mut tries = 0;
        while checked < 100 {
            tries += 1;
            ensure(tries < 10_000, format!("{}: too many singular samples", pr.name))?;
            let state: Vec<f64> = (0..pr.n + pr.m).map(|_| rng.in_range(-0.6, 0.6)).collect();
            let (Ok(diff), Ok(drift)) = (red.diffusion_identity(&state), red.drift_identity(&state)) else { continue };
            worst = worst.max(diff.max_abs());
            worst = worst.max(drift.iter().fold(0.0f64, |a, v| a.max(v.abs())));
            checked += 1;
        }
    }
    ensure(worst <= 1e-10, format!("identity residual {worst:e}"))?;
    Ok(format!("max |u - x| = {gap:.1e}; identity residual {worst:.2e} over {} problems x 100 points", problems.len()))
}

fn criterion_6() -> Outcome {
    let mut detail = Vec::new();
    for name in ["paper-example", "cooling"] {
        let c = classify(&e(builtin(name))?);
        ensure(c.ill_posed == Verdict::IllPosed, format!("{name}: {c}"))?;
        detail.push(format!("{name}: {c}"));
    }
    let mut quiet = e(builtin("paper-example"))?;
    quiet.diffusion = vec![vec![Expr::zero(); quiet.d]; quiet.n];
    let rep = e(is_ill_posed(&quiet, &paper_box(), 21, DEFAULT_TOL))?;
    ensure(rep.verdict == Verdict::NotIllPosedAtSamples, format!("zero-noise variant: {:?}", rep.verdict))?;
    detail.push(format!("zero-noise variant: {:?}", rep.verdict));
    Ok(detail.join("; "))
}

fn criterion_7() -> Outcome {
    let rep = e(compute_index(&e(builtin("index2-demo"))?, MAX_STEPS))?;
    ensure(rep.outcome == IndexOutcome::Index(2), format!("index2-demo: {}", rep.outcome))?;
    ensure(rep.dimension_law_holds, "index2-demo: dimension law fails")?;
    let pe = e(compute_index(&e(builtin("paper-example"))?, MAX_STEPS))?;
    let IndexOutcome::ExceededLimit { diagnosis, .. } = &pe.outcome else {
        return Err(format!("paper-example: {}", pe.outcome));
    };
    ensure(diagnosis.contains("m = 1 but p(1+d)^1 = 3"), format!("diagnosis: {diagnosis}"))?;
    Ok(format!("index2-demo: index 2, m = p(1+d) holds; paper-example: {}", pe.outcome))
}

fn criterion_8() -> Outcome {
    let cfg = ContractionConfig::default();
    let hand = e(SdaeProblem::from_text("hand", &["x1"], &[&["0.1"]], &["0.25*x1 + 0.5*u1"], &[&["0"]], &[0.2], &[-0.1], (1, 1, 1, 1)))?;
    let rep = e(check_contraction(&hand, &[(-1.0, 1.0), (-1.0, 1.0)], &cfg))?;
    ensure((rep.m_sup - 0.5590).abs() <= 1e-3, format!("hand example M = {}", rep.m_sup))?;
    let mut high = Vec::new();
    for name in BUILTINS {
        let pr = e(builtin(name))?;
        if !pr.is_high_index() {
            continue;
        }
        let bx: Vec<(f64, f64)> = pr.x0.iter().chain(&pr.u0).map(|&c| (c - 1.0, c + 1.0)).collect();
        let r = e(check_contraction(&pr, &bx, &cfg))?;
        ensure(r.m_sup >= 1.0, format!("{name}: M = {}", r.m_sup))?;
        high.push(format!("{name} M = {:.3}", r.m_sup));
    }
    // projection example: u tracks x exactly, so the map's fixed point is the EM path
    let pr = e(SdaeProblem::from_text("projection", &["-x1"], &[&["0.1"]], &["u1"], &[&["0"]], &[1.0], &[0.0], (1, 1, 1, 1)))?;
    let dt = 1e-3;
    let inc = wiener_increments(8, 1000, 1, dt);
    let sol = e(picard_solve_with(&pr, dt, 1.0, &inc, 8, &PicardOptions { iterations: 10, tol: 1e-12, region: None }))?;
    let sde = e(AugmentedSde::from_exprs(
        "direct",
        sdae::expr::VarLayout::new(1, 0),
        &[e(sdae::expr::parse("-x1"))?],
        &[vec![e(sdae::expr::parse("0.1"))?]],
    ))?;
    let direct = e(euler_maruyama(&sde, &[1.0], dt, 1.0, &inc, 8))?;
    let mut gap = 0.0f64;
    for k in 0..direct.len() {
        gap = gap.max((sol.path.state(k)[0] - direct.state(k)[0]).abs());
    }
    ensure(gap <= 1e-10, format!("Picard vs EM gap {gap:e}"))?;
    Ok(format!("hand M = {:.4}; {}; Picard vs EM {gap:.1e} after {} iterations", rep.m_sup, high.join(", "), sol.iterations))
}

fn all_exprs(pr: &SdaeProblem) -> Vec<Expr> {
    pr.drift
        .iter()
        .chain(pr.diffusion.iter().flatten())
        .chain(&pr.constraint)
        .chain(pr.constraint_noise.iter().flatten())
        .cloned()
        .collect()
}

fn criterion_9() -> Outcome {
    // symbolic vs central differences
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut rng = UniformSampler::new(99);
    for name in BUILTINS {
        let pr = e(builtin(name))?;
        let vars = pr.layout().vars();
        for ex in all_exprs(&pr) {
            for _ in 0..20 {
                let x: Vec<f64> = (0..pr.n).map(|_| rng.in_range(-1.0, 1.0)).collect();
                let u: Vec<f64> = (0..pr.m).map(|_| rng.in_range(-1.0, 1.0)).collect();
                let b = Bindings::from_state(&x, &u);
                for v in &vars {
                    let sym = e(ex.differentiate(*v).evaluate(&b))?;
                    let fd = e(ex.central_difference(*v, &b, 1e-5))?;
                    worst = worst.max((sym - fd).abs() / sym.abs().max(1.0));
                    count += 1;
                }
            }
        }
    }
    ensure(worst <= 1e-6, format!("derivative mismatch {worst:e}"))?;

    // replay from the manifest
    let dir = e(tempfile::tempdir())?;
    let out = dir.path().join("run");
    let args = [
        "solve", "paper-example", "--method", "bounded", "--epsilon", "0.5", "--alpha", "0.8", "--box", "-2:2,-5:5",
        "--dt", "1e-3", "--t-end", "0.5", "--paths", "8", "--seed", "42", "--out",
    ];
    let mut argv: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    argv.push(out.display().to_string());
    ensure(sdae::cli::run(argv) == 0, "solve failed")?;
    let replay = vec!["replay".to_string(), out.display().to_string(), "--out".into(), dir.path().join("again").display().to_string()];
    ensure(sdae::cli::run(replay) == 0, "replay did not reproduce the outputs")?;

    // EM on dx = -x dt: error ~ dt
    let sde = e(AugmentedSde::from_exprs(
        "decay",
        sdae::expr::VarLayout::new(1, 0),
        &[e(sdae::expr::parse("-x1"))?],
        &[vec![Expr::zero()]],
    ))?;
    let dts = [0.02, 0.01, 0.005, 0.0025, 0.00125];
    let mut pts = Vec::new();
    for dt in dts {
        let steps = steps_for(1.0, dt);
        let path = e(euler_maruyama(&sde, &[1.0], dt, 1.0, &vec![0.0; steps], 0))?;
        pts.push((dt.ln(), (path.last()[0] - (-1f64).exp()).abs().ln()));
    }
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let order = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    ensure((order - 1.0).abs() <= 0.2, format!("observed order {order}"))?;
    Ok(format!("FD max rel. error {worst:.1e} over {count} checks; replay byte-identical; EM order {order:.3}"))
}

fn main() {
    let criteria: [(&str, Criterion); 9] = [
        ("bounded gain constants", criterion_1),
        ("bounded violation and mean-square bound", criterion_2),
        ("unit-prob B formula", criterion_3),
        ("unit-prob constraint band", criterion_4),
        ("index-1 reduction exactness", criterion_5),
        ("ill-posedness", criterion_6),
        ("index machinery", criterion_7),
        ("contraction check", criterion_8),
        ("infrastructure", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
