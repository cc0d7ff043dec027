//! Ensemble statistics of the bounded constraint against its mean-square
//! bound, written as CSV to stdout.

use sdae::bounded::{resolve_gain, solve_bounded_with, BoundedConfig, BoundedMode, BoundedSystem};
use sdae::integrator::steps_for;
use sdae::montecarlo::{simulate_paths, violation_stats_with_bound, Ensemble};
use sdae::problem::builtin;
use sdae::rng::wiener_increments;

fn main() -> sdae::Result<()> {
    let pr = builtin("paper-example")?;
    let cfg = BoundedConfig::new(0.5, 0.8, vec![(-2.0, 2.0), (-5.0, 5.0)]);
    let (gain, j) = resolve_gain(&pr, &cfg)?;
    let sys = BoundedSystem::new(&pr, gain.b)?;
    let (dt, t_end, base_seed) = (1e-3, 1.0, 42);
    let paths = simulate_paths(200, base_seed, |seed| {
        let inc = wiener_increments(seed, steps_for(t_end, dt), pr.d, dt);
        Ok(solve_bounded_with(&pr, &sys, dt, t_end, &inc, seed, BoundedMode::NewtonPerStep)?.path)
    })?;
    let ens = Ensemble { base_seed, paths };
    let rep = violation_stats_with_bound(&pr, &ens, cfg.epsilon, Some((j.raw, gain.b)))?;
    eprintln!("{} completed, max P(|lambda| > eps) = {}, bound violations: {}", rep.completed, rep.max_p(), rep.bound_violations(3.0).len());
    rep.write_csv(&mut std::io::stdout().lock())?;
    Ok(())
}
