//! Probabilistically bounded constraint: pick the gain, simulate one path per
//! mode and compare the constraint value.

use sdae::bounded::{resolve_gain, solve_bounded, BoundedConfig, BoundedMode};
use sdae::problem::builtin;

fn main() -> sdae::Result<()> {
    let pr = builtin("paper-example")?;
    let cfg = BoundedConfig::new(0.5, 0.8, vec![(-2.0, 2.0), (-5.0, 5.0)]);
    let (gain, j) = resolve_gain(&pr, &cfg)?;
    println!("J = {} (inflated {:.3}), threshold = {}, b = {}", j.raw, j.inflated, gain.threshold, gain.b);

    for mode in [BoundedMode::NewtonPerStep, BoundedMode::Lemma1Reduction] {
        let sol = solve_bounded(&pr, &cfg, 1e-4, 1.0, 42, mode)?;
        let sup = sol.lambda.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        println!("{mode:?}: {}, sup |lambda| = {sup:.4}, guard trips = {}", sol.path.status, sol.guard_trips());
    }
    Ok(())
}
