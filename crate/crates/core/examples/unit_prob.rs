//! Unit-probability enforcement on the `paper-example` builtin with the worked
//! characteristic map.

use sdae::problem::builtin;
use sdae::unit_prob::{build_unit_prob_sde, consistent_init, solve_unit_prob, CharacteristicSpec};

fn main() -> sdae::Result<()> {
    let pr = builtin("paper-example")?;
    let eps = 0.25;
    let spec = CharacteristicSpec::worked_example(eps);
    let red = build_unit_prob_sde(&pr, &spec)?;
    let u0 = consistent_init(&spec, &pr, &pr.u0)?;
    let start = [pr.x0.clone(), u0.clone()].concat();
    let pt = red.at(&start, &mut Vec::new())?;
    println!("u0 = {u0:?}");
    println!("B = {:?}, Lambda = {:?}, a = {:?}", pt.b.as_slice(), pt.lambda.as_slice(), pt.a);

    for seed in 0..5 {
        let sol = solve_unit_prob(&pr, &spec, 1e-5, 0.5, seed)?;
        println!(
            "seed {seed}: {} after {} steps, sup |g| = {:.3}, fraction inside = {:.3}",
            sol.path.status,
            sol.path.len() - 1,
            sol.sup_g,
            sol.fraction_within
        );
        for w in &sol.warnings {
            println!("  warning: {w}");
        }
    }
    Ok(())
}
