//! Tangency test for ill-posedness, and the suspension that moves constraint
//! noise into the state.

use sdae::expr::Expr;
use sdae::problem::builtin;
use sdae::wellposed::{is_ill_posed, suspend, DEFAULT_TOL};

fn main() -> sdae::Result<()> {
    let pr = builtin("paper-example")?;
    let bx = [(-2.0, 2.0), (-5.0, 5.0)];
    let rep = is_ill_posed(&pr, &bx, 21, DEFAULT_TOL)?;
    println!("paper-example: {:?}, max residual {:.3} at {:?}", rep.verdict, rep.max_residual_norm, rep.worst_point);

    let mut quiet = pr.clone();
    quiet.diffusion = vec![vec![Expr::zero(); quiet.d]; quiet.n];
    println!("without state noise: {:?}", is_ill_posed(&quiet, &bx, 21, DEFAULT_TOL)?.verdict);

    let noisy = builtin("cooling")?;
    let s = suspend(&noisy);
    println!("\n{} suspended to n = {}:", noisy.name, s.n);
    for g in &s.constraint {
        println!("  0 = {g}");
    }
    Ok(())
}
