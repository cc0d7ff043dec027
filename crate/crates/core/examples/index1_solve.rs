//! Solves an index-1 problem through its reduced SDE and checks the
//! constraint stays satisfied along the path.

use sdae::index1::{checked_reduction, solve_index1};
use sdae::problem::builtin;

fn main() -> sdae::Result<()> {
    let pr = builtin("linear-index1")?;
    let red = checked_reduction(&pr)?;
    let state = [pr.x0.clone(), pr.u0.clone()].concat();
    let pt = red.at(&state, &mut Vec::new())?;
    println!("reduced drift a = {:?}, diffusion b = {:?}, det D_u g = {}", pt.a, pt.b.as_slice(), pt.det);

    let sol = solve_index1(&pr, 1e-3, 1.0, 7)?;
    println!("status {}, {} grid points", sol.path.status, sol.path.len());
    println!("max |g(x, u)| along the path = {:.2e}", sol.max_constraint);
    println!("x(1) = {:.6}", sol.path.last()[0]);
    Ok(())
}
