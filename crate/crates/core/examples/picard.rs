//! Contraction check and Picard iteration on a well-posed index-1 problem,
//! compared with Euler-Maruyama on the reduced SDE.

use sdae::index1::solve_index1;
use sdae::picard::{check_contraction, picard_solve, ContractionConfig};
use sdae::problem::SdaeProblem;

fn main() -> sdae::Result<()> {
    // u solves 0.25 x + 0.5 u = 0; the Picard map contracts on the unit box
    let pr = SdaeProblem::from_text("hand", &["x1"], &[&["0.1"]], &["0.25*x1 + 0.5*u1"], &[&["0"]], &[0.2], &[-0.1], (1, 1, 1, 1))?;
    let rep = check_contraction(&pr, &[(-1.0, 1.0), (-1.0, 1.0)], &ContractionConfig::default())?;
    println!("M = {:.4}, horizon = {:.4}, satisfied = {}", rep.m_sup, rep.horizon, rep.satisfied);
    for note in &rep.notes {
        println!("  note: {note}");
    }

    let (dt, t_end, seed) = (1e-3, 1.0, 11);
    let pic = picard_solve(&pr, dt, t_end, 50, seed, 1e-12)?;
    println!("picard: {} iterations, last change {:.2e}", pic.iterations, pic.deltas.last().copied().unwrap_or(0.0));
    let em = solve_index1(&pr, dt, t_end, seed)?;
    let gap = (0..pic.path.len())
        .map(|k| (pic.path.state(k)[0] - em.path.state(k)[0]).abs())
        .fold(0.0, f64::max);
    println!("sup |x_picard - x_em| = {gap:.2e}");
    Ok(())
}
