//! Repeated differentiation of the constraint until it becomes index-1.

use sdae::problem::builtin;
use sdae::reduction::{compute_index, MAX_STEPS};

fn main() -> sdae::Result<()> {
    for name in ["index2-demo", "paper-example"] {
        let rep = compute_index(&builtin(name)?, MAX_STEPS)?;
        println!("{name}: {}", rep.outcome);
        for (k, step) in rep.steps.iter().enumerate() {
            let rows: Vec<String> = step.h().iter().map(ToString::to_string).collect();
            println!("  step {}: h = [{}]", k + 1, rows.join(", "));
        }
        println!("  dimension law holds: {}", rep.dimension_law_holds);
        if let Some(u0) = &rep.consistent_u0 {
            println!("  consistent u0 = {u0:?}");
        }
    }
    Ok(())
}
