//! Parsing, symbolic differentiation and evaluation of coefficient expressions.

use sdae::expr::{parse, Bindings, Var};

fn main() -> sdae::Result<()> {
    let g = parse("2*x1 - x1^3 - 0.5*sin(4*x2)")?;
    let at = Bindings::from_state(&[0.3, 0.1], &[]);
    println!("g        = {g}");
    for v in [Var::X(1), Var::X(2)] {
        let d = g.differentiate(v).simplify();
        println!("dg/d{v}   = {d}");
        println!("  symbolic {:.12}  central difference {:.12}", d.evaluate(&at)?, g.central_difference(v, &at, 1e-6)?);
    }
    Ok(())
}
