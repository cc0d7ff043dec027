//! Classifies every builtin problem and prints the emitted problem file of one.

use sdae::problem::{builtin, classify, BUILTINS};

fn main() -> sdae::Result<()> {
    for name in BUILTINS {
        let pr = builtin(name)?;
        println!("{name:>14}: {}", classify(&pr));
    }
    println!("\n{}", builtin("linear-index1")?.to_file_string());
    Ok(())
}
