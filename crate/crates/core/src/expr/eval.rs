use std::collections::BTreeMap;

use super::{BinaryOp, Expr, Node, UnaryOp, Var};
use crate::error::{Error, Result};

/// Values for the free variables of an expression. Lookups of unbound
/// variables fail; there are no defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bindings {
    values: BTreeMap<Var, f64>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, var: Var, value: f64) -> Self {
        self.values.insert(var, value);
        self
    }

    pub fn set(&mut self, var: Var, value: f64) {
        self.values.insert(var, value);
    }

    pub fn get(&self, var: Var) -> Option<f64> {
        self.values.get(&var).copied()
    }

    /// Binds `x1..xn` to `x` and `u1..um` to `u`.
    pub fn from_state(x: &[f64], u: &[f64]) -> Self {
        let mut b = Bindings::new();
        for (i, v) in x.iter().enumerate() {
            b.set(Var::X(i + 1), *v);
        }
        for (i, v) in u.iter().enumerate() {
            b.set(Var::U(i + 1), *v);
        }
        b
    }
}

/// `a^b` with the domain rule for negative bases: the exponent must be an
/// integer. Integer exponents go through `powi` so that small powers are exact.
pub(crate) fn pow_value(a: f64, b: f64) -> Option<f64> {
    if a == 0.0 && b < 0.0 {
        return None;
    }
    if b.fract() == 0.0 && b.abs() <= i32::MAX as f64 {
        return Some(a.powi(b as i32));
    }
    if a < 0.0 {
        return None;
    }
    Some(a.powf(b))
}

fn apply_unary(op: UnaryOp, a: f64) -> std::result::Result<f64, &'static str> {
    Ok(match op {
        UnaryOp::Neg => -a,
        UnaryOp::Sin => a.sin(),
        UnaryOp::Cos => a.cos(),
        UnaryOp::Tan => a.tan(),
        UnaryOp::Atan => a.atan(),
        UnaryOp::Exp => a.exp(),
        UnaryOp::Log => {
            if a <= 0.0 {
                return Err("logarithm of a non-positive number");
            }
            a.ln()
        }
        UnaryOp::Sqrt => {
            if a < 0.0 {
                return Err("square root of a negative number");
            }
            a.sqrt()
        }
    })
}

fn apply_binary(op: BinaryOp, a: f64, b: f64) -> std::result::Result<f64, &'static str> {
    Ok(match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
        BinaryOp::Div => {
            if b == 0.0 {
                return Err("division by zero");
            }
            a / b
        }
        BinaryOp::Pow => {
            pow_value(a, b).ok_or("negative base raised to a non-integer power")?
        }
    })
}

impl Expr {
    /// Evaluates with explicit bindings. Slow path; integrators use
    /// [`Compiled`].
    pub fn evaluate(&self, b: &Bindings) -> Result<f64> {
        match self.node() {
            Node::Const(c) => Ok(*c),
            Node::Var(v) => b.get(*v).ok_or_else(|| Error::MissingBinding(v.to_string())),
            Node::Unary(op, a) => {
                let x = a.evaluate(b)?;
                apply_unary(*op, x).map_err(|m| domain(self, m, &[x]))
            }
            Node::Binary(op, l, r) => {
                let x = l.evaluate(b)?;
                let y = r.evaluate(b)?;
                apply_binary(*op, x, y).map_err(|m| domain(self, m, &[x, y]))
            }
        }
    }

    /// Central finite difference of `var` at `b`, step `h`.
    pub fn central_difference(&self, var: Var, b: &Bindings, h: f64) -> Result<f64> {
        let at = b.get(var).ok_or_else(|| Error::MissingBinding(var.to_string()))?;
        let plus = self.evaluate(&b.clone().with(var, at + h))?;
        let minus = self.evaluate(&b.clone().with(var, at - h))?;
        Ok((plus - minus) / (2.0 * h))
    }
}

fn domain(node: &Expr, message: &str, operands: &[f64]) -> Error {
    let ops: Vec<String> = operands.iter().map(|v| format!("{v:e}")).collect();
    Error::Domain { node: node.to_string(), message: format!("{message} (operands {})", ops.join(", ")) }
}

/// Slot assignment for the variables of a problem: `x1..xn` occupy slots
/// `0..n`, `u1..um` occupy `n..n+m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarLayout {
    pub n: usize,
    pub m: usize,
}

impl VarLayout {
    pub fn new(n: usize, m: usize) -> Self {
        Self { n, m }
    }

    pub fn len(&self) -> usize {
        self.n + self.m
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slot(&self, v: Var) -> Option<usize> {
        match v {
            Var::X(k) if (1..=self.n).contains(&k) => Some(k - 1),
            Var::U(k) if (1..=self.m).contains(&k) => Some(self.n + k - 1),
            _ => None,
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        (1..=self.n).map(Var::X).chain((1..=self.m).map(Var::U)).collect()
    }

    pub fn x_vars(&self) -> Vec<Var> {
        (1..=self.n).map(Var::X).collect()
    }

    pub fn u_vars(&self) -> Vec<Var> {
        (1..=self.m).map(Var::U).collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum Instr {
    Const(f64),
    Load(usize),
    Unary(UnaryOp),
    Binary(BinaryOp),
}

/// Expression flattened to postfix form over a slot array. Immutable;
/// evaluation uses a caller-owned stack so one instance can serve many
/// threads.
#[derive(Debug, Clone)]
pub struct Compiled {
    code: Vec<Instr>,
    source: Expr,
    constant: Option<f64>,
}

impl Compiled {
    pub fn new(e: &Expr, layout: VarLayout) -> Result<Compiled> {
        let mut code = Vec::new();
        emit(e, layout, &mut code)?;
        Ok(Compiled { code, source: e.clone(), constant: e.as_const() })
    }

    pub fn source(&self) -> &Expr {
        &self.source
    }

    /// Evaluates at `slots` (laid out by the [`VarLayout`] used to compile).
    pub fn eval(&self, slots: &[f64], stack: &mut Vec<f64>) -> Result<f64> {
        if let Some(c) = self.constant {
            return Ok(c);
        }
        stack.clear();
        for instr in &self.code {
            match *instr {
                Instr::Const(c) => stack.push(c),
                Instr::Load(i) => stack.push(slots[i]),
                Instr::Unary(op) => {
                    let a = stack.pop().expect("compiled stack underflow");
                    match apply_unary(op, a) {
                        Ok(v) => stack.push(v),
                        Err(m) => return Err(self.domain_error(m)),
                    }
                }
                Instr::Binary(op) => {
                    let b = stack.pop().expect("compiled stack underflow");
                    let a = stack.pop().expect("compiled stack underflow");
                    match apply_binary(op, a, b) {
                        Ok(v) => stack.push(v),
                        Err(m) => return Err(self.domain_error(m)),
                    }
                }
            }
        }
        Ok(stack.pop().expect("empty compiled program"))
    }

    #[cold]
    fn domain_error(&self, message: &str) -> Error {
        Error::Domain { node: self.source.to_string(), message: message.to_string() }
    }
}

fn emit(e: &Expr, layout: VarLayout, code: &mut Vec<Instr>) -> Result<()> {
    match e.node() {
        Node::Const(c) => code.push(Instr::Const(*c)),
        Node::Var(v) => {
            let slot = layout.slot(*v).ok_or_else(|| Error::UnknownVariable(v.to_string()))?;
            code.push(Instr::Load(slot));
        }
        Node::Unary(op, a) => {
            emit(a, layout, code)?;
            code.push(Instr::Unary(*op));
        }
        Node::Binary(op, a, b) => {
            emit(a, layout, code)?;
            emit(b, layout, code)?;
            code.push(Instr::Binary(*op));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::parse;
    use super::*;

    #[test]
    fn worked_example_constraint_vanishes_at_origin() {
        let g = parse("2*x1 - x1^3 - 0.5*sin(4*x2)").unwrap();
        let b = Bindings::from_state(&[0.0, 0.0], &[]);
        assert_eq!(g.evaluate(&b).unwrap(), 0.0);
    }

    #[test]
    fn direct_arithmetic() {
        let b = Bindings::new().with(Var::X(1), -2.0);
        assert_eq!(parse("2 - 3*x1^2").unwrap().evaluate(&b).unwrap(), -10.0);
        let b = Bindings::new().with(Var::X(1), 1.0);
        assert_eq!(parse("1/(2 - 3*x1^2)").unwrap().evaluate(&b).unwrap(), -1.0);
    }

    #[test]
    fn missing_binding_is_an_error() {
        let e = parse("x1 + u1").unwrap();
        let b = Bindings::new().with(Var::X(1), 1.0);
        assert_eq!(e.evaluate(&b), Err(Error::MissingBinding("u1".into())));
    }

    #[test]
    fn domain_errors_name_the_node() {
        let b = Bindings::new().with(Var::X(1), -1.0);
        match parse("1 + log(x1)").unwrap().evaluate(&b) {
            Err(Error::Domain { node, .. }) => assert_eq!(node, "log(x1)"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse("x1^0.5").unwrap().evaluate(&b), Err(Error::Domain { .. })));
        assert_eq!(parse("x1^3").unwrap().evaluate(&b).unwrap(), -1.0);
        assert!(matches!(parse("1/(x1 + 1)").unwrap().evaluate(&b), Err(Error::Domain { .. })));
    }

    #[test]
    fn compiled_matches_tree() {
        let e = parse("x1*u2 - sin(u1)/exp(x2) + atan(x1)^2").unwrap();
        let layout = VarLayout::new(2, 2);
        let c = Compiled::new(&e, layout).unwrap();
        let slots = [0.3, -1.2, 0.7, 2.5];
        let b = Bindings::from_state(&slots[..2], &slots[2..]);
        let mut stack = Vec::new();
        assert_eq!(c.eval(&slots, &mut stack).unwrap(), e.evaluate(&b).unwrap());
    }

    #[test]
    fn compile_rejects_out_of_range_variables() {
        let e = parse("x3").unwrap();
        assert!(matches!(
            Compiled::new(&e, VarLayout::new(2, 0)),
            Err(Error::UnknownVariable(_))
        ));
    }
}
