//! Scalar expression language used to write every coefficient function of a
//! problem: drift, diffusion, constraint, constraint noise and the
//! characteristic map of the unit-probability method.
//!
//! Expressions are immutable trees with shared children, so a derivative can
//! reuse subtrees of its source without copying. All constructors in this
//! module go through a conservative simplifier: constants are folded,
//! additive and multiplicative identities are dropped and numeric factors of
//! a product are gathered on the left. Nothing else is rewritten.
//!
//! ```
//! use sdae::expr::{parse, Var};
//!
//! let g = parse("2*x1 - x1^3 - 0.5*sin(4*x2)").unwrap();
//! let dg = g.differentiate(Var::X(1));
//! assert_eq!(dg.to_string(), "2 - 3*x1^2");
//! ```

mod diff;
mod eval;
mod parse;

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

pub use eval::{Bindings, Compiled, VarLayout};
pub use parse::parse;

/// A free variable: state `x<k>`, algebraic `u<k>` (1-based), or time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Var {
    X(usize),
    U(usize),
    T,
}

impl Var {
    /// Parses `x3`, `u1` or `t`. Indices start at 1.
    pub fn from_name(name: &str) -> Option<Var> {
        if name == "t" {
            return Some(Var::T);
        }
        let (head, digits) = name.split_at(1.min(name.len()));
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
            return None;
        }
        let k: usize = digits.parse().ok()?;
        match head {
            "x" => Some(Var::X(k)),
            "u" => Some(Var::U(k)),
            _ => None,
        }
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::X(k) => write!(f, "x{k}"),
            Var::U(k) => write!(f, "u{k}"),
            Var::T => f.write_str("t"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Tan,
    Atan,
    Exp,
    Log,
    Sqrt,
}

impl UnaryOp {
    pub fn from_function_name(name: &str) -> Option<UnaryOp> {
        Some(match name {
            "sin" => UnaryOp::Sin,
            "cos" => UnaryOp::Cos,
            "tan" => UnaryOp::Tan,
            "atan" => UnaryOp::Atan,
            "exp" => UnaryOp::Exp,
            "log" => UnaryOp::Log,
            "sqrt" => UnaryOp::Sqrt,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "-",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Tan => "tan",
            UnaryOp::Atan => "atan",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sqrt => "sqrt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinaryOp {
    fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => " + ",
            BinaryOp::Sub => " - ",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Pow => "^",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinaryOp::Add | BinaryOp::Sub => 1,
            BinaryOp::Mul | BinaryOp::Div => 2,
            BinaryOp::Pow => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Var(Var),
    Unary(UnaryOp, Expr),
    Binary(BinaryOp, Expr, Expr),
}

/// Immutable expression tree. Cloning is cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr(Arc<Node>);

impl Expr {
    pub fn node(&self) -> &Node {
        &self.0
    }

    /// Builds a node exactly as given, with no simplification. The parser
    /// uses this so that its output mirrors the source text.
    pub fn raw(node: Node) -> Expr {
        Expr(Arc::new(node))
    }

    pub fn constant(c: f64) -> Expr {
        Expr::raw(Node::Const(c))
    }

    pub fn zero() -> Expr {
        Expr::constant(0.0)
    }

    pub fn one() -> Expr {
        Expr::constant(1.0)
    }

    pub fn var(v: Var) -> Expr {
        Expr::raw(Node::Var(v))
    }

    pub fn as_const(&self) -> Option<f64> {
        match self.node() {
            Node::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    pub fn is_one(&self) -> bool {
        self.as_const() == Some(1.0)
    }

    pub fn unary(op: UnaryOp, a: Expr) -> Expr {
        if let Some(c) = a.as_const() {
            if let Some(v) = fold_unary(op, c) {
                return Expr::constant(v);
            }
        }
        if op == UnaryOp::Neg {
            match a.node() {
                Node::Unary(UnaryOp::Neg, inner) => return inner.clone(),
                // -(c*e) -> (-c)*e keeps the numeric factor in front
                Node::Binary(BinaryOp::Mul, l, r) if l.as_const().is_some() => {
                    return Expr::mul(Expr::constant(-l.as_const().unwrap()), r.clone());
                }
                _ => {}
            }
        }
        Expr::raw(Node::Unary(op, a))
    }

    pub fn neg(a: Expr) -> Expr {
        Expr::unary(UnaryOp::Neg, a)
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        if a.is_zero() {
            return b;
        }
        if b.is_zero() {
            return a;
        }
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            return Expr::constant(x + y);
        }
        Expr::raw(Node::Binary(BinaryOp::Add, a, b))
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        if b.is_zero() {
            return a;
        }
        if a.is_zero() {
            return Expr::neg(b);
        }
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            return Expr::constant(x - y);
        }
        Expr::raw(Node::Binary(BinaryOp::Sub, a, b))
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        if a.is_zero() || b.is_zero() {
            return Expr::zero();
        }
        if a.is_one() {
            return b;
        }
        if b.is_one() {
            return a;
        }
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => return Expr::constant(x * y),
            (None, Some(_)) => return Expr::mul(b, a),
            (Some(x), None) => {
                if x == -1.0 {
                    return Expr::neg(b);
                }
                // c1*(c2*e) -> (c1*c2)*e
                if let Node::Binary(BinaryOp::Mul, l, r) = b.node() {
                    if let Some(y) = l.as_const() {
                        return Expr::mul(Expr::constant(x * y), r.clone());
                    }
                }
                if let Node::Unary(UnaryOp::Neg, inner) = b.node() {
                    return Expr::mul(Expr::constant(-x), inner.clone());
                }
            }
            (None, None) => {
                // (c*e1)*e2 -> c*(e1*e2)
                if let Node::Binary(BinaryOp::Mul, l, r) = a.node() {
                    if let Some(x) = l.as_const() {
                        return Expr::mul(Expr::constant(x), Expr::mul(r.clone(), b));
                    }
                }
                if let Node::Binary(BinaryOp::Mul, l, r) = b.node() {
                    if let Some(y) = l.as_const() {
                        return Expr::mul(Expr::constant(y), Expr::mul(a, r.clone()));
                    }
                }
            }
        }
        Expr::raw(Node::Binary(BinaryOp::Mul, a, b))
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        if b.is_one() {
            return a;
        }
        if a.is_zero() && !b.is_zero() {
            return Expr::zero();
        }
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            if y != 0.0 {
                return Expr::constant(x / y);
            }
        }
        Expr::raw(Node::Binary(BinaryOp::Div, a, b))
    }

    pub fn pow(a: Expr, b: Expr) -> Expr {
        if b.is_zero() {
            return Expr::one();
        }
        if b.is_one() {
            return a;
        }
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            let v = eval::pow_value(x, y);
            if let Some(v) = v.filter(|v| v.is_finite()) {
                return Expr::constant(v);
            }
        }
        Expr::raw(Node::Binary(BinaryOp::Pow, a, b))
    }

    pub fn binary(op: BinaryOp, a: Expr, b: Expr) -> Expr {
        match op {
            BinaryOp::Add => Expr::add(a, b),
            BinaryOp::Sub => Expr::sub(a, b),
            BinaryOp::Mul => Expr::mul(a, b),
            BinaryOp::Div => Expr::div(a, b),
            BinaryOp::Pow => Expr::pow(a, b),
        }
    }

    /// Sum of a list of terms, simplified.
    pub fn sum<I: IntoIterator<Item = Expr>>(terms: I) -> Expr {
        terms.into_iter().fold(Expr::zero(), Expr::add)
    }

    /// Rebuilds the tree bottom-up through the simplifying constructors.
    pub fn simplify(&self) -> Expr {
        match self.node() {
            Node::Const(_) | Node::Var(_) => self.clone(),
            Node::Unary(op, a) => Expr::unary(*op, a.simplify()),
            Node::Binary(op, a, b) => Expr::binary(*op, a.simplify(), b.simplify()),
        }
    }

    /// Every free variable, sorted.
    pub fn free_vars(&self) -> BTreeSet<Var> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<Var>) {
        match self.node() {
            Node::Const(_) => {}
            Node::Var(v) => {
                out.insert(*v);
            }
            Node::Unary(_, a) => a.collect_vars(out),
            Node::Binary(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    pub fn mentions(&self, pred: impl Fn(Var) -> bool + Copy) -> bool {
        match self.node() {
            Node::Const(_) => false,
            Node::Var(v) => pred(*v),
            Node::Unary(_, a) => a.mentions(pred),
            Node::Binary(_, a, b) => a.mentions(pred) || b.mentions(pred),
        }
    }

    pub fn mentions_u(&self) -> bool {
        self.mentions(|v| matches!(v, Var::U(_)))
    }

    /// Replaces variables according to `f`; unmapped variables stay.
    pub fn substitute(&self, f: &impl Fn(Var) -> Option<Expr>) -> Expr {
        match self.node() {
            Node::Const(_) => self.clone(),
            Node::Var(v) => f(*v).unwrap_or_else(|| self.clone()),
            Node::Unary(op, a) => Expr::unary(*op, a.substitute(f)),
            Node::Binary(op, a, b) => Expr::binary(*op, a.substitute(f), b.substitute(f)),
        }
    }

    pub fn node_count(&self) -> usize {
        match self.node() {
            Node::Const(_) | Node::Var(_) => 1,
            Node::Unary(_, a) => 1 + a.node_count(),
            Node::Binary(_, a, b) => 1 + a.node_count() + b.node_count(),
        }
    }

    // printing precedence: 1 additive, 2 multiplicative, 3 negation, 4 power, 5 atom
    fn precedence(&self) -> u8 {
        match self.node() {
            Node::Const(c) if c.is_sign_negative() && *c != 0.0 => 3,
            Node::Const(_) | Node::Var(_) => 5,
            Node::Unary(UnaryOp::Neg, _) => 3,
            Node::Unary(_, _) => 5,
            Node::Binary(op, _, _) => op.precedence(),
        }
    }
}

impl From<f64> for Expr {
    fn from(c: f64) -> Self {
        Expr::constant(c)
    }
}

impl From<Var> for Expr {
    fn from(v: Var) -> Self {
        Expr::var(v)
    }
}

fn fold_unary(op: UnaryOp, c: f64) -> Option<f64> {
    let v = match op {
        UnaryOp::Neg => -c,
        UnaryOp::Sin => c.sin(),
        UnaryOp::Cos => c.cos(),
        UnaryOp::Tan => c.tan(),
        UnaryOp::Atan => c.atan(),
        UnaryOp::Exp => c.exp(),
        UnaryOp::Log if c > 0.0 => c.ln(),
        UnaryOp::Sqrt if c >= 0.0 => c.sqrt(),
        _ => return None,
    };
    v.is_finite().then_some(v)
}

fn fmt_number(c: f64, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    let a = c.abs();
    if a == 0.0 || (1e-5..1e16).contains(&a) {
        write!(f, "{c}")
    } else {
        write!(f, "{c:e}")
    }
}

fn fmt_child(e: &Expr, parens: bool, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    if parens {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

/// Prints text that parses back to an expression with the same value.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node() {
            Node::Const(c) => fmt_number(*c, f),
            Node::Var(v) => write!(f, "{v}"),
            Node::Unary(UnaryOp::Neg, a) => {
                f.write_str("-")?;
                fmt_child(a, a.precedence() < 3, f)
            }
            Node::Unary(op, a) => write!(f, "{}({a})", op.name()),
            Node::Binary(op, a, b) => {
                let p = op.precedence();
                let (left_parens, right_parens) = match op {
                    BinaryOp::Add | BinaryOp::Sub | BinaryOp::Mul | BinaryOp::Div => {
                        (a.precedence() < p, b.precedence() <= p)
                    }
                    BinaryOp::Pow => (a.precedence() <= p, b.precedence() < 3),
                };
                fmt_child(a, left_parens, f)?;
                f.write_str(op.symbol())?;
                fmt_child(b, right_parens, f)
            }
        }
    }
}
