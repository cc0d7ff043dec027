use super::{BinaryOp, Expr, Node, UnaryOp, Var};

impl Expr {
    /// Exact symbolic partial derivative, simplified on the way up.
    pub fn differentiate(&self, var: Var) -> Expr {
        match self.node() {
            Node::Const(_) => Expr::zero(),
            Node::Var(v) => {
                if *v == var {
                    Expr::one()
                } else {
                    Expr::zero()
                }
            }
            Node::Unary(op, a) => {
                let da = a.differentiate(var);
                if da.is_zero() {
                    return Expr::zero();
                }
                let a = a.simplify();
                let outer = match op {
                    UnaryOp::Neg => return Expr::neg(da),
                    UnaryOp::Sin => Expr::unary(UnaryOp::Cos, a),
                    UnaryOp::Cos => Expr::neg(Expr::unary(UnaryOp::Sin, a)),
                    // 1 + tan^2
                    UnaryOp::Tan => Expr::add(
                        Expr::one(),
                        Expr::pow(Expr::unary(UnaryOp::Tan, a), Expr::constant(2.0)),
                    ),
                    UnaryOp::Atan => Expr::div(
                        Expr::one(),
                        Expr::add(Expr::one(), Expr::pow(a, Expr::constant(2.0))),
                    ),
                    UnaryOp::Exp => Expr::unary(UnaryOp::Exp, a),
                    UnaryOp::Log => Expr::div(Expr::one(), a),
                    UnaryOp::Sqrt => Expr::div(
                        Expr::constant(0.5),
                        Expr::unary(UnaryOp::Sqrt, a),
                    ),
                };
                Expr::mul(outer, da)
            }
            Node::Binary(op, a, b) => {
                let da = a.differentiate(var);
                let db = b.differentiate(var);
                match op {
                    BinaryOp::Add => Expr::add(da, db),
                    BinaryOp::Sub => Expr::sub(da, db),
                    BinaryOp::Mul => Expr::add(
                        Expr::mul(da, b.simplify()),
                        Expr::mul(a.simplify(), db),
                    ),
                    BinaryOp::Div => {
                        if db.is_zero() {
                            return Expr::div(da, b.simplify());
                        }
                        let (a, b) = (a.simplify(), b.simplify());
                        Expr::div(
                            Expr::sub(Expr::mul(da, b.clone()), Expr::mul(a, db)),
                            Expr::pow(b, Expr::constant(2.0)),
                        )
                    }
                    BinaryOp::Pow => {
                        let (a, b) = (a.simplify(), b.simplify());
                        if db.is_zero() {
                            // b * a^(b-1) * a'
                            let lowered = Expr::sub(b.clone(), Expr::one());
                            return Expr::mul(Expr::mul(b, Expr::pow(a, lowered)), da);
                        }
                        // a^b * (b' ln a + b a'/a)
                        let log_term = Expr::mul(db, Expr::unary(UnaryOp::Log, a.clone()));
                        let base_term = if da.is_zero() {
                            Expr::zero()
                        } else {
                            Expr::div(Expr::mul(b.clone(), da), a.clone())
                        };
                        Expr::mul(Expr::pow(a, b), Expr::add(log_term, base_term))
                    }
                }
            }
        }
    }

    /// Gradient with respect to the listed variables.
    pub fn gradient(&self, vars: &[Var]) -> Vec<Expr> {
        vars.iter().map(|v| self.differentiate(*v)).collect()
    }
}
