use super::{BinaryOp, Expr, Node, UnaryOp, Var};
use crate::error::{Error, Result};

/// Parses one scalar expression.
///
/// Grammar, lowest precedence first:
///
/// ```text
/// expr  := term (('+' | '-') term)*
/// term  := unary (('*' | '/') unary)*
/// unary := '-' unary | power
/// power := atom ('^' unary)?          right-associative
/// atom  := NUMBER | VAR | FUNC '(' expr ')' | '(' expr ')'
/// ```
///
/// Unary minus binds looser than `^`, so `-x1^2` is `-(x1^2)`. The tree is
/// returned exactly as written; no folding happens here.
pub fn parse(text: &str) -> Result<Expr> {
    let mut p = Parser { src: text, pos: 0 };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos < text.len() {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> Error {
        Error::Syntax { offset: self.pos, message: message.to_string() }
    }

    fn skip_ws(&mut self) {
        while let Some(b) = self.src.as_bytes().get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.as_bytes().get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => BinaryOp::Add,
                Some(b'-') => BinaryOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::raw(Node::Binary(op, lhs, rhs));
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => BinaryOp::Mul,
                Some(b'/') => BinaryOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::raw(Node::Binary(op, lhs, rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat(b'-') {
            let inner = self.unary()?;
            return Ok(Expr::raw(Node::Unary(UnaryOp::Neg, inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let exponent = self.unary()?;
            return Ok(Expr::raw(Node::Binary(BinaryOp::Pow, base, exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.peek() {
            None => Err(self.error("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.error("expected `)`"));
                }
                Ok(e)
            }
            Some(b) if b.is_ascii_digit() || b == b'.' => self.number(),
            Some(b) if b.is_ascii_alphabetic() || b == b'_' => self.identifier(),
            Some(_) => Err(self.error("unexpected character")),
        }
    }

    fn number(&mut self) -> Result<Expr> {
        let bytes = self.src.as_bytes();
        let start = self.pos;
        let mut end = start;
        let digits = |end: &mut usize| {
            let s = *end;
            while bytes.get(*end).is_some_and(u8::is_ascii_digit) {
                *end += 1;
            }
            *end - s
        };
        let mut mantissa = digits(&mut end);
        if bytes.get(end) == Some(&b'.') {
            end += 1;
            mantissa += digits(&mut end);
        }
        if mantissa == 0 {
            return Err(self.error("malformed number"));
        }
        if matches!(bytes.get(end), Some(b'e' | b'E')) {
            let mut k = end + 1;
            if matches!(bytes.get(k), Some(b'+' | b'-')) {
                k += 1;
            }
            if digits(&mut k) == 0 {
                self.pos = k;
                return Err(self.error("malformed exponent"));
            }
            end = k;
        }
        let value: f64 = self.src[start..end]
            .parse()
            .map_err(|_| self.error("malformed number"))?;
        self.pos = end;
        Ok(Expr::constant(value))
    }

    fn identifier(&mut self) -> Result<Expr> {
        let bytes = self.src.as_bytes();
        let start = self.pos;
        let mut end = start;
        while bytes.get(end).is_some_and(|b| b.is_ascii_alphanumeric() || *b == b'_') {
            end += 1;
        }
        let name = &self.src[start..end];
        self.pos = end;
        if self.peek() == Some(b'(') {
            let op = UnaryOp::from_function_name(name)
                .ok_or_else(|| Error::UnknownFunction { name: name.to_string(), offset: start })?;
            self.pos += 1;
            let arg = self.expr()?;
            if !self.eat(b')') {
                return Err(self.error("expected `)` after function argument"));
            }
            return Ok(Expr::raw(Node::Unary(op, arg)));
        }
        match Var::from_name(name) {
            Some(v) => Ok(Expr::var(v)),
            None if UnaryOp::from_function_name(name).is_some() => {
                Err(self.error("function name used without an argument"))
            }
            None => Err(Error::UnknownVariable(name.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x(k: usize) -> Expr {
        Expr::var(Var::X(k))
    }

    #[test]
    fn single_variable() {
        assert_eq!(parse("x1").unwrap(), x(1));
    }

    #[test]
    fn unary_minus_below_pow() {
        let e = parse("-(u1)^2").unwrap();
        let expected = Expr::raw(Node::Unary(
            UnaryOp::Neg,
            Expr::raw(Node::Binary(BinaryOp::Pow, Expr::var(Var::U(1)), Expr::constant(2.0))),
        ));
        assert_eq!(e, expected);
    }

    #[test]
    fn constraint_of_worked_example() {
        let e = parse("2*x1 - x1^3 - 0.5*sin(4*x2)").unwrap();
        let Node::Binary(BinaryOp::Sub, lhs, rhs) = e.node() else {
            panic!("expected subtraction at the root, got {e:?}");
        };
        assert!(matches!(lhs.node(), Node::Binary(BinaryOp::Sub, _, _)));
        assert!(matches!(rhs.node(), Node::Binary(BinaryOp::Mul, _, _)));
    }

    #[test]
    fn pow_is_right_associative() {
        let e = parse("x1^2^3").unwrap();
        let Node::Binary(BinaryOp::Pow, base, exp) = e.node() else { panic!() };
        assert_eq!(base, &x(1));
        assert!(matches!(exp.node(), Node::Binary(BinaryOp::Pow, _, _)));
    }

    #[test]
    fn numbers_with_exponents() {
        assert_eq!(parse("1.5e-3").unwrap().as_const(), Some(1.5e-3));
        assert_eq!(parse(".25").unwrap().as_const(), Some(0.25));
        assert_eq!(parse("2E+2").unwrap().as_const(), Some(200.0));
    }

    #[test]
    fn errors_carry_offsets() {
        match parse("x1 + * 2") {
            Err(Error::Syntax { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        match parse("(x1 + 2") {
            Err(Error::Syntax { offset, .. }) => assert_eq!(offset, 7),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse("1e+"), Err(Error::Syntax { .. })));
        assert!(matches!(parse("x1 x2"), Err(Error::Syntax { offset: 3, .. })));
    }

    #[test]
    fn unknown_names() {
        assert_eq!(
            parse("2*cosh(x1)"),
            Err(Error::UnknownFunction { name: "cosh".into(), offset: 2 })
        );
        assert_eq!(parse("y1 + 1"), Err(Error::UnknownVariable("y1".into())));
    }
}
