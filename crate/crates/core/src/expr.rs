//! Arithmetic expressions for coefficient fields given as text.
//!
//! The language is deliberately small: decimal literals, the constant `pi`,
//! variables `x1..xn` (macroscopic chart coordinates) and `y1..yn` (cell
//! coordinates), the four binary operators, unary minus, parentheses and the
//! functions `sin cos exp sqrt abs` (one argument) and `min max` (two).
//!
//! Precedence from low to high: `+ -`, `* /`, unary `-`, call/atom. Binary
//! operators associate to the left.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

pub const MAX_SOURCE_LEN: usize = 64 * 1024;

const DIV_EPS: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("empty expression")]
    Empty,
    #[error("expression longer than {MAX_SOURCE_LEN} bytes")]
    TooLong,
    #[error("syntax error at offset {offset}: expected one of {expected:?}")]
    Syntax { offset: usize, expected: Vec<&'static str> },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdent { offset: usize, name: String },
    #[error("function `{name}` takes {expected} argument(s), got {got} (offset {offset})")]
    Arity {
        offset: usize,
        name: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("unbound variable `{0}`")]
    Unbound(String),
    #[error("domain error in `{subexpr}`: {reason}")]
    Domain { subexpr: String, reason: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    X,
    Y,
}

/// Variable reference; `index` is zero based (`x1` is `{X, 0}`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    pub axis: Axis,
    pub index: usize,
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = match self.axis {
            Axis::X => 'x',
            Axis::Y => 'y',
        };
        write!(f, "{p}{}", self.index + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
    Abs,
    Min,
    Max,
}

impl Func {
    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Pi,
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Variable bindings: `x[i]` binds `x{i+1}`, `y[i]` binds `y{i+1}`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Env<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
}

impl<'a> Env<'a> {
    pub fn x(x: &'a [f64]) -> Self {
        Env { x, y: &[] }
    }

    pub fn y(y: &'a [f64]) -> Self {
        Env { x: &[], y }
    }

    fn get(&self, v: Var) -> Option<f64> {
        match v.axis {
            Axis::X => self.x.get(v.index).copied(),
            Axis::Y => self.y.get(v.index).copied(),
        }
    }
}

pub fn parse(src: &str) -> Result<Expr, ExprError> {
    if src.len() > MAX_SOURCE_LEN {
        return Err(ExprError::TooLong);
    }
    if src.trim().is_empty() {
        return Err(ExprError::Empty);
    }
    let mut p = Parser {
        src: src.as_bytes(),
        pos: 0,
    };
    let e = p.additive()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(ExprError::Syntax {
            offset: p.pos,
            expected: vec!["+", "-", "*", "/", "end of input"],
        });
    }
    Ok(e)
}

impl std::str::FromStr for Expr {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

const OPERAND: &[&str] = &["number", "identifier", "(", "-"];

struct Parser<'s> {
    src: &'s [u8],
    pos: usize,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn additive(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.multiplicative()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => BinOp::Add,
                Some(b'-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.multiplicative()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn multiplicative(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => BinOp::Mul,
                Some(b'/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat(b'-') {
            Ok(Expr::Neg(Box::new(self.unary()?)))
        } else {
            self.atom()
        }
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        let start = match self.peek() {
            Some(_) => self.pos,
            None => {
                return Err(ExprError::Syntax {
                    offset: self.pos,
                    expected: OPERAND.to_vec(),
                })
            }
        };
        let c = self.src[start];
        if c == b'(' {
            self.pos += 1;
            let e = self.additive()?;
            if !self.eat(b')') {
                return Err(ExprError::Syntax {
                    offset: self.pos,
                    expected: vec![")"],
                });
            }
            Ok(e)
        } else if c.is_ascii_digit() || c == b'.' {
            self.number(start)
        } else if c.is_ascii_lowercase() {
            self.ident(start)
        } else {
            Err(ExprError::Syntax {
                offset: start,
                expected: OPERAND.to_vec(),
            })
        }
    }

    fn number(&mut self, start: usize) -> Result<Expr, ExprError> {
        let s = self.src;
        let mut i = start;
        while i < s.len() && s[i].is_ascii_digit() {
            i += 1;
        }
        if i < s.len() && s[i] == b'.' {
            i += 1;
            while i < s.len() && s[i].is_ascii_digit() {
                i += 1;
            }
        }
        if i < s.len() && (s[i] == b'e' || s[i] == b'E') {
            let mut j = i + 1;
            if j < s.len() && (s[j] == b'+' || s[j] == b'-') {
                j += 1;
            }
            let digits = j;
            while j < s.len() && s[j].is_ascii_digit() {
                j += 1;
            }
            if j == digits {
                return Err(ExprError::Syntax {
                    offset: j,
                    expected: vec!["exponent digits"],
                });
            }
            i = j;
        }
        // The slice is ASCII by construction.
        let text = std::str::from_utf8(&s[start..i]).unwrap_or_default();
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => {
                self.pos = i;
                Ok(Expr::Num(v))
            }
            _ => Err(ExprError::Syntax {
                offset: start,
                expected: vec!["finite number"],
            }),
        }
    }

    fn ident(&mut self, start: usize) -> Result<Expr, ExprError> {
        let s = self.src;
        let mut i = start + 1;
        while i < s.len() && (s[i].is_ascii_lowercase() || s[i].is_ascii_digit()) {
            i += 1;
        }
        let name = std::str::from_utf8(&s[start..i]).unwrap_or_default();
        self.pos = i;
        if let Some(func) = Func::lookup(name) {
            if !self.eat(b'(') {
                return Err(ExprError::Syntax {
                    offset: self.pos,
                    expected: vec!["("],
                });
            }
            let mut args = vec![self.additive()?];
            while self.eat(b',') {
                args.push(self.additive()?);
            }
            if !self.eat(b')') {
                return Err(ExprError::Syntax {
                    offset: self.pos,
                    expected: vec![",", ")"],
                });
            }
            if args.len() != func.arity() {
                return Err(ExprError::Arity {
                    offset: start,
                    name: func.name(),
                    expected: func.arity(),
                    got: args.len(),
                });
            }
            return Ok(Expr::Call(func, args));
        }
        if name == "pi" {
            return Ok(Expr::Pi);
        }
        if let Some(var) = parse_var(name) {
            return Ok(Expr::Var(var));
        }
        Err(ExprError::UnknownIdent {
            offset: start,
            name: name.to_string(),
        })
    }
}

fn parse_var(name: &str) -> Option<Var> {
    let axis = match name.as_bytes()[0] {
        b'x' => Axis::X,
        b'y' => Axis::Y,
        _ => return None,
    };
    let digits = &name[1..];
    if digits.is_empty() || digits.starts_with('0') || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let k: usize = digits.parse().ok()?;
    Some(Var { axis, index: k - 1 })
}

impl Expr {
    pub fn eval(&self, env: &Env<'_>) -> Result<f64, ExprError> {
        Ok(match self {
            Expr::Num(v) => *v,
            Expr::Pi => std::f64::consts::PI,
            Expr::Var(v) => env.get(*v).ok_or_else(|| ExprError::Unbound(v.to_string()))?,
            Expr::Neg(a) => -a.eval(env)?,
            Expr::Bin(op, a, b) => {
                let l = a.eval(env)?;
                let r = b.eval(env)?;
                match op {
                    BinOp::Add => l + r,
                    BinOp::Sub => l - r,
                    BinOp::Mul => l * r,
                    BinOp::Div => {
                        if r.abs() < DIV_EPS {
                            return Err(ExprError::Domain {
                                subexpr: self.to_string(),
                                reason: "division by zero",
                            });
                        }
                        l / r
                    }
                }
            }
            Expr::Call(f, args) => {
                let a = args[0].eval(env)?;
                match f {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Exp => a.exp(),
                    Func::Abs => a.abs(),
                    Func::Sqrt => {
                        if a < 0.0 {
                            return Err(ExprError::Domain {
                                subexpr: self.to_string(),
                                reason: "square root of a negative number",
                            });
                        }
                        a.sqrt()
                    }
                    Func::Min => a.min(args[1].eval(env)?),
                    Func::Max => a.max(args[1].eval(env)?),
                }
            }
        })
    }

    /// Evaluate with bindings looked up by name (`"x1"`, `"y2"`, ...).
    pub fn eval_map(&self, env: &HashMap<String, f64>) -> Result<f64, ExprError> {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for v in self.variables() {
            let val = env
                .get(&v.to_string())
                .copied()
                .ok_or_else(|| ExprError::Unbound(v.to_string()))?;
            let slot = match v.axis {
                Axis::X => &mut x,
                Axis::Y => &mut y,
            };
            if slot.len() <= v.index {
                slot.resize(v.index + 1, f64::NAN);
            }
            slot[v.index] = val;
        }
        self.eval(&Env { x: &x, y: &y })
    }

    /// Distinct variables referenced by the tree, in first-occurrence order.
    pub fn variables(&self) -> Vec<Var> {
        fn walk(e: &Expr, out: &mut Vec<Var>) {
            match e {
                Expr::Var(v) => {
                    if !out.contains(v) {
                        out.push(*v)
                    }
                }
                Expr::Neg(a) => walk(a, out),
                Expr::Bin(_, a, b) => {
                    walk(a, out);
                    walk(b, out);
                }
                Expr::Call(_, args) => args.iter().for_each(|a| walk(a, out)),
                Expr::Num(_) | Expr::Pi => {}
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out
    }

    /// Check that only `axis` variables with index below `dim` are used.
    pub fn check_vars(&self, axis: Axis, dim: usize) -> Result<(), ExprError> {
        for v in self.variables() {
            if v.axis != axis || v.index >= dim {
                return Err(ExprError::Unbound(v.to_string()));
            }
        }
        Ok(())
    }
}

/// Canonical form: every compound node is parenthesized, so printing and
/// re-parsing reproduces the tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Pi => f.write_str("pi"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(s: &str) -> f64 {
        parse(s).unwrap().eval(&Env::default()).unwrap()
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("2+3*4"), 14.0);
        assert_eq!(ev("-(2)+3"), 1.0);
        assert_eq!(ev("2-3-4"), -5.0);
        assert_eq!(ev("8/4/2"), 1.0);
        assert_eq!(ev("-2*3"), -6.0);
        assert_eq!(ev("--2"), 2.0);
    }

    #[test]
    fn coefficient_examples() {
        let d = parse("2 + sin(2*pi*y1)").unwrap();
        let v = d.eval(&Env::y(&[0.25])).unwrap();
        assert!((v - 3.0).abs() < 1e-15);

        let e = parse("1/(x1+1)").unwrap();
        assert_eq!(e.eval(&Env::x(&[1.0])).unwrap(), 0.5);

        let e = parse("min(x1, 2)").unwrap();
        assert_eq!(e.eval(&Env::x(&[5.0])).unwrap(), 2.0);
        assert_eq!(ev("exp(0) + abs(-2)"), 3.0);
        assert_eq!(ev("max(1, 2.5e0)"), 2.5);
        assert_eq!(ev(" 1.5e-1 *\t2 "), 0.3);
    }

    #[test]
    fn syntax_error_offset() {
        match parse("2+*3") {
            Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse("(1+2"), Err(ExprError::Syntax { offset: 4, .. })));
        assert!(matches!(parse("1 2"), Err(ExprError::Syntax { offset: 2, .. })));
        assert!(matches!(parse("1e"), Err(ExprError::Syntax { .. })));
        assert!(matches!(parse("sin 1"), Err(ExprError::Syntax { .. })));
        assert_eq!(parse("   "), Err(ExprError::Empty));
        assert_eq!(parse(&"1+".repeat(40_000)), Err(ExprError::TooLong));
    }

    #[test]
    fn identifier_errors() {
        assert!(matches!(parse("foo + 1"), Err(ExprError::UnknownIdent { offset: 0, .. })));
        assert!(matches!(parse("x0"), Err(ExprError::UnknownIdent { .. })));
        assert!(matches!(parse("z1"), Err(ExprError::UnknownIdent { .. })));
        assert!(matches!(
            parse("min(1)"),
            Err(ExprError::Arity { expected: 2, got: 1, .. })
        ));
        assert!(matches!(
            parse("sin(1, 2)"),
            Err(ExprError::Arity { expected: 1, got: 2, .. })
        ));
    }

    #[test]
    fn domain_and_binding_errors() {
        let e = parse("sqrt(-1)").unwrap();
        assert!(matches!(e.eval(&Env::default()), Err(ExprError::Domain { .. })));
        let e = parse("1/(x1-1)").unwrap();
        match e.eval(&Env::x(&[1.0])) {
            Err(ExprError::Domain { subexpr, .. }) => assert_eq!(subexpr, "(1.0 / (x1 - 1.0))"),
            other => panic!("{other:?}"),
        }
        let e = parse("x2 + y1").unwrap();
        assert_eq!(e.eval(&Env::x(&[1.0])), Err(ExprError::Unbound("x2".into())));
        assert!(e.check_vars(Axis::X, 2).is_err());
        assert!(parse("x1*x2").unwrap().check_vars(Axis::X, 2).is_ok());
    }

    #[test]
    fn eval_by_name() {
        let e = parse("x1 + 10*y2").unwrap();
        let env: HashMap<String, f64> = [("x1".to_string(), 1.0), ("y2".to_string(), 2.0)].into();
        assert_eq!(e.eval_map(&env).unwrap(), 21.0);
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0.0f64..1e6).prop_map(Expr::Num),
            Just(Expr::Pi),
            (0usize..3, any::<bool>()).prop_map(|(index, x)| Expr::Var(Var {
                axis: if x { Axis::X } else { Axis::Y },
                index
            })),
        ];
        leaf.prop_recursive(5, 48, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
                (inner.clone(), inner.clone(), 0..4usize).prop_map(|(a, b, k)| {
                    let op = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div][k];
                    Expr::Bin(op, Box::new(a), Box::new(b))
                }),
                (inner.clone(), 0..5usize).prop_map(|(a, k)| {
                    let f = [Func::Sin, Func::Cos, Func::Exp, Func::Sqrt, Func::Abs][k];
                    Expr::Call(f, vec![a])
                }),
                (inner.clone(), inner, any::<bool>()).prop_map(|(a, b, mn)| {
                    Expr::Call(if mn { Func::Min } else { Func::Max }, vec![a, b])
                }),
            ]
        })
    }

    proptest! {
        #[test]
        fn canonical_print_round_trips(e in arb_expr()) {
            let printed = e.to_string();
            let reparsed = parse(&printed).unwrap();
            prop_assert_eq!(&reparsed, &e);
            prop_assert_eq!(parse(&reparsed.to_string()).unwrap(), reparsed);
        }

        #[test]
        fn evaluation_is_pure(e in arb_expr(), x in prop::array::uniform3(-2.0f64..2.0)) {
            let env = Env { x: &x, y: &x };
            let a = e.eval(&env);
            let b = e.eval(&env);
            match (a, b) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a.to_bits(), b.to_bits()),
                (a, b) => prop_assert_eq!(a, b),
            }
        }
    }
}
