//! Scalar fields over space-time: constants, closures, and a small
//! arithmetic-expression language for config files.
//!
//! Expressions understand `+ - * / ^`, parentheses, the variables `t`, `x`,
//! `theta` (alias `y`), the constants `pi` and `e`, and the functions
//! `sin cos tan asin acos atan sinh cosh tanh exp ln log10 sqrt abs sign
//! floor ceil` plus the two-argument `min max pow atan2`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};

/// A point of the model manifold. For the interval `theta` is ignored.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub theta: f64,
}

impl Point {
    pub const fn new(x: f64, theta: f64) -> Self {
        Self { x, theta }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Var {
    T,
    X,
    Theta,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func1 {
    Sin,
    Cos,
    Tan,
    Asin,
    Acos,
    Atan,
    Sinh,
    Cosh,
    Tanh,
    Exp,
    Ln,
    Log10,
    Sqrt,
    Abs,
    Sign,
    Floor,
    Ceil,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func2 {
    Min,
    Max,
    Pow,
    Atan2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call1(Func1, Box<Node>),
    Call2(Func2, Box<Node>, Box<Node>),
}

impl Node {
    fn eval(&self, t: f64, p: Point) -> f64 {
        match self {
            Node::Num(v) => *v,
            Node::Var(Var::T) => t,
            Node::Var(Var::X) => p.x,
            Node::Var(Var::Theta) => p.theta,
            Node::Neg(a) => -a.eval(t, p),
            Node::Bin(op, a, b) => {
                let (a, b) = (a.eval(t, p), b.eval(t, p));
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                    BinOp::Pow => pow(a, b),
                }
            }
            Node::Call1(f, a) => {
                let a = a.eval(t, p);
                match f {
                    Func1::Sin => a.sin(),
                    Func1::Cos => a.cos(),
                    Func1::Tan => a.tan(),
                    Func1::Asin => a.asin(),
                    Func1::Acos => a.acos(),
                    Func1::Atan => a.atan(),
                    Func1::Sinh => a.sinh(),
                    Func1::Cosh => a.cosh(),
                    Func1::Tanh => a.tanh(),
                    Func1::Exp => a.exp(),
                    Func1::Ln => a.ln(),
                    Func1::Log10 => a.log10(),
                    Func1::Sqrt => a.sqrt(),
                    Func1::Abs => a.abs(),
                    Func1::Sign => {
                        if a > 0.0 {
                            1.0
                        } else if a < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }
                    Func1::Floor => a.floor(),
                    Func1::Ceil => a.ceil(),
                }
            }
            Node::Call2(f, a, b) => {
                let (a, b) = (a.eval(t, p), b.eval(t, p));
                match f {
                    Func2::Min => a.min(b),
                    Func2::Max => a.max(b),
                    Func2::Pow => pow(a, b),
                    Func2::Atan2 => a.atan2(b),
                }
            }
        }
    }

    fn uses(&self, var: Var) -> bool {
        match self {
            Node::Num(_) => false,
            Node::Var(v) => *v == var,
            Node::Neg(a) | Node::Call1(_, a) => a.uses(var),
            Node::Bin(_, a, b) | Node::Call2(_, a, b) => a.uses(var) || b.uses(var),
        }
    }
}

#[inline]
fn pow(a: f64, b: f64) -> f64 {
    if b == b.trunc() && b.abs() <= 64.0 {
        a.powi(b as i32)
    } else {
        a.powf(b)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

fn tokenize(src: &str) -> Result<Vec<(usize, Token)>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' | '-' | '*' | '/' | '^' => {
                out.push((i, Token::Op(c)));
                i += 1;
            }
            '(' => {
                out.push((i, Token::LParen));
                i += 1;
            }
            ')' => {
                out.push((i, Token::RParen));
                i += 1;
            }
            ',' => {
                out.push((i, Token::Comma));
                i += 1;
            }
            c if c.is_ascii_digit() || c == '.' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let v: f64 = text
                    .parse()
                    .map_err(|_| Error::Expr(format!("bad number `{text}` at column {}", start + 1)))?;
                out.push((start, Token::Num(v)));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((start, Token::Ident(src[start..i].to_string())));
            }
            other => {
                return Err(Error::Expr(format!(
                    "unexpected character `{other}` at column {}",
                    i + 1
                )))
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: &'a [(usize, Token)],
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn column(&self) -> usize {
        self.tokens.get(self.pos).map_or(usize::MAX, |(c, _)| c + 1)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).map(|(_, t)| t.clone());
        self.pos += 1;
        t
    }

    fn expect(&mut self, tok: Token) -> Result<()> {
        let col = self.column();
        match self.next() {
            Some(t) if t == tok => Ok(()),
            Some(t) => Err(Error::Expr(format!("expected {tok:?}, found {t:?} at column {col}"))),
            None => Err(Error::Expr(format!("expected {tok:?}, found end of input"))),
        }
    }

    // expr := term (('+'|'-') term)*
    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Some(Token::Op(c @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            let op = if c == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    // term := unary (('*'|'/') unary)*
    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        while let Some(Token::Op(c @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.unary()?;
            let op = if c == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    // unary := ('-'|'+') unary | power
    fn unary(&mut self) -> Result<Node> {
        match self.peek() {
            Some(Token::Op('-')) => {
                self.pos += 1;
                Ok(Node::Neg(Box::new(self.unary()?)))
            }
            Some(Token::Op('+')) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    // power := atom ('^' unary)?   (right associative, binds tighter than unary minus on the left)
    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if let Some(Token::Op('^')) = self.peek() {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        let col = self.column();
        match self.next() {
            Some(Token::Num(v)) => Ok(Node::Num(v)),
            Some(Token::LParen) => {
                let e = self.expr()?;
                self.expect(Token::RParen)?;
                Ok(e)
            }
            Some(Token::Ident(name)) => {
                if let Some(Token::LParen) = self.peek() {
                    self.pos += 1;
                    let a = self.expr()?;
                    if let Some(f) = func1(&name) {
                        self.expect(Token::RParen)?;
                        return Ok(Node::Call1(f, Box::new(a)));
                    }
                    if let Some(f) = func2(&name) {
                        self.expect(Token::Comma)?;
                        let b = self.expr()?;
                        self.expect(Token::RParen)?;
                        return Ok(Node::Call2(f, Box::new(a), Box::new(b)));
                    }
                    return Err(Error::Expr(format!("unknown function `{name}` at column {col}")));
                }
                match name.as_str() {
                    "t" => Ok(Node::Var(Var::T)),
                    "x" => Ok(Node::Var(Var::X)),
                    "theta" | "y" => Ok(Node::Var(Var::Theta)),
                    "pi" => Ok(Node::Num(std::f64::consts::PI)),
                    "e" => Ok(Node::Num(std::f64::consts::E)),
                    _ => Err(Error::Expr(format!("unknown identifier `{name}` at column {col}"))),
                }
            }
            Some(t) => Err(Error::Expr(format!("unexpected token {t:?} at column {col}"))),
            None => Err(Error::Expr("unexpected end of expression".into())),
        }
    }
}

fn func1(name: &str) -> Option<Func1> {
    Some(match name {
        "sin" => Func1::Sin,
        "cos" => Func1::Cos,
        "tan" => Func1::Tan,
        "asin" => Func1::Asin,
        "acos" => Func1::Acos,
        "atan" => Func1::Atan,
        "sinh" => Func1::Sinh,
        "cosh" => Func1::Cosh,
        "tanh" => Func1::Tanh,
        "exp" => Func1::Exp,
        "ln" | "log" => Func1::Ln,
        "log10" => Func1::Log10,
        "sqrt" => Func1::Sqrt,
        "abs" => Func1::Abs,
        "sign" => Func1::Sign,
        "floor" => Func1::Floor,
        "ceil" => Func1::Ceil,
        _ => return None,
    })
}

fn func2(name: &str) -> Option<Func2> {
    Some(match name {
        "min" => Func2::Min,
        "max" => Func2::Max,
        "pow" => Func2::Pow,
        "atan2" => Func2::Atan2,
        _ => return None,
    })
}

/// A compiled arithmetic expression in `t`, `x`, `theta`.
#[derive(Clone, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
}

impl Expr {
    pub fn parse(src: &str) -> Result<Self> {
        let tokens = tokenize(src)?;
        if tokens.is_empty() {
            return Err(Error::Expr("empty expression".into()));
        }
        let mut p = Parser { tokens: &tokens, pos: 0 };
        let root = p.expr()?;
        if p.pos < tokens.len() {
            return Err(Error::Expr(format!(
                "trailing input at column {} in `{src}`",
                p.column()
            )));
        }
        Ok(Self { source: src.to_string(), root })
    }

    #[inline]
    pub fn eval(&self, t: f64, p: Point) -> f64 {
        self.root.eval(t, p)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn depends_on_time(&self) -> bool {
        self.root.uses(Var::T)
    }
}

impl FromStr for Expr {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Expr::parse(s)
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.source)
    }
}

type FieldFn = dyn Fn(f64, Point) -> f64 + Send + Sync;

/// A real-valued function of `(t, point)`.
#[derive(Clone)]
pub enum Field {
    Const(f64),
    Expr(Expr),
    Func { f: Arc<FieldFn>, time_dependent: bool },
}

impl Field {
    pub fn constant(v: f64) -> Self {
        Field::Const(v)
    }

    pub fn zero() -> Self {
        Field::Const(0.0)
    }

    pub fn expr(src: &str) -> Result<Self> {
        let e = Expr::parse(src)?;
        // fold expressions without variables
        if !e.root.uses(Var::T) && !e.root.uses(Var::X) && !e.root.uses(Var::Theta) {
            return Ok(Field::Const(e.eval(0.0, Point::default())));
        }
        Ok(Field::Expr(e))
    }

    pub fn func<F>(f: F) -> Self
    where
        F: Fn(f64, Point) -> f64 + Send + Sync + 'static,
    {
        Field::Func { f: Arc::new(f), time_dependent: true }
    }

    /// Closure that the caller promises does not depend on `t`.
    pub fn static_func<F>(f: F) -> Self
    where
        F: Fn(Point) -> f64 + Send + Sync + 'static,
    {
        Field::Func { f: Arc::new(move |_, p| f(p)), time_dependent: false }
    }

    #[inline]
    pub fn eval(&self, t: f64, p: Point) -> f64 {
        match self {
            Field::Const(v) => *v,
            Field::Expr(e) => e.eval(t, p),
            Field::Func { f, .. } => f(t, p),
        }
    }

    pub fn is_time_dependent(&self) -> bool {
        match self {
            Field::Const(_) => false,
            Field::Expr(e) => e.depends_on_time(),
            Field::Func { time_dependent, .. } => *time_dependent,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Field::Const(v) if *v == 0.0)
    }
}

impl Default for Field {
    fn default() -> Self {
        Field::zero()
    }
}

impl fmt::Debug for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Field::Const(v) => write!(f, "Const({v})"),
            Field::Expr(e) => write!(f, "{e:?}"),
            Field::Func { time_dependent, .. } => {
                write!(f, "Func(time_dependent: {time_dependent})")
            }
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Field::Const(v) => write!(f, "{v}"),
            Field::Expr(e) => f.write_str(e.source()),
            Field::Func { .. } => f.write_str("<closure>"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn ev(s: &str, t: f64, x: f64, th: f64) -> f64 {
        Expr::parse(s).unwrap().eval(t, Point::new(x, th))
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("1 + 2 * 3", 0., 0., 0.), 7.0);
        assert_eq!(ev("2 ^ 3 ^ 2", 0., 0., 0.), 512.0);
        assert_eq!(ev("-2 ^ 2", 0., 0., 0.), -4.0);
        assert_eq!(ev("(1 - 2) - 3", 0., 0., 0.), -4.0);
        assert_eq!(ev("8 / 4 / 2", 0., 0., 0.), 1.0);
        assert_eq!(ev("2 * -3", 0., 0., 0.), -6.0);
        assert_eq!(ev("1.5e-1 * 10", 0., 0., 0.), 1.5);
    }

    #[test]
    fn variables_and_functions() {
        let v = ev("1 + 0.1*sin(t)*cos(pi*x) + theta", PI / 2.0, 0.0, 2.0);
        assert!((v - 3.1).abs() < 1e-15);
        assert_eq!(ev("max(x, y)", 0., 1., 2.), 2.0);
        assert_eq!(ev("pow(2, 10)", 0., 0., 0.), 1024.0);
        assert!((ev("exp(ln(3))", 0., 0., 0.) - 3.0).abs() < 1e-14);
    }

    #[test]
    fn errors_are_reported() {
        assert!(Expr::parse("").is_err());
        assert!(Expr::parse("1 +").is_err());
        assert!(Expr::parse("foo(1)").is_err());
        assert!(Expr::parse("z").is_err());
        assert!(Expr::parse("(1 + 2").is_err());
        assert!(Expr::parse("1 2").is_err());
        assert!(Expr::parse("max(1)").is_err());
    }

    #[test]
    fn constant_folding_and_time_dependence() {
        assert!(matches!(Field::expr("2*pi").unwrap(), Field::Const(_)));
        assert!(!Field::expr("x^2").unwrap().is_time_dependent());
        assert!(Field::expr("sin(t)*x").unwrap().is_time_dependent());
    }
}
