//! Whitelisted scalar expressions in `t` and `x0, x1, …` with symbolic
//! differentiation.
//!
//! Grammar: numbers, `t`, `x` (alias of `x0`), `x<k>`, `pi`, `+ - * /`,
//! integer powers `^n`, parentheses and the functions `sin`, `cos`, `exp`.

use std::fmt;

use crate::error::{GleError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    T,
    X(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Exp(Box<Expr>),
}

use Expr::*;

impl Expr {
    pub fn parse(src: &str) -> Result<Expr> {
        let tokens = lex(src)?;
        let mut p = Parser { tokens, pos: 0, src };
        let e = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(p.error("trailing input"));
        }
        Ok(e)
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            Num(v) => *v,
            T => t,
            X(k) => x.get(*k).copied().unwrap_or(f64::NAN),
            Neg(a) => -a.eval(t, x),
            Add(a, b) => a.eval(t, x) + b.eval(t, x),
            Sub(a, b) => a.eval(t, x) - b.eval(t, x),
            Mul(a, b) => a.eval(t, x) * b.eval(t, x),
            Div(a, b) => a.eval(t, x) / b.eval(t, x),
            Pow(a, n) => a.eval(t, x).powi(*n),
            Sin(a) => a.eval(t, x).sin(),
            Cos(a) => a.eval(t, x).cos(),
            Exp(a) => a.eval(t, x).exp(),
        }
    }

    /// Largest `x` index referenced, if any.
    pub fn max_var(&self) -> Option<usize> {
        match self {
            Num(_) | T => None,
            X(k) => Some(*k),
            Neg(a) | Pow(a, _) | Sin(a) | Cos(a) | Exp(a) => a.max_var(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => a.max_var().max(b.max_var()),
        }
    }

    pub fn uses_t(&self) -> bool {
        match self {
            Num(_) | X(_) => false,
            T => true,
            Neg(a) | Pow(a, _) | Sin(a) | Cos(a) | Exp(a) => a.uses_t(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => a.uses_t() || b.uses_t(),
        }
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Num(v) => Some(*v),
            _ => None,
        }
    }

    /// ∂/∂x_l, lightly simplified.
    pub fn derivative(&self, l: usize) -> Expr {
        match self {
            Num(_) | T => Num(0.0),
            X(k) => Num(if *k == l { 1.0 } else { 0.0 }),
            Neg(a) => neg(a.derivative(l)),
            Add(a, b) => add(a.derivative(l), b.derivative(l)),
            Sub(a, b) => sub(a.derivative(l), b.derivative(l)),
            Mul(a, b) => add(mul(a.derivative(l), (**b).clone()), mul((**a).clone(), b.derivative(l))),
            Div(a, b) => div(
                sub(mul(a.derivative(l), (**b).clone()), mul((**a).clone(), b.derivative(l))),
                pow((**b).clone(), 2),
            ),
            Pow(a, n) => mul(mul(Num(*n as f64), pow((**a).clone(), n - 1)), a.derivative(l)),
            Sin(a) => mul(Cos(a.clone()), a.derivative(l)),
            Cos(a) => mul(neg(Sin(a.clone())), a.derivative(l)),
            Exp(a) => mul(Exp(a.clone()), a.derivative(l)),
        }
    }
}

fn neg(a: Expr) -> Expr {
    match a {
        Num(v) => Num(-v),
        a => Neg(Box::new(a)),
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Num(x), Num(y)) => Num(x + y),
        (Num(z), e) | (e, Num(z)) if z == 0.0 => e,
        (a, b) => Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Num(x), Num(y)) => Num(x - y),
        (e, Num(z)) if z == 0.0 => e,
        (Num(z), e) if z == 0.0 => neg(e),
        (a, b) => Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Num(x), Num(y)) => Num(x * y),
        (Num(z), _) | (_, Num(z)) if z == 0.0 => Num(0.0),
        (Num(o), e) | (e, Num(o)) if o == 1.0 => e,
        (a, b) => Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Num(z), _) if z == 0.0 => Num(0.0),
        (e, Num(o)) if o == 1.0 => e,
        (a, b) => Div(Box::new(a), Box::new(b)),
    }
}

fn pow(a: Expr, n: i32) -> Expr {
    match (a, n) {
        (_, 0) => Num(1.0),
        (e, 1) => e,
        (Num(v), n) => Num(v.powi(n)),
        (e, n) => Pow(Box::new(e), n),
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Num(v) => write!(f, "{v:?}"),
            T => write!(f, "t"),
            X(k) => write!(f, "x{k}"),
            Neg(a) => write!(f, "(-{a})"),
            Add(a, b) => write!(f, "({a} + {b})"),
            Sub(a, b) => write!(f, "({a} - {b})"),
            Mul(a, b) => write!(f, "({a} * {b})"),
            Div(a, b) => write!(f, "({a} / {b})"),
            Pow(a, n) => write!(f, "({a}^{n})"),
            Sin(a) => write!(f, "sin({a})"),
            Cos(a) => write!(f, "cos({a})"),
            Exp(a) => write!(f, "exp({a})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let s: String = chars[start..i].iter().collect();
            let v = s.parse::<f64>().map_err(|_| GleError::Expression(format!("bad number `{s}` in `{src}`")))?;
            out.push((Tok::Num(v), start));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((Tok::Ident(chars[start..i].iter().collect()), start));
        } else if "+-*/^()".contains(c) {
            out.push((Tok::Op(c), i));
            i += 1;
        } else {
            return Err(GleError::Expression(format!("unexpected `{c}` at {i} in `{src}`")));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<(Tok, usize)>,
    pos: usize,
    src: &'a str,
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> GleError {
        let at = self.tokens.get(self.pos).map_or(self.src.len(), |t| t.1);
        GleError::Expression(format!("{msg} at {at} in `{}`", self.src))
    }

    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|t| &t.0)
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Op(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut e = self.term()?;
        loop {
            if self.eat('+') {
                e = Add(Box::new(e), Box::new(self.term()?));
            } else if self.eat('-') {
                e = Sub(Box::new(e), Box::new(self.term()?));
            } else {
                return Ok(e);
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut e = self.unary()?;
        loop {
            if self.eat('*') {
                e = Mul(Box::new(e), Box::new(self.unary()?));
            } else if self.eat('/') {
                e = Div(Box::new(e), Box::new(self.unary()?));
            } else {
                return Ok(e);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat('-') {
            return Ok(Neg(Box::new(self.unary()?)));
        }
        if self.eat('+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.eat('^') {
            let neg = self.eat('-');
            match self.peek().cloned() {
                Some(Tok::Num(v)) if v.fract() == 0.0 && v.abs() <= 64.0 => {
                    self.pos += 1;
                    let n = if neg { -(v as i32) } else { v as i32 };
                    return Ok(Pow(Box::new(base), n));
                }
                _ => return Err(self.error("exponent must be an integer literal")),
            }
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Num(v))
            }
            Some(Tok::Op('(')) => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(')') {
                    return Err(self.error("expected `)`"));
                }
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                match name.as_str() {
                    "t" => Ok(T),
                    "x" => Ok(X(0)),
                    "pi" => Ok(Num(std::f64::consts::PI)),
                    "sin" | "cos" | "exp" => {
                        if !self.eat('(') {
                            return Err(self.error("expected `(` after function"));
                        }
                        let a = Box::new(self.expr()?);
                        if !self.eat(')') {
                            return Err(self.error("expected `)`"));
                        }
                        Ok(match name.as_str() {
                            "sin" => Sin(a),
                            "cos" => Cos(a),
                            _ => Exp(a),
                        })
                    }
                    s if s.len() > 1 && s.starts_with('x') && s[1..].chars().all(|c| c.is_ascii_digit()) => {
                        Ok(X(s[1..].parse().map_err(|_| self.error("bad variable index"))?))
                    }
                    _ => {
                        self.pos -= 1;
                        Err(self.error(&format!("unknown identifier `{name}`")))
                    }
                }
            }
            _ => Err(self.error("expected a value")),
        }
    }
}
