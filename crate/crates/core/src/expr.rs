//! Scalar fields on R³ as expression trees.
//!
//! A [`ScalarField`] is an immutable, cheaply clonable tree over the three chart
//! coordinates `x1`, `x2`, `x3`. Fields can be parsed from text, printed back,
//! evaluated in IEEE double precision and differentiated symbolically.
//!
//! # Grammar
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' '-'? INTEGER)?
//! primary := NUMBER | VAR | FUNC '(' expr ')' | '(' expr ')'
//! VAR     := 'x1' | 'x2' | 'x3'
//! FUNC    := 'sin' | 'cos' | 'exp' | 'pos' | 'step'
//! NUMBER  := DIGITS ('.' DIGITS?)? (('e' | 'E') ('+' | '-')? DIGITS)?
//! ```
//!
//! Precedence from tightest to loosest: `^`, unary minus, `*` `/`, `+` `-`.
//! Binary operators associate to the left. `pos(g)` is `max(g, 0)` and
//! `step(g)` is the Heaviside function (1 for `g > 0`, else 0); they exist so
//! that compactly supported bump profiles can be written down.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// One of the three chart coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    X1,
    X2,
    X3,
}

impl Var {
    pub const ALL: [Var; 3] = [Var::X1, Var::X2, Var::X3];

    pub fn index(self) -> usize {
        match self {
            Var::X1 => 0,
            Var::X2 => 1,
            Var::X3 => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Var> {
        Var::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Var::X1 => "x1",
            Var::X2 => "x2",
            Var::X3 => "x3",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    /// `max(g, 0)`.
    Pos,
    /// Heaviside step, `1` if `g > 0` else `0`.
    Step,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Pos => "pos",
            Func::Step => "step",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "pos" => Func::Pos,
            "step" => Func::Step,
            _ => return None,
        })
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Exp => v.exp(),
            Func::Pos => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            Func::Step => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// A node of the expression tree. Children are shared [`ScalarField`]s.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Neg(ScalarField),
    Add(ScalarField, ScalarField),
    Sub(ScalarField, ScalarField),
    Mul(ScalarField, ScalarField),
    Div(ScalarField, ScalarField),
    Pow(ScalarField, i32),
    Call(Func, ScalarField),
}

/// A smooth real-valued function of `(x1, x2, x3)`.
#[derive(Clone, PartialEq)]
pub struct ScalarField(Arc<Expr>);

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { offset: usize, name: String },
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Syntax { offset, .. } | ParseError::UnknownIdentifier { offset, .. } => {
                *offset
            }
        }
    }
}

impl ScalarField {
    fn new(e: Expr) -> Self {
        ScalarField(Arc::new(e))
    }

    pub fn constant(c: f64) -> Self {
        Self::new(Expr::Const(c))
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn one() -> Self {
        Self::constant(1.0)
    }

    pub fn var(v: Var) -> Self {
        Self::new(Expr::Var(v))
    }

    pub fn expr(&self) -> &Expr {
        &self.0
    }

    pub fn as_const(&self) -> Option<f64> {
        match *self.0 {
            Expr::Const(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    pub fn is_one(&self) -> bool {
        self.as_const() == Some(1.0)
    }

    // Smart constructors. They fold constants and apply identity/annihilator
    // rules only, so evaluation of the result is bit-identical wherever the
    // unsimplified tree evaluates without error.

    pub fn add(&self, rhs: &ScalarField) -> ScalarField {
        match (self.as_const(), rhs.as_const()) {
            (Some(a), Some(b)) => Self::constant(a + b),
            (Some(a), _) if a == 0.0 => rhs.clone(),
            (_, Some(b)) if b == 0.0 => self.clone(),
            _ => Self::new(Expr::Add(self.clone(), rhs.clone())),
        }
    }

    pub fn sub(&self, rhs: &ScalarField) -> ScalarField {
        match (self.as_const(), rhs.as_const()) {
            (Some(a), Some(b)) => Self::constant(a - b),
            (_, Some(b)) if b == 0.0 => self.clone(),
            (Some(a), _) if a == 0.0 => rhs.neg(),
            _ => Self::new(Expr::Sub(self.clone(), rhs.clone())),
        }
    }

    pub fn mul(&self, rhs: &ScalarField) -> ScalarField {
        match (self.as_const(), rhs.as_const()) {
            (Some(a), Some(b)) => Self::constant(a * b),
            (Some(a), _) if a == 0.0 => Self::zero(),
            (_, Some(b)) if b == 0.0 => Self::zero(),
            (Some(a), _) if a == 1.0 => rhs.clone(),
            (_, Some(b)) if b == 1.0 => self.clone(),
            (Some(a), _) if a == -1.0 => rhs.neg(),
            (_, Some(b)) if b == -1.0 => self.neg(),
            _ => Self::new(Expr::Mul(self.clone(), rhs.clone())),
        }
    }

    pub fn div(&self, rhs: &ScalarField) -> ScalarField {
        match (self.as_const(), rhs.as_const()) {
            (Some(a), Some(b)) if b != 0.0 => Self::constant(a / b),
            (_, Some(b)) if b == 1.0 => self.clone(),
            (Some(a), _) if a == 0.0 => Self::zero(),
            _ => Self::new(Expr::Div(self.clone(), rhs.clone())),
        }
    }

    pub fn neg(&self) -> ScalarField {
        match self.expr() {
            Expr::Const(c) => Self::constant(-c),
            Expr::Neg(inner) => inner.clone(),
            _ => Self::new(Expr::Neg(self.clone())),
        }
    }

    pub fn powi(&self, n: i32) -> ScalarField {
        match (n, self.as_const()) {
            (0, _) => Self::one(),
            (1, _) => self.clone(),
            (_, Some(c)) if c != 0.0 || n > 0 => Self::constant(c.powi(n)),
            _ => Self::new(Expr::Pow(self.clone(), n)),
        }
    }

    pub fn call(f: Func, arg: &ScalarField) -> ScalarField {
        match arg.as_const() {
            Some(c) => Self::constant(f.apply(c)),
            None => Self::new(Expr::Call(f, arg.clone())),
        }
    }

    pub fn sin(&self) -> ScalarField {
        Self::call(Func::Sin, self)
    }

    pub fn cos(&self) -> ScalarField {
        Self::call(Func::Cos, self)
    }

    pub fn exp(&self) -> ScalarField {
        Self::call(Func::Exp, self)
    }

    pub fn pos(&self) -> ScalarField {
        Self::call(Func::Pos, self)
    }

    /// Evaluates the field at `x` in IEEE double precision.
    pub fn eval(&self, x: &[f64; 3]) -> Result<f64, EvalError> {
        Ok(match self.expr() {
            Expr::Const(c) => *c,
            Expr::Var(v) => x[v.index()],
            Expr::Neg(a) => -a.eval(x)?,
            Expr::Add(a, b) => a.eval(x)? + b.eval(x)?,
            Expr::Sub(a, b) => a.eval(x)? - b.eval(x)?,
            Expr::Mul(a, b) => a.eval(x)? * b.eval(x)?,
            Expr::Div(a, b) => {
                let num = a.eval(x)?;
                let den = b.eval(x)?;
                if den == 0.0 {
                    return Err(EvalError::DivisionByZero);
                }
                num / den
            }
            Expr::Pow(a, n) => {
                let base = a.eval(x)?;
                if base == 0.0 && *n < 0 {
                    return Err(EvalError::DivisionByZero);
                }
                base.powi(*n)
            }
            Expr::Call(f, a) => f.apply(a.eval(x)?),
        })
    }

    /// Exact partial derivative with respect to `v`.
    pub fn differentiate(&self, v: Var) -> ScalarField {
        match self.expr() {
            Expr::Const(_) => Self::zero(),
            Expr::Var(w) => {
                if *w == v {
                    Self::one()
                } else {
                    Self::zero()
                }
            }
            Expr::Neg(a) => a.differentiate(v).neg(),
            Expr::Add(a, b) => a.differentiate(v).add(&b.differentiate(v)),
            Expr::Sub(a, b) => a.differentiate(v).sub(&b.differentiate(v)),
            Expr::Mul(a, b) => {
                let da = a.differentiate(v);
                let db = b.differentiate(v);
                da.mul(b).add(&a.mul(&db))
            }
            Expr::Div(a, b) => {
                let da = a.differentiate(v);
                let db = b.differentiate(v);
                da.mul(b).sub(&a.mul(&db)).div(&b.powi(2))
            }
            Expr::Pow(a, n) => {
                let da = a.differentiate(v);
                Self::constant(f64::from(*n))
                    .mul(&a.powi(n - 1))
                    .mul(&da)
            }
            Expr::Call(f, a) => {
                let da = a.differentiate(v);
                let outer = match f {
                    Func::Sin => a.cos(),
                    Func::Cos => a.sin().neg(),
                    Func::Exp => self.clone(),
                    Func::Pos => Self::call(Func::Step, a),
                    Func::Step => Self::zero(),
                };
                outer.mul(&da)
            }
        }
    }

    pub fn gradient(&self) -> [ScalarField; 3] {
        Var::ALL.map(|v| self.differentiate(v))
    }

    /// Whether `v` occurs anywhere in the tree.
    pub fn depends_on(&self, v: Var) -> bool {
        match self.expr() {
            Expr::Const(_) => false,
            Expr::Var(w) => *w == v,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.depends_on(v),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.depends_on(v) || b.depends_on(v)
            }
        }
    }

    /// Number of nodes, counting shared subtrees once per occurrence.
    pub fn size(&self) -> usize {
        match self.expr() {
            Expr::Const(_) | Expr::Var(_) => 1,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => 1 + a.size(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                1 + a.size() + b.size()
            }
        }
    }

    /// Prefix form, e.g. `(add (mul x2 x3) 1)`.
    pub fn to_sexpr(&self) -> String {
        match self.expr() {
            Expr::Const(c) => format_number(*c),
            Expr::Var(v) => v.name().to_string(),
            Expr::Neg(a) => format!("(neg {})", a.to_sexpr()),
            Expr::Add(a, b) => format!("(add {} {})", a.to_sexpr(), b.to_sexpr()),
            Expr::Sub(a, b) => format!("(sub {} {})", a.to_sexpr(), b.to_sexpr()),
            Expr::Mul(a, b) => format!("(mul {} {})", a.to_sexpr(), b.to_sexpr()),
            Expr::Div(a, b) => format!("(div {} {})", a.to_sexpr(), b.to_sexpr()),
            Expr::Pow(a, n) => format!("(pow {} {})", a.to_sexpr(), n),
            Expr::Call(f, a) => format!("({} {})", f.name(), a.to_sexpr()),
        }
    }

    fn precedence(&self) -> u8 {
        match self.expr() {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(_) => 3,
            Expr::Pow(..) => 4,
            Expr::Const(_) | Expr::Var(_) | Expr::Call(..) => 5,
        }
    }

    fn write_child(&self, f: &mut fmt::Formatter<'_>, needs_parens: bool) -> fmt::Result {
        if needs_parens {
            write!(f, "({self})")
        } else {
            write!(f, "{self}")
        }
    }
}

/// Shortest representation that parses back to the same double.
fn format_number(c: f64) -> String {
    format!("{c:?}")
}

impl fmt::Display for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let binary = |f: &mut fmt::Formatter<'_>, a: &ScalarField, op: &str, b: &ScalarField, p| {
            a.write_child(f, a.precedence() < p)?;
            write!(f, " {op} ")?;
            b.write_child(f, b.precedence() <= p)
        };
        match self.expr() {
            Expr::Const(c) if c.is_sign_negative() => write!(f, "(-{})", format_number(-c)),
            Expr::Const(c) => f.write_str(&format_number(*c)),
            Expr::Var(v) => f.write_str(v.name()),
            Expr::Neg(a) => {
                f.write_str("-")?;
                a.write_child(f, a.precedence() < 3)
            }
            Expr::Add(a, b) => binary(f, a, "+", b, 1),
            Expr::Sub(a, b) => binary(f, a, "-", b, 1),
            Expr::Mul(a, b) => binary(f, a, "*", b, 2),
            Expr::Div(a, b) => binary(f, a, "/", b, 2),
            Expr::Pow(a, n) => {
                a.write_child(f, a.precedence() < 5)?;
                write!(f, "^{n}")
            }
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ScalarField({self})")
    }
}

impl std::str::FromStr for ScalarField {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_expr(s)
    }
}

/// Parses `text` according to the module-level grammar.
pub fn parse_expr(text: &str) -> Result<ScalarField, ParseError> {
    let mut parser = Parser {
        src: text.as_bytes(),
        pos: 0,
    };
    let field = parser.expr()?;
    parser.skip_ws();
    if parser.pos < parser.src.len() {
        return Err(parser.syntax("unexpected trailing input"));
    }
    Ok(field)
}

struct Parser<'a> {
    src: &'a [u8],
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

    fn syntax(&self, message: &str) -> ParseError {
        ParseError::Syntax {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), ParseError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.syntax(&format!("expected `{}`", c as char)))
        }
    }

    fn expr(&mut self) -> Result<ScalarField, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = ScalarField::new(Expr::Add(lhs, rhs));
                }
                Some(b'-') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = ScalarField::new(Expr::Sub(lhs, rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<ScalarField, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = ScalarField::new(Expr::Mul(lhs, rhs));
                }
                Some(b'/') => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = ScalarField::new(Expr::Div(lhs, rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<ScalarField, ParseError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            let inner = self.unary()?;
            return Ok(ScalarField::new(Expr::Neg(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<ScalarField, ParseError> {
        let base = self.primary()?;
        if self.peek() != Some(b'^') {
            return Ok(base);
        }
        self.pos += 1;
        let negative = if self.peek() == Some(b'-') {
            self.pos += 1;
            true
        } else {
            false
        };
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.syntax("expected integer exponent"));
        }
        if matches!(self.src.get(self.pos), Some(b'.' | b'e' | b'E')) {
            return Err(self.syntax("exponent must be an integer"));
        }
        let digits = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii digits");
        let magnitude: i32 = digits.parse().map_err(|_| ParseError::Syntax {
            offset: start,
            message: "exponent out of range".to_string(),
        })?;
        let n = if negative { -magnitude } else { magnitude };
        Ok(ScalarField::new(Expr::Pow(base, n)))
    }

    fn primary(&mut self) -> Result<ScalarField, ParseError> {
        match self.peek() {
            None => Err(self.syntax("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect(b')')?;
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.identifier(),
            Some(c) => Err(self.syntax(&format!("unexpected character `{}`", c as char))),
        }
    }

    fn number(&mut self) -> Result<ScalarField, ParseError> {
        let start = self.pos;
        let digits = |p: &mut Self| {
            let s = p.pos;
            while p.pos < p.src.len() && p.src[p.pos].is_ascii_digit() {
                p.pos += 1;
            }
            p.pos - s
        };
        let int_digits = digits(self);
        let mut frac_digits = 0;
        if self.src.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            frac_digits = digits(self);
        }
        if int_digits + frac_digits == 0 {
            return Err(ParseError::Syntax {
                offset: start,
                message: "malformed number".to_string(),
            });
        }
        if matches!(self.src.get(self.pos), Some(b'e' | b'E')) {
            self.pos += 1;
            if matches!(self.src.get(self.pos), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if digits(self) == 0 {
                return Err(self.syntax("malformed exponent"));
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii number");
        let value: f64 = text.parse().map_err(|_| ParseError::Syntax {
            offset: start,
            message: format!("malformed number `{text}`"),
        })?;
        Ok(ScalarField::constant(value))
    }

    fn identifier(&mut self) -> Result<ScalarField, ParseError> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii identifier");
        match name {
            "x1" => return Ok(ScalarField::var(Var::X1)),
            "x2" => return Ok(ScalarField::var(Var::X2)),
            "x3" => return Ok(ScalarField::var(Var::X3)),
            _ => {}
        }
        let Some(func) = Func::from_name(name) else {
            return Err(ParseError::UnknownIdentifier {
                offset: start,
                name: name.to_string(),
            });
        };
        self.expect(b'(')?;
        let arg = self.expr()?;
        self.expect(b')')?;
        Ok(ScalarField::new(Expr::Call(func, arg)))
    }
}

/// Random fields over the smooth part of the grammar (no `pos`/`step`).
///
/// Division only ever happens by `1 + g²`, and `exp` is only applied to
/// bounded arguments, so the generated fields are finite and well conditioned
/// on `|x| ≤ 2`. Used by property tests and benchmarks.
pub mod random {
    use super::{ScalarField, Var};
    use rand::Rng;

    pub fn random_field<R: Rng + ?Sized>(rng: &mut R, depth: usize, vars: &[Var]) -> ScalarField {
        if depth == 0 || rng.gen_bool(0.2) {
            return leaf(rng, vars);
        }
        let d = depth - 1;
        match rng.gen_range(0..9) {
            0 => random_field(rng, d, vars).add(&random_field(rng, d, vars)),
            1 => random_field(rng, d, vars).sub(&random_field(rng, d, vars)),
            2 | 3 => random_field(rng, d, vars).mul(&random_field(rng, d, vars)),
            4 => {
                let den = random_field(rng, d, vars);
                random_field(rng, d, vars).div(&ScalarField::one().add(&den.powi(2)))
            }
            5 => leaf(rng, vars).powi(rng.gen_range(2..=3)),
            6 => random_field(rng, d, vars).sin(),
            7 => random_field(rng, d, vars).cos(),
            _ => random_field(rng, d, vars).sin().exp(),
        }
    }

    fn leaf<R: Rng + ?Sized>(rng: &mut R, vars: &[Var]) -> ScalarField {
        if vars.is_empty() || rng.gen_bool(0.3) {
            let c: f64 = rng.gen_range(-2.0..2.0);
            ScalarField::constant((c * 8.0).round() / 8.0)
        } else {
            ScalarField::var(vars[rng.gen_range(0..vars.len())])
        }
    }
}
