//! Scalar expression language over lagged samples.
//!
//! Component maps are written as plain arithmetic over `x[j]`, the value `j`
//! samples back in time (`x[1]` is the most recent one). Grammar:
//!
//! ```text
//! expr     = term { ("+" | "-") term } ;
//! term     = unary { ("*" | "/") unary } ;
//! unary    = "-" unary | power ;
//! power    = primary { "^" exponent } ;
//! exponent = "-" exponent | primary ;
//! primary  = number | lag | func "(" expr ")" | "(" expr ")" ;
//! lag      = "x" "[" digits "]" ;
//! func     = "abs" | "sin" | "cos" | "exp" | "sqrt" ;
//! number   = digits [ "." [ digits ] ] [ exp ] | "." digits [ exp ] ;
//! exp      = ("e" | "E") [ "+" | "-" ] digits ;
//! ```
//!
//! `^` binds tighter than unary minus, so `-2^2` is `-4`. All binary
//! operators, `^` included, associate to the left.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Abs,
    Sin,
    Cos,
    Exp,
    Sqrt,
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "-",
            UnaryOp::Abs => "abs",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Exp => "exp",
            UnaryOp::Sqrt => "sqrt",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "abs" => UnaryOp::Abs,
            "sin" => UnaryOp::Sin,
            "cos" => UnaryOp::Cos,
            "exp" => UnaryOp::Exp,
            "sqrt" => UnaryOp::Sqrt,
            _ => return None,
        })
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
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Pow => "^",
        }
    }
}

/// Expression tree node.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    /// `x[j]`, one-based lag.
    Lag(usize),
    Unary(UnaryOp, Box<Node>),
    Binary(BinaryOp, Box<Node>, Box<Node>),
}

impl Node {
    pub fn constant(value: f64) -> Self {
        Node::Const(value)
    }

    pub fn lag(j: usize) -> Self {
        Node::Lag(j)
    }

    pub fn unary(op: UnaryOp, arg: Node) -> Self {
        Node::Unary(op, Box::new(arg))
    }

    pub fn binary(op: BinaryOp, lhs: Node, rhs: Node) -> Self {
        Node::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    /// Largest lag index referenced, 0 for constant trees.
    pub fn max_lag(&self) -> usize {
        match self {
            Node::Const(_) => 0,
            Node::Lag(j) => *j,
            Node::Unary(_, a) => a.max_lag(),
            Node::Binary(_, a, b) => a.max_lag().max(b.max_lag()),
        }
    }

    fn eval(&self, history: &[f64]) -> Result<f64, EvalError> {
        let value = match self {
            Node::Const(c) => *c,
            Node::Lag(j) => history[*j - 1],
            Node::Unary(op, a) => {
                let v = a.eval(history)?;
                match op {
                    UnaryOp::Neg => -v,
                    UnaryOp::Abs => v.abs(),
                    UnaryOp::Sin => v.sin(),
                    UnaryOp::Cos => v.cos(),
                    UnaryOp::Exp => v.exp(),
                    UnaryOp::Sqrt => {
                        if v < 0.0 {
                            return Err(self.domain(DomainKind::SqrtOfNegative, vec![v]));
                        }
                        v.sqrt()
                    }
                }
            }
            Node::Binary(op, a, b) => {
                let lhs = a.eval(history)?;
                let rhs = b.eval(history)?;
                match op {
                    BinaryOp::Add => lhs + rhs,
                    BinaryOp::Sub => lhs - rhs,
                    BinaryOp::Mul => lhs * rhs,
                    BinaryOp::Div => {
                        if rhs == 0.0 {
                            return Err(self.domain(DomainKind::DivisionByZero, vec![lhs, rhs]));
                        }
                        lhs / rhs
                    }
                    BinaryOp::Pow => {
                        if lhs < 0.0 && rhs.fract() != 0.0 {
                            return Err(self.domain(DomainKind::NegativeBaseFractionalPower, vec![lhs, rhs]));
                        }
                        lhs.powf(rhs)
                    }
                }
            }
        };
        if value.is_finite() {
            Ok(value)
        } else {
            let operands = match self {
                Node::Const(c) => vec![*c],
                Node::Lag(j) => vec![history[*j - 1]],
                _ => vec![value],
            };
            Err(self.domain(DomainKind::NonFinite, operands))
        }
    }

    fn domain(&self, kind: DomainKind, operands: Vec<f64>) -> EvalError {
        EvalError::Domain {
            kind,
            node: self.to_string(),
            operands,
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Const(c) if c.is_sign_negative() => write!(f, "(-{})", -c),
            Node::Const(c) => write!(f, "{c}"),
            Node::Lag(j) => write!(f, "x[{j}]"),
            Node::Unary(UnaryOp::Neg, a) => write!(f, "(-{a})"),
            Node::Unary(op, a) => write!(f, "{}({a})", op.name()),
            Node::Binary(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainKind {
    DivisionByZero,
    SqrtOfNegative,
    NegativeBaseFractionalPower,
    NonFinite,
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainKind::DivisionByZero => "division by zero",
            DomainKind::SqrtOfNegative => "square root of a negative number",
            DomainKind::NegativeBaseFractionalPower => "fractional power of a negative base",
            DomainKind::NonFinite => "non-finite value",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("empty expression")]
    Empty,
    #[error("declared order must be at least 1")]
    ZeroOrder,
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("x[{lag}] at byte {offset} is out of range for declared order {order}")]
    LagOutOfRange { lag: usize, order: usize, offset: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("history has {got} values but the expression has order {expected}")]
    HistoryLength { expected: usize, got: usize },
    #[error("{kind} in `{node}` (operands {operands:?})")]
    Domain {
        kind: DomainKind,
        node: String,
        operands: Vec<f64>,
    },
}

impl EvalError {
    pub fn is_non_finite(&self) -> bool {
        matches!(
            self,
            EvalError::Domain {
                kind: DomainKind::NonFinite,
                ..
            }
        )
    }
}

/// A parsed expression together with the order it was declared with.
#[derive(Debug, Clone, PartialEq)]
pub struct LaggedExpr {
    root: Node,
    order: usize,
}

impl LaggedExpr {
    /// Wraps a tree, checking every lag against `order`.
    pub fn new(root: Node, order: usize) -> Result<Self, ParseError> {
        if order == 0 {
            return Err(ParseError::ZeroOrder);
        }
        let lag = root.max_lag();
        if lag > order {
            return Err(ParseError::LagOutOfRange {
                lag,
                order,
                offset: 0,
            });
        }
        Ok(Self { root, order })
    }

    pub fn parse(text: &str, order: usize) -> Result<Self, ParseError> {
        if order == 0 {
            return Err(ParseError::ZeroOrder);
        }
        let tokens = lex(text)?;
        if tokens.len() == 1 {
            return Err(ParseError::Empty);
        }
        let mut parser = Parser {
            tokens: &tokens,
            pos: 0,
            order,
        };
        let root = parser.expr()?;
        let next = parser.peek();
        if next.kind != Tok::End {
            return Err(ParseError::Syntax {
                offset: next.offset,
                message: format!("unexpected {}", next.kind.describe()),
            });
        }
        Ok(Self { root, order })
    }

    /// Identically zero map of the given order.
    pub fn zero(order: usize) -> Self {
        Self {
            root: Node::Const(0.0),
            order: order.max(1),
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    /// `history[j - 1]` supplies `x[j]`.
    pub fn evaluate(&self, history: &[f64]) -> Result<f64, EvalError> {
        if history.len() != self.order {
            return Err(EvalError::HistoryLength {
                expected: self.order,
                got: history.len(),
            });
        }
        self.root.eval(history)
    }

    /// Evaluates on the leading `order` entries of a longer state.
    pub fn evaluate_prefix(&self, state: &[f64]) -> Result<f64, EvalError> {
        if state.len() < self.order {
            return Err(EvalError::HistoryLength {
                expected: self.order,
                got: state.len(),
            });
        }
        self.root.eval(&state[..self.order])
    }

    /// Canonical, fully parenthesized text.
    pub fn print(&self) -> String {
        self.root.to_string()
    }
}

impl fmt::Display for LaggedExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    LBracket,
    RBracket,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Slash => "`/`".into(),
            Tok::Caret => "`^`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::LBracket => "`[`".into(),
            Tok::RBracket => "`]`".into(),
            Tok::End => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: Tok,
    offset: usize,
}

fn lex(text: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let kind = match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' => Tok::Plus,
            b'-' => Tok::Minus,
            b'*' => Tok::Star,
            b'/' => Tok::Slash,
            b'^' => Tok::Caret,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b'[' => Tok::LBracket,
            b']' => Tok::RBracket,
            b'0'..=b'9' | b'.' => {
                i = scan_number(bytes, i)?;
                let slice = &text[start..i];
                let value = slice.parse::<f64>().map_err(|_| ParseError::Syntax {
                    offset: start,
                    message: format!("malformed number `{slice}`"),
                })?;
                if !value.is_finite() {
                    return Err(ParseError::Syntax {
                        offset: start,
                        message: format!("number `{slice}` overflows"),
                    });
                }
                tokens.push(Token {
                    kind: Tok::Num(value),
                    offset: start,
                });
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                tokens.push(Token {
                    kind: Tok::Ident(text[start..i].to_string()),
                    offset: start,
                });
                continue;
            }
            _ => {
                let ch = text[start..].chars().next().unwrap_or('?');
                return Err(ParseError::Syntax {
                    offset: start,
                    message: format!("unexpected character `{ch}`"),
                });
            }
        };
        i += 1;
        tokens.push(Token { kind, offset: start });
    }
    tokens.push(Token {
        kind: Tok::End,
        offset: bytes.len(),
    });
    Ok(tokens)
}

fn scan_number(bytes: &[u8], mut i: usize) -> Result<usize, ParseError> {
    let start = i;
    let digits = |i: &mut usize| {
        let s = *i;
        while *i < bytes.len() && bytes[*i].is_ascii_digit() {
            *i += 1;
        }
        *i - s
    };
    let int_digits = digits(&mut i);
    let mut frac_digits = 0;
    if i < bytes.len() && bytes[i] == b'.' {
        i += 1;
        frac_digits = digits(&mut i);
    }
    if int_digits + frac_digits == 0 {
        return Err(ParseError::Syntax {
            offset: start,
            message: "expected digits".into(),
        });
    }
    if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
        let exp_at = i;
        i += 1;
        if i < bytes.len() && (bytes[i] == b'+' || bytes[i] == b'-') {
            i += 1;
        }
        if digits(&mut i) == 0 {
            return Err(ParseError::Syntax {
                offset: exp_at,
                message: "expected exponent digits".into(),
            });
        }
    }
    Ok(i)
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    order: usize,
}

impl Parser<'_> {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn bump(&mut self) -> &Token {
        let tok = &self.tokens[self.pos];
        if tok.kind != Tok::End {
            self.pos += 1;
        }
        tok
    }

    fn expect(&mut self, kind: Tok) -> Result<(), ParseError> {
        let tok = self.peek();
        if tok.kind == kind {
            self.bump();
            Ok(())
        } else {
            Err(ParseError::Syntax {
                offset: tok.offset,
                message: format!("expected {}, found {}", kind.describe(), tok.kind.describe()),
            })
        }
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().kind {
                Tok::Plus => BinaryOp::Add,
                Tok::Minus => BinaryOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            lhs = Node::binary(op, lhs, self.term()?);
        }
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().kind {
                Tok::Star => BinaryOp::Mul,
                Tok::Slash => BinaryOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            lhs = Node::binary(op, lhs, self.unary()?);
        }
    }

    fn unary(&mut self) -> Result<Node, ParseError> {
        if self.peek().kind == Tok::Minus {
            self.bump();
            return Ok(Node::unary(UnaryOp::Neg, self.unary()?));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ParseError> {
        let mut base = self.primary()?;
        while self.peek().kind == Tok::Caret {
            self.bump();
            base = Node::binary(BinaryOp::Pow, base, self.exponent()?);
        }
        Ok(base)
    }

    fn exponent(&mut self) -> Result<Node, ParseError> {
        if self.peek().kind == Tok::Minus {
            self.bump();
            return Ok(Node::unary(UnaryOp::Neg, self.exponent()?));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Node, ParseError> {
        let tok = self.bump().clone();
        match tok.kind {
            Tok::Num(v) => Ok(Node::Const(v)),
            Tok::LParen => {
                let inner = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(inner)
            }
            Tok::Ident(name) if name == "x" => {
                self.expect(Tok::LBracket)?;
                let idx = self.bump().clone();
                let lag = match idx.kind {
                    Tok::Num(v) if v >= 1.0 && v.fract() == 0.0 && v <= usize::MAX as f64 => v as usize,
                    other => {
                        return Err(ParseError::Syntax {
                            offset: idx.offset,
                            message: format!(
                                "lag index must be a positive integer, found {}",
                                other.describe()
                            ),
                        })
                    }
                };
                self.expect(Tok::RBracket)?;
                if lag > self.order {
                    return Err(ParseError::LagOutOfRange {
                        lag,
                        order: self.order,
                        offset: tok.offset,
                    });
                }
                Ok(Node::Lag(lag))
            }
            Tok::Ident(name) => match UnaryOp::from_name(&name) {
                Some(op) => {
                    self.expect(Tok::LParen)?;
                    let arg = self.expr()?;
                    self.expect(Tok::RParen)?;
                    Ok(Node::unary(op, arg))
                }
                None => Err(ParseError::Syntax {
                    offset: tok.offset,
                    message: format!("unknown identifier `{name}`"),
                }),
            },
            other => Err(ParseError::Syntax {
                offset: tok.offset,
                message: format!("expected an operand, found {}", other.describe()),
            }),
        }
    }
}
