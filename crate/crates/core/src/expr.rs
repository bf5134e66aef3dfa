//! The expression language used by manipulate bodies, guards and call parameters.
//!
//! Values are 64-bit integers, booleans, strings and null. Arithmetic is
//! integer-only: division truncates toward zero and the remainder takes the
//! sign of the dividend. `&&` and `||` short-circuit.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A runtime value.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Null,
    Boolean(bool),
    Integer(i64),
    String(String),
}

impl Value {
    pub fn kind(&self) -> &'static str {
        match self {
            Value::Null => "null",
            Value::Boolean(_) => "boolean",
            Value::Integer(_) => "integer",
            Value::String(_) => "string",
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Boolean(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Integer(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::String(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => f.write_str("null"),
            Value::Boolean(b) => write!(f, "{b}"),
            Value::Integer(i) => write!(f, "{i}"),
            Value::String(s) => write_string_literal(f, s),
        }
    }
}

pub(crate) fn write_string_literal(f: &mut impl fmt::Write, s: &str) -> fmt::Result {
    f.write_char('"')?;
    for c in s.chars() {
        match c {
            '"' => f.write_str("\\\"")?,
            '\\' => f.write_str("\\\\")?,
            '\n' => f.write_str("\\n")?,
            '\t' => f.write_str("\\t")?,
            c => f.write_char(c)?,
        }
    }
    f.write_char('"')
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Integer(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Boolean(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::String(v.to_owned())
    }
}

/// Name → value bindings, the shape of a context snapshot.
pub type Values = BTreeMap<String, Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Not,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    And,
    Or,
}

impl BinaryOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Rem => "%",
            BinaryOp::Eq => "==",
            BinaryOp::Ne => "!=",
            BinaryOp::Lt => "<",
            BinaryOp::Le => "<=",
            BinaryOp::Gt => ">",
            BinaryOp::Ge => ">=",
            BinaryOp::And => "&&",
            BinaryOp::Or => "||",
        }
    }

    /// Binding power; higher binds tighter.
    pub(crate) fn precedence(self) -> u8 {
        match self {
            BinaryOp::Or => 1,
            BinaryOp::And => 2,
            BinaryOp::Eq | BinaryOp::Ne => 3,
            BinaryOp::Lt | BinaryOp::Le | BinaryOp::Gt | BinaryOp::Ge => 4,
            BinaryOp::Add | BinaryOp::Sub => 5,
            BinaryOp::Mul | BinaryOp::Div | BinaryOp::Rem => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Literal(Value),
    Var(String),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    /// Parses a standalone expression (guards in handler scripts, for instance).
    pub fn parse(source: &str) -> Result<Expr, crate::dsl::ParseError> {
        crate::dsl::parse_expression(source)
    }

    pub fn int(v: i64) -> Expr {
        Expr::Literal(Value::Integer(v))
    }

    pub fn var(name: &str) -> Expr {
        Expr::Var(name.to_owned())
    }

    pub fn binary(op: BinaryOp, l: Expr, r: Expr) -> Expr {
        Expr::Binary(op, Box::new(l), Box::new(r))
    }

    /// Every variable name referenced, in first-occurrence order.
    pub fn variables(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Expr::Literal(_) => {}
            Expr::Var(name) => {
                if !out.contains(&name.as_str()) {
                    out.push(name);
                }
            }
            Expr::Unary(_, e) => e.collect_vars(out),
            Expr::Binary(_, l, r) => {
                l.collect_vars(out);
                r.collect_vars(out);
            }
        }
    }
}

impl fmt::Display for Expr {
    /// Canonical form: nested operator expressions are parenthesised so the
    /// printed text reparses to the same tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn operand(f: &mut fmt::Formatter<'_>, e: &Expr) -> fmt::Result {
            match e {
                Expr::Binary(..) => write!(f, "({e})"),
                _ => write!(f, "{e}"),
            }
        }
        match self {
            Expr::Literal(v) => write!(f, "{v}"),
            Expr::Var(name) => f.write_str(name),
            Expr::Unary(op, e) => {
                f.write_str(match op {
                    UnaryOp::Not => "!",
                    UnaryOp::Neg => "-",
                })?;
                match **e {
                    Expr::Binary(..) | Expr::Unary(..) => write!(f, "({e})"),
                    Expr::Literal(Value::Integer(i)) if i < 0 => write!(f, "({e})"),
                    _ => write!(f, "{e}"),
                }
            }
            Expr::Binary(op, l, r) => {
                operand(f, l)?;
                write!(f, " {} ", op.symbol())?;
                operand(f, r)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("unbound variable `{0}`")]
    Unbound(String),
    #[error("type mismatch: `{op}` applied to {found}")]
    TypeMismatch { op: &'static str, found: String },
    #[error("division by zero")]
    DivisionByZero,
    #[error("integer overflow in `{0}`")]
    Overflow(&'static str),
    #[error("assignment to undeclared variable `{0}`")]
    Undeclared(String),
}

/// Read-only view of variable bindings.
pub trait Bindings {
    fn lookup(&self, name: &str) -> Option<&Value>;
}

impl Bindings for Values {
    fn lookup(&self, name: &str) -> Option<&Value> {
        self.get(name)
    }
}

impl<B: Bindings + ?Sized> Bindings for &B {
    fn lookup(&self, name: &str) -> Option<&Value> {
        (**self).lookup(name)
    }
}

pub fn eval(expr: &Expr, env: &impl Bindings) -> Result<Value, EvalError> {
    match expr {
        Expr::Literal(v) => Ok(v.clone()),
        Expr::Var(name) => env.lookup(name).cloned().ok_or_else(|| EvalError::Unbound(name.clone())),
        Expr::Unary(op, e) => {
            let v = eval(e, env)?;
            match (op, v) {
                (UnaryOp::Not, Value::Boolean(b)) => Ok(Value::Boolean(!b)),
                (UnaryOp::Neg, Value::Integer(i)) => {
                    i.checked_neg().map(Value::Integer).ok_or(EvalError::Overflow("-"))
                }
                (UnaryOp::Not, v) => Err(mismatch("!", &[&v])),
                (UnaryOp::Neg, v) => Err(mismatch("-", &[&v])),
            }
        }
        Expr::Binary(BinaryOp::And, l, r) => match eval(l, env)? {
            Value::Boolean(false) => Ok(Value::Boolean(false)),
            Value::Boolean(true) => match eval(r, env)? {
                b @ Value::Boolean(_) => Ok(b),
                v => Err(mismatch("&&", &[&Value::Boolean(true), &v])),
            },
            v => Err(mismatch("&&", &[&v])),
        },
        Expr::Binary(BinaryOp::Or, l, r) => match eval(l, env)? {
            Value::Boolean(true) => Ok(Value::Boolean(true)),
            Value::Boolean(false) => match eval(r, env)? {
                b @ Value::Boolean(_) => Ok(b),
                v => Err(mismatch("||", &[&Value::Boolean(false), &v])),
            },
            v => Err(mismatch("||", &[&v])),
        },
        Expr::Binary(op, l, r) => {
            let l = eval(l, env)?;
            let r = eval(r, env)?;
            binary(*op, l, r)
        }
    }
}

fn mismatch(op: &'static str, operands: &[&Value]) -> EvalError {
    let found = operands.iter().map(|v| v.kind()).collect::<Vec<_>>().join(" and ");
    EvalError::TypeMismatch { op, found }
}

fn binary(op: BinaryOp, l: Value, r: Value) -> Result<Value, EvalError> {
    use BinaryOp::*;
    let sym = op.symbol();
    match op {
        Add | Sub | Mul | Div | Rem => {
            let (Value::Integer(a), Value::Integer(b)) = (&l, &r) else {
                return Err(mismatch(sym, &[&l, &r]));
            };
            let (a, b) = (*a, *b);
            let out = match op {
                Add => a.checked_add(b),
                Sub => a.checked_sub(b),
                Mul => a.checked_mul(b),
                Div | Rem if b == 0 => return Err(EvalError::DivisionByZero),
                // Rust's `/` and `%` already truncate toward zero.
                Div => a.checked_div(b),
                Rem => a.checked_rem(b),
                _ => unreachable!(),
            };
            out.map(Value::Integer).ok_or(EvalError::Overflow(sym))
        }
        Eq | Ne => {
            if l.kind() != r.kind() {
                return Err(mismatch(sym, &[&l, &r]));
            }
            Ok(Value::Boolean((l == r) == (op == Eq)))
        }
        Lt | Le | Gt | Ge => {
            let (Value::Integer(a), Value::Integer(b)) = (&l, &r) else {
                return Err(mismatch(sym, &[&l, &r]));
            };
            Ok(Value::Boolean(match op {
                Lt => a < b,
                Le => a <= b,
                Gt => a > b,
                Ge => a >= b,
                _ => unreachable!(),
            }))
        }
        And | Or => unreachable!("short-circuit operators are handled in eval"),
    }
}

/// One applied assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Change {
    pub name: String,
    pub old: Value,
    pub new: Value,
}

/// Applies `statements` left to right over a working copy of `values`. Each
/// statement sees the effects of the ones before it. On error nothing is
/// returned, so the caller has nothing partial to commit.
pub fn apply_assignments(statements: &[(String, Expr)], values: &Values) -> Result<Vec<Change>, EvalError> {
    let mut work = values.clone();
    let mut delta = Vec::with_capacity(statements.len());
    for (name, expr) in statements {
        let new = eval(expr, &work)?;
        let slot = work.get_mut(name).ok_or_else(|| EvalError::Undeclared(name.clone()))?;
        let old = std::mem::replace(slot, new.clone());
        delta.push(Change { name: name.clone(), old, new });
    }
    Ok(delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn env(pairs: &[(&str, Value)]) -> Values {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn ev(src: &str, e: &Values) -> Result<Value, EvalError> {
        eval(&Expr::parse(src).unwrap(), e)
    }

    #[test]
    fn literal_comparison() {
        assert_eq!(ev("3 > 2", &Values::new()), Ok(Value::Boolean(true)));
    }

    #[test]
    fn price_guard() {
        let e = env(&[("price", 12000.into())]);
        assert_eq!(ev("price > 10000", &e), Ok(true.into()));
        let e = env(&[("price", 10000.into())]);
        assert_eq!(ev("price > 10000", &e), Ok(false.into()));
    }

    #[test]
    fn parity_guard_matches_enumerated_table() {
        // (x mod 2 == 0, done) -> expected, written out by hand.
        let table = [
            (4, false, true),
            (4, true, false),
            (3, false, false),
            (3, true, false),
            (0, false, true),
            (-2, false, true),
            (-3, false, false),
        ];
        for (x, done, expected) in table {
            let e = env(&[("x", x.into()), ("done", done.into())]);
            assert_eq!(ev("x % 2 == 0 && !done", &e), Ok(expected.into()), "x={x} done={done}");
        }
    }

    #[test]
    fn truncating_division_and_dividend_signed_remainder() {
        let e = Values::new();
        assert_eq!(ev("7 / 2", &e), Ok(3.into()));
        assert_eq!(ev("-7 / 2", &e), Ok((-3).into()));
        assert_eq!(ev("7 / -2", &e), Ok((-3).into()));
        assert_eq!(ev("-7 % 2", &e), Ok((-1).into()));
        assert_eq!(ev("7 % -2", &e), Ok(1.into()));
    }

    #[test]
    fn errors() {
        let e = env(&[("s", "a".into()), ("b", true.into())]);
        assert_eq!(ev("1 / 0", &e), Err(EvalError::DivisionByZero));
        assert_eq!(ev("1 % 0", &e), Err(EvalError::DivisionByZero));
        assert_eq!(ev("y + 1", &e), Err(EvalError::Unbound("y".into())));
        assert!(matches!(ev("s + 1", &e), Err(EvalError::TypeMismatch { .. })));
        assert!(matches!(ev("s < \"b\"", &e), Err(EvalError::TypeMismatch { .. })));
        assert!(matches!(ev("1 == true", &e), Err(EvalError::TypeMismatch { .. })));
        assert!(matches!(ev("!1", &e), Err(EvalError::TypeMismatch { .. })));
        assert_eq!(ev("9223372036854775807 + 1", &e), Err(EvalError::Overflow("+")));
        assert_eq!(ev("s == \"a\"", &e), Ok(true.into()));
        assert_eq!(ev("null == null", &e), Ok(true.into()));
    }

    #[test]
    fn short_circuit_skips_unbound_rhs() {
        let e = env(&[("ok", false.into())]);
        assert_eq!(ev("ok && missing > 1", &e), Ok(false.into()));
        assert_eq!(ev("!ok || missing > 1", &e), Ok(true.into()));
        assert!(ev("ok || missing > 1", &e).is_err());
    }

    #[test]
    fn sequential_assignments() {
        let store = env(&[("x", 1.into()), ("y", 0.into())]);
        let stmts =
            vec![("x".to_string(), Expr::parse("x + 1").unwrap()), ("y".to_string(), Expr::parse("x * 2").unwrap())];
        let delta = apply_assignments(&stmts, &store).unwrap();
        assert_eq!(
            delta,
            vec![
                Change { name: "x".into(), old: 1.into(), new: 2.into() },
                Change { name: "y".into(), old: 0.into(), new: 4.into() },
            ]
        );
        assert!(apply_assignments(&[], &store).unwrap().is_empty());
    }

    #[test]
    fn failed_assignment_yields_no_delta() {
        let store = env(&[("x", 1.into())]);
        let stmts =
            vec![("x".to_string(), Expr::parse("5").unwrap()), ("x".to_string(), Expr::parse("1 / 0").unwrap())];
        assert_eq!(apply_assignments(&stmts, &store), Err(EvalError::DivisionByZero));
        let stmts = vec![("nope".to_string(), Expr::int(1))];
        assert_eq!(apply_assignments(&stmts, &store), Err(EvalError::Undeclared("nope".into())));
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf =
            prop_oneof![(-20i64..20).prop_map(Expr::int), prop_oneof![Just("x"), Just("y")].prop_map(Expr::var),];
        leaf.prop_recursive(3, 16, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|(l, r)| Expr::binary(BinaryOp::Add, l, r)),
                (inner.clone(), inner.clone()).prop_map(|(l, r)| Expr::binary(BinaryOp::Sub, l, r)),
                (inner.clone(), inner.clone()).prop_map(|(l, r)| Expr::binary(BinaryOp::Mul, l, r)),
                (inner.clone(), inner).prop_map(|(l, r)| Expr::binary(BinaryOp::Rem, l, r)),
            ]
        })
    }

    proptest! {
        // Reference interpreter: fold the assignments one at a time into a map.
        #[test]
        fn assignments_fold_left_to_right(
            stmts in proptest::collection::vec((prop_oneof![Just("x"), Just("y")], arb_expr()), 0..6),
            x in -10i64..10,
            y in -10i64..10,
        ) {
            let stmts: Vec<(String, Expr)> =
                stmts.into_iter().map(|(n, e)| (n.to_string(), e)).collect();
            let start = env(&[("x", x.into()), ("y", y.into())]);
            let mut reference = start.clone();
            let mut reference_err = None;
            for (name, e) in &stmts {
                match eval(e, &reference) {
                    Ok(v) => { reference.insert(name.clone(), v); }
                    Err(err) => { reference_err = Some(err); break; }
                }
            }
            match apply_assignments(&stmts, &start) {
                Ok(delta) => {
                    prop_assert!(reference_err.is_none());
                    let mut folded = start.clone();
                    for c in &delta {
                        prop_assert_eq!(folded.get(&c.name), Some(&c.old));
                        folded.insert(c.name.clone(), c.new.clone());
                    }
                    prop_assert_eq!(folded, reference);
                }
                Err(e) => prop_assert_eq!(Some(e), reference_err),
            }
        }

        #[test]
        fn eval_is_pure(e in arb_expr(), x in -10i64..10, y in -10i64..10) {
            let bindings = env(&[("x", x.into()), ("y", y.into())]);
            let before = bindings.clone();
            let a = eval(&e, &bindings);
            let b = eval(&e, &bindings);
            prop_assert_eq!(a, b);
            prop_assert_eq!(bindings, before);
        }

        #[test]
        fn display_reparses(e in arb_expr()) {
            prop_assert_eq!(Expr::parse(&e.to_string()).unwrap(), e);
        }
    }

    #[test]
    fn single_assignment_order() {
        let store = env(&[("x", 0.into())]);
        let stmts = vec![("x".to_string(), Expr::int(1)), ("x".to_string(), Expr::parse("x + 1").unwrap())];
        let delta = apply_assignments(&stmts, &store).unwrap();
        assert_eq!(delta.last().unwrap().new, Value::Integer(2));
    }
}
