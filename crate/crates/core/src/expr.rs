//! Scalar expressions: AST, typing, and row-at-a-time evaluation.
//!
//! SQL three-valued logic applies: comparisons with NULL yield NULL, AND/OR
//! follow Kleene semantics, and a WHERE clause keeps only rows where the
//! predicate is true (not NULL, not false). Division by zero yields NULL and
//! raises a warning counter instead of failing the statement.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::StableHasher;
use crate::value::{DataType, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    And,
    Or,
}

impl BinOp {
    pub fn is_comparison(self) -> bool {
        matches!(self, BinOp::Eq | BinOp::Ne | BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge)
    }

    pub fn sql(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Mod => "%",
            BinOp::Eq => "=",
            BinOp::Ne => "<>",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::And => "AND",
            BinOp::Or => "OR",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnaryOp {
    Neg,
    Not,
}

/// Built-in scalar functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Func {
    /// Stable 64-bit hash of the argument tuple; basis for segmentation.
    Hash,
    /// year*100 + month of a timestamp; the usual partition key.
    MonthYear,
    Abs,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Hash => "HASH",
            Func::MonthYear => "MONTH_YEAR",
            Func::Abs => "ABS",
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        match name.to_ascii_uppercase().as_str() {
            "HASH" => Some(Func::Hash),
            "MONTH_YEAR" => Some(Func::MonthYear),
            "ABS" => Some(Func::Abs),
            _ => None,
        }
    }
}

/// Scalar expression. `Column.index` is set by analysis; parsed expressions
/// start with `usize::MAX` (unresolved).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Column { name: String, index: usize },
    Literal(Value),
    Unary { op: UnaryOp, expr: Box<Expr> },
    Binary { left: Box<Expr>, op: BinOp, right: Box<Expr> },
    Func { func: Func, args: Vec<Expr> },
    IsNull { expr: Box<Expr>, negated: bool },
    InList { expr: Box<Expr>, list: Vec<Expr>, negated: bool },
}

pub const UNRESOLVED: usize = usize::MAX;

impl Expr {
    pub fn col(name: &str) -> Expr {
        Expr::Column { name: name.to_string(), index: UNRESOLVED }
    }

    pub fn col_at(name: &str, index: usize) -> Expr {
        Expr::Column { name: name.to_string(), index }
    }

    pub fn lit(v: Value) -> Expr {
        Expr::Literal(v)
    }

    pub fn bin(left: Expr, op: BinOp, right: Expr) -> Expr {
        Expr::Binary { left: Box::new(left), op, right: Box::new(right) }
    }

    /// All column indexes referenced by this expression.
    pub fn columns(&self, out: &mut Vec<usize>) {
        match self {
            Expr::Column { index, .. } => out.push(*index),
            Expr::Literal(_) => {}
            Expr::Unary { expr, .. } => expr.columns(out),
            Expr::Binary { left, right, .. } => {
                left.columns(out);
                right.columns(out);
            }
            Expr::Func { args, .. } => {
                for a in args {
                    a.columns(out);
                }
            }
            Expr::IsNull { expr, .. } => expr.columns(out),
            Expr::InList { expr, list, .. } => {
                expr.columns(out);
                for e in list {
                    e.columns(out);
                }
            }
        }
    }

    /// Rewrites column indexes through `map` (old index -> new index).
    pub fn remap_columns(&mut self, map: &dyn Fn(usize) -> usize) {
        match self {
            Expr::Column { index, .. } => *index = map(*index),
            Expr::Literal(_) => {}
            Expr::Unary { expr, .. } => expr.remap_columns(map),
            Expr::Binary { left, right, .. } => {
                left.remap_columns(map);
                right.remap_columns(map);
            }
            Expr::Func { args, .. } => {
                for a in args {
                    a.remap_columns(map);
                }
            }
            Expr::IsNull { expr, .. } => expr.remap_columns(map),
            Expr::InList { expr, list, .. } => {
                expr.remap_columns(map);
                for e in list {
                    e.remap_columns(map);
                }
            }
        }
    }

    /// Evaluates against a row. `warnings` counts soft errors (div by zero).
    pub fn eval(&self, row: &[Value], warnings: &mut u64) -> Result<Value> {
        match self {
            Expr::Column { index, name } => {
                if *index == UNRESOLVED {
                    return Err(Error::Exec(format!("unresolved column {name}")));
                }
                Ok(row[*index].clone())
            }
            Expr::Literal(v) => Ok(v.clone()),
            Expr::Unary { op, expr } => {
                let v = expr.eval(row, warnings)?;
                eval_unary(*op, v)
            }
            Expr::Binary { left, op, right } => {
                // Short-circuit forms first; they have NULL-tolerant rules.
                match op {
                    BinOp::And => {
                        let l = left.eval(row, warnings)?;
                        let r = right.eval(row, warnings)?;
                        Ok(kleene_and(truth(&l)?, truth(&r)?))
                    }
                    BinOp::Or => {
                        let l = left.eval(row, warnings)?;
                        let r = right.eval(row, warnings)?;
                        Ok(kleene_or(truth(&l)?, truth(&r)?))
                    }
                    _ => {
                        let l = left.eval(row, warnings)?;
                        let r = right.eval(row, warnings)?;
                        eval_binary(l, *op, r, warnings)
                    }
                }
            }
            Expr::Func { func, args } => {
                let mut vals = Vec::with_capacity(args.len());
                for a in args {
                    vals.push(a.eval(row, warnings)?);
                }
                eval_func(*func, &vals)
            }
            Expr::IsNull { expr, negated } => {
                let v = expr.eval(row, warnings)?;
                let isnull = v.is_null();
                Ok(Value::Bool(if *negated { !isnull } else { isnull }))
            }
            Expr::InList { expr, list, negated } => {
                let v = expr.eval(row, warnings)?;
                if v.is_null() {
                    return Ok(Value::Null);
                }
                let mut saw_null = false;
                for item in list {
                    let iv = item.eval(row, warnings)?;
                    if iv.is_null() {
                        saw_null = true;
                        continue;
                    }
                    if sql_eq(&v, &iv) == Some(true) {
                        return Ok(Value::Bool(!*negated));
                    }
                }
                if saw_null {
                    Ok(Value::Null)
                } else {
                    Ok(Value::Bool(*negated))
                }
            }
        }
    }

    /// Evaluates as a predicate: NULL and false both reject the row.
    pub fn eval_pred(&self, row: &[Value], warnings: &mut u64) -> Result<bool> {
        Ok(matches!(self.eval(row, warnings)?, Value::Bool(true)))
    }

    /// Evaluates to the unsigned 64-bit domain used for data placement.
    /// HASH() maps through the stable hash; plain integers reinterpret
    /// two's-complement. NULL maps to 0 so placement is still defined.
    pub fn eval_u64(&self, row: &[Value], warnings: &mut u64) -> Result<u64> {
        let v = self.eval(row, warnings)?;
        Ok(match v {
            Value::Null => 0,
            Value::Int(i) | Value::Timestamp(i) => i as u64,
            Value::Bool(b) => b as u64,
            Value::Float(f) => f.to_bits(),
            Value::Varchar(s) => Value::Varchar(s).stable_hash(),
        })
    }
}

fn eval_unary(op: UnaryOp, v: Value) -> Result<Value> {
    match op {
        UnaryOp::Neg => match v {
            Value::Null => Ok(Value::Null),
            Value::Int(i) => Ok(Value::Int(i.wrapping_neg())),
            Value::Float(f) => Ok(Value::Float(-f)),
            other => Err(Error::Type(format!("cannot negate {other:?}"))),
        },
        UnaryOp::Not => match truth(&v)? {
            Some(b) => Ok(Value::Bool(!b)),
            None => Ok(Value::Null),
        },
    }
}

/// SQL equality: NULL involvement handled by callers.
pub fn sql_eq(a: &Value, b: &Value) -> Option<bool> {
    if a.is_null() || b.is_null() {
        return None;
    }
    Some(a.total_cmp(b) == std::cmp::Ordering::Equal)
}

fn truth(v: &Value) -> Result<Option<bool>> {
    match v {
        Value::Null => Ok(None),
        Value::Bool(b) => Ok(Some(*b)),
        other => Err(Error::Type(format!("expected boolean, got {other:?}"))),
    }
}

fn kleene_and(a: Option<bool>, b: Option<bool>) -> Value {
    match (a, b) {
        (Some(false), _) | (_, Some(false)) => Value::Bool(false),
        (Some(true), Some(true)) => Value::Bool(true),
        _ => Value::Null,
    }
}

fn kleene_or(a: Option<bool>, b: Option<bool>) -> Value {
    match (a, b) {
        (Some(true), _) | (_, Some(true)) => Value::Bool(true),
        (Some(false), Some(false)) => Value::Bool(false),
        _ => Value::Null,
    }
}

fn eval_binary(l: Value, op: BinOp, r: Value, warnings: &mut u64) -> Result<Value> {
    if op.is_comparison() {
        if l.is_null() || r.is_null() {
            return Ok(Value::Null);
        }
        let ord = l.total_cmp(&r);
        let b = match op {
            BinOp::Eq => ord == std::cmp::Ordering::Equal,
            BinOp::Ne => ord != std::cmp::Ordering::Equal,
            BinOp::Lt => ord == std::cmp::Ordering::Less,
            BinOp::Le => ord != std::cmp::Ordering::Greater,
            BinOp::Gt => ord == std::cmp::Ordering::Greater,
            BinOp::Ge => ord != std::cmp::Ordering::Less,
            _ => unreachable!(),
        };
        return Ok(Value::Bool(b));
    }
    if l.is_null() || r.is_null() {
        return Ok(Value::Null);
    }
    // Arithmetic. Integer op integer stays integral; any float operand
    // promotes to float. Timestamps shift by integer amounts.
    use Value::*;
    let v = match (l, op, r) {
        (Int(a), BinOp::Add, Int(b)) => Int(a.wrapping_add(b)),
        (Int(a), BinOp::Sub, Int(b)) => Int(a.wrapping_sub(b)),
        (Int(a), BinOp::Mul, Int(b)) => Int(a.wrapping_mul(b)),
        (Int(a), BinOp::Div, Int(b)) => {
            if b == 0 {
                *warnings += 1;
                Null
            } else {
                Int(a.wrapping_div(b))
            }
        }
        (Int(a), BinOp::Mod, Int(b)) => {
            if b == 0 {
                *warnings += 1;
                Null
            } else {
                Int(a.wrapping_rem(b))
            }
        }
        (Timestamp(a), BinOp::Add, Int(b)) | (Int(b), BinOp::Add, Timestamp(a)) => {
            Timestamp(a.wrapping_add(b))
        }
        (Timestamp(a), BinOp::Sub, Int(b)) => Timestamp(a.wrapping_sub(b)),
        (Timestamp(a), BinOp::Sub, Timestamp(b)) => Int(a.wrapping_sub(b)),
        (a, op2, b) => {
            let (x, y) = match (a.as_f64(), b.as_f64()) {
                (Some(x), Some(y)) => (x, y),
                _ => return Err(Error::Type(format!("bad operands for {}", op2.sql()))),
            };
            match op2 {
                BinOp::Add => Float(x + y),
                BinOp::Sub => Float(x - y),
                BinOp::Mul => Float(x * y),
                BinOp::Div => {
                    if y == 0.0 {
                        *warnings += 1;
                        Null
                    } else {
                        Float(x / y)
                    }
                }
                BinOp::Mod => {
                    if y == 0.0 {
                        *warnings += 1;
                        Null
                    } else {
                        Float(x % y)
                    }
                }
                _ => unreachable!(),
            }
        }
    };
    Ok(v)
}

fn eval_func(func: Func, args: &[Value]) -> Result<Value> {
    match func {
        Func::Hash => {
            let mut h = StableHasher::new();
            for a in args {
                a.hash_into(&mut h);
            }
            Ok(Value::Int(h.finish() as i64))
        }
        Func::MonthYear => {
            let ts = match &args[0] {
                Value::Null => return Ok(Value::Null),
                Value::Timestamp(t) | Value::Int(t) => *t,
                other => return Err(Error::Type(format!("MONTH_YEAR expects timestamp, got {other:?}"))),
            };
            let (y, m, _d) = civil_from_unix(ts);
            Ok(Value::Int(y as i64 * 100 + m as i64))
        }
        Func::Abs => match &args[0] {
            Value::Null => Ok(Value::Null),
            Value::Int(i) => Ok(Value::Int(i.wrapping_abs())),
            Value::Float(f) => Ok(Value::Float(f.abs())),
            other => Err(Error::Type(format!("ABS expects numeric, got {other:?}"))),
        },
    }
}

/// Unix seconds to (year, month, day) in the proleptic Gregorian calendar.
pub fn civil_from_unix(ts: i64) -> (i32, u32, u32) {
    let days = ts.div_euclid(86_400);
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = if m <= 2 { y + 1 } else { y };
    (y as i32, m as u32, d as u32)
}

/// (year, month, day) to unix seconds at midnight.
pub fn unix_from_civil(y: i32, m: u32, d: u32) -> i64 {
    let y = y as i64 - if m <= 2 { 1 } else { 0 };
    let era = y.div_euclid(400);
    let yoe = y.rem_euclid(400);
    let m = m as i64;
    let d = d as i64;
    let mp = if m > 2 { m - 3 } else { m + 9 };
    let doy = (153 * mp + 2) / 5 + d - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    (era * 146_097 + doe - 719_468) * 86_400
}

/// Result type of an expression given input column types. `None` entries are
/// columns of unknown type (should not occur after analysis).
pub fn infer_type(expr: &Expr, input: &[DataType]) -> Result<Option<DataType>> {
    match expr {
        Expr::Column { index, name } => {
            if *index == UNRESOLVED || *index >= input.len() {
                return Err(Error::Type(format!("unresolved column {name}")));
            }
            Ok(Some(input[*index]))
        }
        Expr::Literal(v) => Ok(v.data_type()),
        Expr::Unary { op, expr } => {
            let t = infer_type(expr, input)?;
            match op {
                UnaryOp::Neg => match t {
                    Some(DataType::Int64) | Some(DataType::Float64) | None => Ok(t),
                    Some(other) => Err(Error::Type(format!("cannot negate {other}"))),
                },
                UnaryOp::Not => Ok(Some(DataType::Bool)),
            }
        }
        Expr::Binary { left, op, right } => {
            let lt = infer_type(left, input)?;
            let rt = infer_type(right, input)?;
            if op.is_comparison() || matches!(op, BinOp::And | BinOp::Or) {
                return Ok(Some(DataType::Bool));
            }
            Ok(match (lt, rt) {
                (Some(DataType::Float64), _) | (_, Some(DataType::Float64)) => {
                    Some(DataType::Float64)
                }
                (Some(DataType::Timestamp), Some(DataType::Timestamp)) => Some(DataType::Int64),
                (Some(DataType::Timestamp), _) | (_, Some(DataType::Timestamp)) => {
                    Some(DataType::Timestamp)
                }
                (Some(DataType::Int64), Some(DataType::Int64)) => Some(DataType::Int64),
                (None, t) | (t, None) => t,
                (Some(a), Some(b)) => {
                    return Err(Error::Type(format!("cannot apply {} to {a} and {b}", op.sql())))
                }
            })
        }
        Expr::Func { func, args } => match func {
            Func::Hash | Func::MonthYear => Ok(Some(DataType::Int64)),
            Func::Abs => infer_type(&args[0], input),
        },
        Expr::IsNull { .. } => Ok(Some(DataType::Bool)),
        Expr::InList { .. } => Ok(Some(DataType::Bool)),
    }
}

impl fmt::Display for Expr {
    /// Canonical SQL rendering; the parser accepts exactly this form back.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Column { name, .. } => f.write_str(name),
            Expr::Literal(v) => match v {
                Value::Null => f.write_str("NULL"),
                Value::Int(i) => write!(f, "{i}"),
                Value::Float(x) => write!(f, "{x:?}"),
                Value::Varchar(s) => write!(f, "'{}'", s.replace('\'', "''")),
                Value::Timestamp(t) => write!(f, "TIMESTAMP {t}"),
                Value::Bool(b) => f.write_str(if *b { "TRUE" } else { "FALSE" }),
            },
            Expr::Unary { op, expr } => match op {
                UnaryOp::Neg => write!(f, "(- {expr})"),
                UnaryOp::Not => write!(f, "(NOT {expr})"),
            },
            Expr::Binary { left, op, right } => write!(f, "({left} {} {right})", op.sql()),
            Expr::Func { func, args } => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
            Expr::IsNull { expr, negated } => {
                write!(f, "({expr} IS {}NULL)", if *negated { "NOT " } else { "" })
            }
            Expr::InList { expr, list, negated } => {
                write!(f, "({expr} {}IN (", if *negated { "NOT " } else { "" })?;
                for (i, e) in list.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{e}")?;
                }
                f.write_str("))")
            }
        }
    }
}
