//! Runtime values and column types.
//!
//! Values carry a total order (NULL sorts lowest, floats use IEEE total
//! ordering) so they can serve as sort keys, group keys, and index bounds
//! without panics. SQL comparison semantics (NULL propagation) live in
//! `expr`, not here.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::util::StableHasher;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DataType {
    Int64,
    Float64,
    Varchar,
    Timestamp,
    Bool,
}

impl DataType {
    pub fn is_numeric(self) -> bool {
        matches!(self, DataType::Int64 | DataType::Float64 | DataType::Timestamp)
    }

    pub fn name(self) -> &'static str {
        match self {
            DataType::Int64 => "INT",
            DataType::Float64 => "FLOAT",
            DataType::Varchar => "VARCHAR",
            DataType::Timestamp => "TIMESTAMP",
            DataType::Bool => "BOOL",
        }
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// Derived PartialEq is for AST/metadata equality; data-plane comparisons go
// through total_cmp/total_eq, which also equate Int/Float numerics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Null,
    Int(i64),
    Float(f64),
    Varchar(String),
    Timestamp(i64),
    Bool(bool),
}

impl Value {
    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn data_type(&self) -> Option<DataType> {
        match self {
            Value::Null => None,
            Value::Int(_) => Some(DataType::Int64),
            Value::Float(_) => Some(DataType::Float64),
            Value::Varchar(_) => Some(DataType::Varchar),
            Value::Timestamp(_) => Some(DataType::Timestamp),
            Value::Bool(_) => Some(DataType::Bool),
        }
    }

    /// Total order over all values: NULL first, then by value. Floats use
    /// IEEE total ordering; cross-type Int/Float compares numerically so a
    /// coerced literal lands where SQL expects it.
    pub fn total_cmp(&self, other: &Value) -> Ordering {
        use Value::*;
        match (self, other) {
            (Null, Null) => Ordering::Equal,
            (Null, _) => Ordering::Less,
            (_, Null) => Ordering::Greater,
            (Int(a), Int(b)) => a.cmp(b),
            (Timestamp(a), Timestamp(b)) => a.cmp(b),
            (Int(a), Timestamp(b)) | (Timestamp(a), Int(b)) => a.cmp(b),
            (Float(a), Float(b)) => a.total_cmp(b),
            (Int(a), Float(b)) | (Timestamp(a), Float(b)) => (*a as f64).total_cmp(b),
            (Float(a), Int(b)) | (Float(a), Timestamp(b)) => a.total_cmp(&(*b as f64)),
            (Varchar(a), Varchar(b)) => a.cmp(b),
            (Bool(a), Bool(b)) => a.cmp(b),
            // Mixed incomparable kinds: rank by a fixed type order. Typed
            // columns never hit this; it only keeps the order total.
            _ => self.type_rank().cmp(&other.type_rank()),
        }
    }

    fn type_rank(&self) -> u8 {
        match self {
            Value::Null => 0,
            Value::Bool(_) => 1,
            Value::Int(_) => 2,
            Value::Timestamp(_) => 3,
            Value::Float(_) => 4,
            Value::Varchar(_) => 5,
        }
    }

    /// Equality consistent with `total_cmp` (NULL equals NULL; used for
    /// grouping and sort keys, not SQL predicates).
    pub fn total_eq(&self, other: &Value) -> bool {
        self.total_cmp(other) == Ordering::Equal
    }

    /// Stable cross-platform hash. Placement and hash-distribution depend on
    /// it, so the result is frozen.
    pub fn stable_hash(&self) -> u64 {
        let mut h = StableHasher::new();
        self.hash_into(&mut h);
        h.finish()
    }

    pub fn hash_into(&self, h: &mut StableHasher) {
        match self {
            Value::Null => h.write_u64(0x00),
            Value::Int(v) => {
                h.write_u64(0x01);
                h.write_u64(*v as u64);
            }
            Value::Float(v) => {
                h.write_u64(0x02);
                h.write_u64(v.to_bits());
            }
            Value::Varchar(s) => {
                h.write_u64(0x03);
                h.write_bytes(s.as_bytes());
            }
            Value::Timestamp(v) => {
                h.write_u64(0x04);
                h.write_u64(*v as u64);
            }
            Value::Bool(v) => {
                h.write_u64(0x05);
                h.write_u64(*v as u64);
            }
        }
    }

    /// Order-preserving 8-byte prefix used in block index entries. For
    /// strings only the first 8 bytes participate, which is fine for a
    /// conservative min/max bound.
    pub fn order_prefix(&self) -> u64 {
        match self {
            Value::Null => 0,
            Value::Int(v) | Value::Timestamp(v) => (*v as u64) ^ (1 << 63),
            Value::Float(v) => {
                let bits = v.to_bits();
                if bits & (1 << 63) != 0 {
                    !bits
                } else {
                    bits | (1 << 63)
                }
            }
            Value::Varchar(s) => {
                let mut buf = [0u8; 8];
                let n = s.len().min(8);
                buf[..n].copy_from_slice(&s.as_bytes()[..n]);
                u64::from_be_bytes(buf)
            }
            Value::Bool(v) => *v as u64,
        }
    }

    /// Rough in-memory footprint, used for WOS and operator budgets.
    pub fn heap_size(&self) -> usize {
        match self {
            Value::Varchar(s) => 24 + s.len(),
            _ => 16,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Int(v) | Value::Timestamp(v) => Some(*v),
            Value::Bool(b) => Some(*b as i64),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Float(v) => Some(*v),
            Value::Int(v) | Value::Timestamp(v) => Some(*v as f64),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => f.write_str("\\N"),
            Value::Int(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v:?}"),
            Value::Varchar(s) => f.write_str(s),
            Value::Timestamp(v) => write!(f, "{v}"),
            Value::Bool(b) => f.write_str(if *b { "true" } else { "false" }),
        }
    }
}

/// A single tuple.
pub type Row = Vec<Value>;

/// Total-order comparison of two rows, column by column left to right.
pub fn cmp_rows(a: &[Value], b: &[Value]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        let ord = x.total_cmp(y);
        if ord != Ordering::Equal {
            return ord;
        }
    }
    a.len().cmp(&b.len())
}

/// Total-order comparison of two rows on the given column indexes.
pub fn cmp_rows_on(a: &[Value], b: &[Value], cols: &[usize]) -> Ordering {
    for &c in cols {
        let ord = a[c].total_cmp(&b[c]);
        if ord != Ordering::Equal {
            return ord;
        }
    }
    Ordering::Equal
}

/// Approximate heap footprint of a row.
pub fn row_size(row: &[Value]) -> usize {
    24 + row.iter().map(Value::heap_size).sum::<usize>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_order_null_first() {
        let vals = [
            Value::Null,
            Value::Int(-5),
            Value::Int(0),
            Value::Int(7),
        ];
        for w in vals.windows(2) {
            assert_eq!(w[0].total_cmp(&w[1]), Ordering::Less);
        }
    }

    #[test]
    fn float_total_order_handles_nan_and_zero() {
        let neg_nan = Value::Float(f64::from_bits(0xFFF8_0000_0000_0000));
        let pos_nan = Value::Float(f64::NAN);
        let order = [
            neg_nan.clone(),
            Value::Float(f64::NEG_INFINITY),
            Value::Float(-1.0),
            Value::Float(-0.0),
            Value::Float(0.0),
            Value::Float(1.0),
            Value::Float(f64::INFINITY),
            pos_nan.clone(),
        ];
        for w in order.windows(2) {
            assert_eq!(w[0].total_cmp(&w[1]), Ordering::Less, "{:?} < {:?}", w[0], w[1]);
        }
        assert!(pos_nan.total_eq(&pos_nan));
    }

    #[test]
    fn order_prefix_preserves_order() {
        let vals = [
            Value::Int(i64::MIN),
            Value::Int(-1),
            Value::Int(0),
            Value::Int(1),
            Value::Int(i64::MAX),
        ];
        for w in vals.windows(2) {
            assert!(w[0].order_prefix() < w[1].order_prefix());
        }
        let floats = [
            Value::Float(f64::NEG_INFINITY),
            Value::Float(-2.5),
            Value::Float(0.0),
            Value::Float(3.25),
            Value::Float(f64::INFINITY),
        ];
        for w in floats.windows(2) {
            assert!(w[0].order_prefix() < w[1].order_prefix());
        }
        let strs = [
            Value::Varchar("".into()),
            Value::Varchar("a".into()),
            Value::Varchar("ab".into()),
            Value::Varchar("b".into()),
        ];
        for w in strs.windows(2) {
            assert!(w[0].order_prefix() < w[1].order_prefix());
        }
    }

    #[test]
    fn cross_type_numeric_compare() {
        assert_eq!(Value::Int(3).total_cmp(&Value::Float(3.5)), Ordering::Less);
        assert_eq!(Value::Float(2.0).total_cmp(&Value::Int(2)), Ordering::Equal);
    }

    #[test]
    fn stable_hash_differs_by_type_tag() {
        assert_ne!(Value::Int(5).stable_hash(), Value::Timestamp(5).stable_hash());
        assert_ne!(Value::Int(0).stable_hash(), Value::Null.stable_hash());
        assert_eq!(Value::Int(5).stable_hash(), Value::Int(5).stable_hash());
    }
}
