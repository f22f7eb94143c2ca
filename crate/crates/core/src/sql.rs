//! SQL front end: lexer, parser, canonical printer, and semantic analysis.
//!
//! The grammar is a strict subset: no CTEs, no window functions, no
//! subqueries. Every statement the parser accepts prints back to a canonical
//! form that re-parses to an identical tree, which is what the round-trip
//! property in the tests pins down.
//!
//! Scalar expressions reuse [`Expr`]; select items and HAVING additionally
//! allow aggregate calls, represented by [`SelExpr`] and compiled away during
//! analysis. Analysis resolves names against the catalog and produces the
//! planner's input: tables in a unified column space, join edges, filter
//! conjuncts, and rewritten output expressions.

use std::fmt;

use crate::catalog::{DesignCatalog, Epoch, TableSchema};
use crate::encoding::EncodingType;
use crate::error::{Error, Result};
use crate::exec::AggFunc;
use crate::expr::{infer_type, unix_from_civil, BinOp, Expr, Func, UnaryOp};
use crate::planner::Policy;
use crate::value::{DataType, Row, Value};

// ---------------------------------------------------------------------------
// Tokens

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Kw(&'static str),
    Int(i64),
    Float(f64),
    Str(String),
    Sym(&'static str),
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "identifier {s}"),
            Tok::Kw(k) => write!(f, "keyword {k}"),
            Tok::Int(v) => write!(f, "integer {v}"),
            Tok::Float(v) => write!(f, "float {v}"),
            Tok::Str(_) => f.write_str("string literal"),
            Tok::Sym(s) => write!(f, "'{s}'"),
            Tok::Eof => f.write_str("end of input"),
        }
    }
}

const KEYWORDS: &[&str] = &[
    "SELECT", "FROM", "WHERE", "GROUP", "BY", "HAVING", "ORDER", "LIMIT", "AT", "EPOCH", "AS",
    "JOIN", "INNER", "LEFT", "RIGHT", "FULL", "ON", "AND", "OR", "NOT", "IS", "NULL", "IN",
    "INSERT", "INTO", "VALUES", "CREATE", "TABLE", "PROJECTION", "PARTITION", "DROP", "DELETE",
    "UPDATE", "SET", "COPY", "DIRECT", "REJECTS", "EXPLAIN", "DESIGN", "SIMULATE", "BEGIN",
    "COMMIT", "ROLLBACK", "TRUE", "FALSE", "TIMESTAMP", "SEGMENTED", "REPLICATED", "ENCODING",
    "POLICY", "BUDGET", "INT", "FLOAT", "VARCHAR", "BOOL", "COUNT", "SUM", "MIN", "MAX", "AVG",
    "DISTINCT", "DESC", "ASC",
];

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: u32,
    col: u32,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: u32,
    col: u32,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Lexer<'a> {
        Lexer { src: src.as_bytes(), pos: 0, line: 1, col: 1 }
    }

    fn err(&self, msg: impl fmt::Display) -> Error {
        Error::parse(self.line, self.col, msg.to_string())
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let c = self.peek()?;
        self.pos += 1;
        if c == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn lex(mut self) -> Result<Vec<Spanned>> {
        let mut out = Vec::new();
        loop {
            while matches!(self.peek(), Some(b' ' | b'\t' | b'\r' | b'\n')) {
                self.bump();
            }
            // Line comments.
            if self.peek() == Some(b'-') && self.src.get(self.pos + 1) == Some(&b'-') {
                while !matches!(self.peek(), None | Some(b'\n')) {
                    self.bump();
                }
                continue;
            }
            let (line, col) = (self.line, self.col);
            let Some(c) = self.peek() else {
                out.push(Spanned { tok: Tok::Eof, line, col });
                return Ok(out);
            };
            let tok = match c {
                b'a'..=b'z' | b'A'..=b'Z' | b'_' => self.word(),
                b'0'..=b'9' => self.number()?,
                b'\'' => self.string()?,
                _ => self.symbol()?,
            };
            out.push(Spanned { tok, line, col });
        }
    }

    fn word(&mut self) -> Tok {
        let start = self.pos;
        while matches!(self.peek(), Some(b'a'..=b'z' | b'A'..=b'Z' | b'0'..=b'9' | b'_')) {
            self.bump();
        }
        let word = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        let upper = word.to_ascii_uppercase();
        match KEYWORDS.iter().find(|k| **k == upper) {
            Some(k) => Tok::Kw(k),
            None => Tok::Ident(word.to_ascii_lowercase()),
        }
    }

    fn number(&mut self) -> Result<Tok> {
        let start = self.pos;
        let mut float = false;
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.bump();
        }
        if self.peek() == Some(b'.') && matches!(self.src.get(self.pos + 1), Some(b'0'..=b'9')) {
            float = true;
            self.bump();
            while matches!(self.peek(), Some(b'0'..=b'9')) {
                self.bump();
            }
        }
        if matches!(self.peek(), Some(b'e' | b'E')) {
            float = true;
            self.bump();
            if matches!(self.peek(), Some(b'+' | b'-')) {
                self.bump();
            }
            if !matches!(self.peek(), Some(b'0'..=b'9')) {
                return Err(self.err("malformed exponent"));
            }
            while matches!(self.peek(), Some(b'0'..=b'9')) {
                self.bump();
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        if float {
            text.parse::<f64>().map(Tok::Float).map_err(|e| self.err(e))
        } else {
            text.parse::<i64>().map(Tok::Int).map_err(|_| self.err("integer literal overflows"))
        }
    }

    fn string(&mut self) -> Result<Tok> {
        self.bump(); // opening quote
        let mut s = String::new();
        loop {
            match self.bump() {
                None => return Err(self.err("unterminated string")),
                Some(b'\'') => {
                    if self.peek() == Some(b'\'') {
                        self.bump();
                        s.push('\'');
                    } else {
                        return Ok(Tok::Str(s));
                    }
                }
                Some(c) => s.push(c as char),
            }
        }
    }

    fn symbol(&mut self) -> Result<Tok> {
        let c = self.bump().unwrap();
        let two = |this: &mut Self, s| {
            this.bump();
            Ok(Tok::Sym(s))
        };
        match c {
            b'(' => Ok(Tok::Sym("(")),
            b')' => Ok(Tok::Sym(")")),
            b',' => Ok(Tok::Sym(",")),
            b'.' => Ok(Tok::Sym(".")),
            b';' => Ok(Tok::Sym(";")),
            b'+' => Ok(Tok::Sym("+")),
            b'-' => Ok(Tok::Sym("-")),
            b'*' => Ok(Tok::Sym("*")),
            b'/' => Ok(Tok::Sym("/")),
            b'%' => Ok(Tok::Sym("%")),
            b'=' => Ok(Tok::Sym("=")),
            b'<' => match self.peek() {
                Some(b'>') => two(self, "<>"),
                Some(b'=') => two(self, "<="),
                _ => Ok(Tok::Sym("<")),
            },
            b'>' => match self.peek() {
                Some(b'=') => two(self, ">="),
                _ => Ok(Tok::Sym(">")),
            },
            b'!' => match self.peek() {
                Some(b'=') => two(self, "<>"),
                _ => Err(self.err("unexpected '!'")),
            },
            other => Err(self.err(format!("unexpected character '{}'", other as char))),
        }
    }
}

// ---------------------------------------------------------------------------
// AST

/// Select item or HAVING expression: scalar subtrees collapse to
/// `Scalar`, aggregate calls appear as leaves over scalar arguments.
#[derive(Debug, Clone, PartialEq)]
pub enum SelExpr {
    Scalar(Expr),
    Agg { func: AggFunc, arg: Option<Expr> },
    Unary { op: UnaryOp, expr: Box<SelExpr> },
    Binary { left: Box<SelExpr>, op: BinOp, right: Box<SelExpr> },
    IsNull { expr: Box<SelExpr>, negated: bool },
}

impl SelExpr {
    fn has_agg(&self) -> bool {
        match self {
            SelExpr::Scalar(_) => false,
            SelExpr::Agg { .. } => true,
            SelExpr::Unary { expr, .. } => expr.has_agg(),
            SelExpr::Binary { left, right, .. } => left.has_agg() || right.has_agg(),
            SelExpr::IsNull { expr, .. } => expr.has_agg(),
        }
    }

    /// Canonical form: any aggregate-free subtree is a single Scalar node.
    fn collapse(self) -> SelExpr {
        match self {
            SelExpr::Scalar(_) | SelExpr::Agg { .. } => self,
            SelExpr::Unary { op, expr } => {
                let expr = expr.collapse();
                match expr {
                    SelExpr::Scalar(e) => {
                        SelExpr::Scalar(Expr::Unary { op, expr: Box::new(e) })
                    }
                    other => SelExpr::Unary { op, expr: Box::new(other) },
                }
            }
            SelExpr::Binary { left, op, right } => {
                let (left, right) = (left.collapse(), right.collapse());
                match (left, right) {
                    (SelExpr::Scalar(l), SelExpr::Scalar(r)) => {
                        SelExpr::Scalar(Expr::bin(l, op, r))
                    }
                    (l, r) => SelExpr::Binary { left: Box::new(l), op, right: Box::new(r) },
                }
            }
            SelExpr::IsNull { expr, negated } => {
                let expr = expr.collapse();
                match expr {
                    SelExpr::Scalar(e) => {
                        SelExpr::Scalar(Expr::IsNull { expr: Box::new(e), negated })
                    }
                    other => SelExpr::IsNull { expr: Box::new(other), negated },
                }
            }
        }
    }

    fn to_scalar(&self) -> Result<Expr> {
        match self {
            SelExpr::Scalar(e) => Ok(e.clone()),
            _ => Err(Error::Plan("aggregate not allowed in this context".into())),
        }
    }
}

impl fmt::Display for SelExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelExpr::Scalar(e) => write!(f, "{e}"),
            SelExpr::Agg { func, arg } => {
                let name = match func {
                    AggFunc::Count | AggFunc::CountDistinct => "COUNT",
                    AggFunc::Sum => "SUM",
                    AggFunc::Min => "MIN",
                    AggFunc::Max => "MAX",
                    AggFunc::Avg => "AVG",
                };
                match (func, arg) {
                    (AggFunc::CountDistinct, Some(a)) => write!(f, "{name}(DISTINCT {a})"),
                    (_, Some(a)) => write!(f, "{name}({a})"),
                    (_, None) => write!(f, "{name}(*)"),
                }
            }
            SelExpr::Unary { op, expr } => match op {
                UnaryOp::Neg => write!(f, "(- {expr})"),
                UnaryOp::Not => write!(f, "(NOT {expr})"),
            },
            SelExpr::Binary { left, op, right } => write!(f, "({left} {} {right})", op.sql()),
            SelExpr::IsNull { expr, negated } => {
                write!(f, "({expr} IS {}NULL)", if *negated { "NOT " } else { "" })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SelectItem {
    Star,
    Expr { expr: SelExpr, alias: Option<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRef {
    pub table: String,
    pub alias: Option<String>,
}

impl TableRef {
    pub fn label(&self) -> &str {
        self.alias.as_deref().unwrap_or(&self.table)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JoinKind {
    Inner,
    Left,
    Right,
    Full,
}

impl JoinKind {
    fn sql(self) -> &'static str {
        match self {
            JoinKind::Inner => "JOIN",
            JoinKind::Left => "LEFT JOIN",
            JoinKind::Right => "RIGHT JOIN",
            JoinKind::Full => "FULL JOIN",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JoinClause {
    pub kind: JoinKind,
    pub table: TableRef,
    pub on: Expr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FromClause {
    pub first: TableRef,
    pub joins: Vec<JoinClause>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OrderKey {
    Pos(u64),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Select {
    pub items: Vec<SelectItem>,
    pub from: Option<FromClause>,
    pub where_pred: Option<Expr>,
    pub group_by: Vec<Expr>,
    pub having: Option<SelExpr>,
    pub order_by: Vec<(OrderKey, bool)>,
    pub limit: Option<u64>,
    pub at_epoch: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CreateTable {
    pub name: String,
    pub columns: Vec<(String, DataType)>,
    pub partition_by: Option<Expr>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SegClause {
    SegmentedBy(Expr),
    Replicated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CreateProjection {
    pub name: String,
    pub table: String,
    /// (column, encoding hint); None resolves to AUTO.
    pub columns: Vec<(String, Option<EncodingType>)>,
    pub order_by: Vec<String>,
    pub segmentation: Option<SegClause>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Insert {
    pub table: String,
    /// Empty means table column order.
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Expr>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CopyStmt {
    pub table: String,
    pub path: String,
    pub direct: bool,
    pub rejects: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delete {
    pub table: String,
    pub where_pred: Option<Expr>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Update {
    pub table: String,
    pub sets: Vec<(String, Expr)>,
    pub where_pred: Option<Expr>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropPartition {
    pub table: String,
    pub key: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub path: String,
    pub policy: Option<Policy>,
    pub budget: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Statement {
    CreateTable(CreateTable),
    CreateProjection(CreateProjection),
    Insert(Insert),
    Copy(CopyStmt),
    Select(Select),
    Delete(Delete),
    Update(Update),
    DropPartition(DropPartition),
    Explain(Box<Statement>),
    Design(Design),
    Simulate(String),
    Begin,
    Commit,
    Rollback,
}

fn sql_type_name(t: DataType) -> &'static str {
    match t {
        DataType::Int64 => "INT",
        DataType::Float64 => "FLOAT",
        DataType::Varchar => "VARCHAR",
        DataType::Timestamp => "TIMESTAMP",
        DataType::Bool => "BOOL",
    }
}

fn quote_str(s: &str) -> String {
    format!("'{}'", s.replace('\'', "''"))
}

impl fmt::Display for Statement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Statement::CreateTable(c) => {
                write!(f, "CREATE TABLE {} (", c.name)?;
                for (i, (name, t)) in c.columns.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{name} {}", sql_type_name(*t))?;
                }
                f.write_str(")")?;
                if let Some(e) = &c.partition_by {
                    write!(f, " PARTITION BY {e}")?;
                }
                Ok(())
            }
            Statement::CreateProjection(c) => {
                write!(f, "CREATE PROJECTION {} ON {} (", c.name, c.table)?;
                for (i, (name, enc)) in c.columns.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    f.write_str(name)?;
                    if let Some(e) = enc {
                        write!(f, " ENCODING {}", e.name())?;
                    }
                }
                write!(f, ") ORDER BY {}", c.order_by.join(", "))?;
                match &c.segmentation {
                    Some(SegClause::SegmentedBy(e)) => write!(f, " SEGMENTED BY {e}")?,
                    Some(SegClause::Replicated) => f.write_str(" REPLICATED")?,
                    None => {}
                }
                Ok(())
            }
            Statement::Insert(i) => {
                write!(f, "INSERT INTO {}", i.table)?;
                if !i.columns.is_empty() {
                    write!(f, " ({})", i.columns.join(", "))?;
                }
                f.write_str(" VALUES ")?;
                for (r, row) in i.rows.iter().enumerate() {
                    if r > 0 {
                        f.write_str(", ")?;
                    }
                    f.write_str("(")?;
                    for (c, e) in row.iter().enumerate() {
                        if c > 0 {
                            f.write_str(", ")?;
                        }
                        write!(f, "{e}")?;
                    }
                    f.write_str(")")?;
                }
                Ok(())
            }
            Statement::Copy(c) => {
                write!(f, "COPY {} FROM {}", c.table, quote_str(&c.path))?;
                if c.direct {
                    f.write_str(" DIRECT")?;
                }
                if let Some(r) = &c.rejects {
                    write!(f, " REJECTS {}", quote_str(r))?;
                }
                Ok(())
            }
            Statement::Select(s) => write!(f, "{s}"),
            Statement::Delete(d) => {
                write!(f, "DELETE FROM {}", d.table)?;
                if let Some(w) = &d.where_pred {
                    write!(f, " WHERE {w}")?;
                }
                Ok(())
            }
            Statement::Update(u) => {
                write!(f, "UPDATE {} SET ", u.table)?;
                for (i, (col, e)) in u.sets.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{col} = {e}")?;
                }
                if let Some(w) = &u.where_pred {
                    write!(f, " WHERE {w}")?;
                }
                Ok(())
            }
            Statement::DropPartition(d) => {
                write!(f, "DROP PARTITION {} {}", d.table, Expr::lit(d.key.clone()))
            }
            Statement::Explain(s) => write!(f, "EXPLAIN {s}"),
            Statement::Design(d) => {
                write!(f, "DESIGN {}", quote_str(&d.path))?;
                if let Some(p) = d.policy {
                    write!(f, " POLICY {}", p.name())?;
                }
                if let Some(b) = d.budget {
                    write!(f, " BUDGET {b}")?;
                }
                Ok(())
            }
            Statement::Simulate(p) => write!(f, "SIMULATE {}", quote_str(p)),
            Statement::Begin => f.write_str("BEGIN"),
            Statement::Commit => f.write_str("COMMIT"),
            Statement::Rollback => f.write_str("ROLLBACK"),
        }
    }
}

impl fmt::Display for Select {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SELECT ")?;
        for (i, item) in self.items.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            match item {
                SelectItem::Star => f.write_str("*")?,
                SelectItem::Expr { expr, alias } => {
                    write!(f, "{expr}")?;
                    if let Some(a) = alias {
                        write!(f, " AS {a}")?;
                    }
                }
            }
        }
        if let Some(from) = &self.from {
            write!(f, " FROM {}", from.first.table)?;
            if let Some(a) = &from.first.alias {
                write!(f, " AS {a}")?;
            }
            for j in &from.joins {
                write!(f, " {} {}", j.kind.sql(), j.table.table)?;
                if let Some(a) = &j.table.alias {
                    write!(f, " AS {a}")?;
                }
                write!(f, " ON {}", j.on)?;
            }
        }
        if let Some(w) = &self.where_pred {
            write!(f, " WHERE {w}")?;
        }
        if !self.group_by.is_empty() {
            f.write_str(" GROUP BY ")?;
            for (i, e) in self.group_by.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                write!(f, "{e}")?;
            }
        }
        if let Some(h) = &self.having {
            write!(f, " HAVING {h}")?;
        }
        if !self.order_by.is_empty() {
            f.write_str(" ORDER BY ")?;
            for (i, (k, desc)) in self.order_by.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                match k {
                    OrderKey::Pos(p) => write!(f, "{p}")?,
                    OrderKey::Name(n) => f.write_str(n)?,
                }
                if *desc {
                    f.write_str(" DESC")?;
                }
            }
        }
        if let Some(n) = self.limit {
            write!(f, " LIMIT {n}")?;
        }
        if let Some(e) = self.at_epoch {
            write!(f, " AT EPOCH {e}")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parser

pub fn parse(text: &str) -> Result<Statement> {
    let mut p = Parser::new(text)?;
    let stmt = p.statement()?;
    p.eat_sym(";");
    p.expect_eof()?;
    Ok(stmt)
}

/// Splits on top-level semicolons and parses each statement.
pub fn parse_all(text: &str) -> Result<Vec<Statement>> {
    let mut p = Parser::new(text)?;
    let mut out = Vec::new();
    loop {
        while p.eat_sym(";") {}
        if p.at_eof() {
            return Ok(out);
        }
        out.push(p.statement()?);
        if !p.eat_sym(";") {
            p.expect_eof()?;
            return Ok(out);
        }
    }
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
}

impl Parser {
    fn new(text: &str) -> Result<Parser> {
        Ok(Parser { toks: Lexer::new(text).lex()?, pos: 0 })
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.pos.min(self.toks.len() - 1)].tok
    }

    fn span(&self) -> (u32, u32) {
        let s = &self.toks[self.pos.min(self.toks.len() - 1)];
        (s.line, s.col)
    }

    fn err(&self, msg: impl fmt::Display) -> Error {
        let (line, col) = self.span();
        Error::parse(line, col, msg.to_string())
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos.min(self.toks.len() - 1)].tok.clone();
        if self.pos < self.toks.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn at_eof(&self) -> bool {
        matches!(self.peek(), Tok::Eof)
    }

    fn expect_eof(&self) -> Result<()> {
        if self.at_eof() {
            Ok(())
        } else {
            Err(self.err(format!("expected end of statement, found {}", self.peek())))
        }
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if matches!(self.peek(), Tok::Kw(k) if *k == kw) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> Result<()> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            Err(self.err(format!("expected {kw}, found {}", self.peek())))
        }
    }

    fn eat_sym(&mut self, sym: &str) -> bool {
        if matches!(self.peek(), Tok::Sym(s) if *s == sym) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, sym: &str) -> Result<()> {
        if self.eat_sym(sym) {
            Ok(())
        } else {
            Err(self.err(format!("expected '{sym}', found {}", self.peek())))
        }
    }

    fn ident(&mut self) -> Result<String> {
        match self.peek() {
            Tok::Ident(_) => match self.bump() {
                Tok::Ident(s) => Ok(s),
                _ => unreachable!(),
            },
            other => Err(self.err(format!("expected identifier, found {other}"))),
        }
    }

    fn string_lit(&mut self) -> Result<String> {
        match self.peek() {
            Tok::Str(_) => match self.bump() {
                Tok::Str(s) => Ok(s),
                _ => unreachable!(),
            },
            other => Err(self.err(format!("expected string literal, found {other}"))),
        }
    }

    fn uint_lit(&mut self) -> Result<u64> {
        match self.peek() {
            Tok::Int(v) if *v >= 0 => {
                let v = *v as u64;
                self.bump();
                Ok(v)
            }
            other => Err(self.err(format!("expected non-negative integer, found {other}"))),
        }
    }

    fn statement(&mut self) -> Result<Statement> {
        match self.peek() {
            Tok::Kw("SELECT") => Ok(Statement::Select(self.select()?)),
            Tok::Kw("CREATE") => self.create(),
            Tok::Kw("INSERT") => self.insert(),
            Tok::Kw("COPY") => self.copy(),
            Tok::Kw("DELETE") => self.delete(),
            Tok::Kw("UPDATE") => self.update(),
            Tok::Kw("DROP") => self.drop_partition(),
            Tok::Kw("EXPLAIN") => {
                self.bump();
                Ok(Statement::Explain(Box::new(self.statement()?)))
            }
            Tok::Kw("DESIGN") => self.design(),
            Tok::Kw("SIMULATE") => {
                self.bump();
                Ok(Statement::Simulate(self.string_lit()?))
            }
            Tok::Kw("BEGIN") => {
                self.bump();
                Ok(Statement::Begin)
            }
            Tok::Kw("COMMIT") => {
                self.bump();
                Ok(Statement::Commit)
            }
            Tok::Kw("ROLLBACK") => {
                self.bump();
                Ok(Statement::Rollback)
            }
            other => Err(self.err(format!("expected a statement, found {other}"))),
        }
    }

    fn create(&mut self) -> Result<Statement> {
        self.expect_kw("CREATE")?;
        if self.eat_kw("TABLE") {
            let name = self.ident()?;
            self.expect_sym("(")?;
            let mut columns = Vec::new();
            loop {
                let col = self.ident()?;
                let t = self.data_type()?;
                columns.push((col, t));
                if !self.eat_sym(",") {
                    break;
                }
            }
            self.expect_sym(")")?;
            let partition_by = if self.eat_kw("PARTITION") {
                self.expect_kw("BY")?;
                Some(self.scalar_expr()?)
            } else {
                None
            };
            Ok(Statement::CreateTable(CreateTable { name, columns, partition_by }))
        } else if self.eat_kw("PROJECTION") {
            let name = self.ident()?;
            self.expect_kw("ON")?;
            let table = self.ident()?;
            self.expect_sym("(")?;
            let mut columns = Vec::new();
            loop {
                let col = self.ident()?;
                let enc = if self.eat_kw("ENCODING") {
                    let enc_name = self.encoding_name()?;
                    Some(EncodingType::from_name(&enc_name).ok_or_else(|| {
                        self.err(format!("unknown encoding {enc_name}"))
                    })?)
                } else {
                    None
                };
                columns.push((col, enc));
                if !self.eat_sym(",") {
                    break;
                }
            }
            self.expect_sym(")")?;
            self.expect_kw("ORDER")?;
            self.expect_kw("BY")?;
            let mut order_by = vec![self.ident()?];
            while self.eat_sym(",") {
                order_by.push(self.ident()?);
            }
            let segmentation = if self.eat_kw("SEGMENTED") {
                self.expect_kw("BY")?;
                Some(SegClause::SegmentedBy(self.scalar_expr()?))
            } else if self.eat_kw("REPLICATED") {
                Some(SegClause::Replicated)
            } else {
                None
            };
            Ok(Statement::CreateProjection(CreateProjection {
                name,
                table,
                columns,
                order_by,
                segmentation,
            }))
        } else {
            Err(self.err("expected TABLE or PROJECTION after CREATE"))
        }
    }

    /// Encoding names are plain identifiers except RLE-style ones that could
    /// collide with nothing today; read one word.
    fn encoding_name(&mut self) -> Result<String> {
        match self.bump() {
            Tok::Ident(s) => Ok(s),
            other => Err(self.err(format!("expected encoding name, found {other}"))),
        }
    }

    fn data_type(&mut self) -> Result<DataType> {
        let t = match self.peek() {
            Tok::Kw("INT") => DataType::Int64,
            Tok::Kw("FLOAT") => DataType::Float64,
            Tok::Kw("VARCHAR") => DataType::Varchar,
            Tok::Kw("TIMESTAMP") => DataType::Timestamp,
            Tok::Kw("BOOL") => DataType::Bool,
            other => return Err(self.err(format!("expected a type, found {other}"))),
        };
        self.bump();
        Ok(t)
    }

    fn insert(&mut self) -> Result<Statement> {
        self.expect_kw("INSERT")?;
        self.expect_kw("INTO")?;
        let table = self.ident()?;
        let mut columns = Vec::new();
        if self.eat_sym("(") {
            loop {
                columns.push(self.ident()?);
                if !self.eat_sym(",") {
                    break;
                }
            }
            self.expect_sym(")")?;
        }
        self.expect_kw("VALUES")?;
        let mut rows = Vec::new();
        loop {
            self.expect_sym("(")?;
            let mut row = Vec::new();
            loop {
                row.push(self.scalar_expr()?);
                if !self.eat_sym(",") {
                    break;
                }
            }
            self.expect_sym(")")?;
            rows.push(row);
            if !self.eat_sym(",") {
                break;
            }
        }
        Ok(Statement::Insert(Insert { table, columns, rows }))
    }

    fn copy(&mut self) -> Result<Statement> {
        self.expect_kw("COPY")?;
        let table = self.ident()?;
        self.expect_kw("FROM")?;
        let path = self.string_lit()?;
        let direct = self.eat_kw("DIRECT");
        let rejects = if self.eat_kw("REJECTS") { Some(self.string_lit()?) } else { None };
        Ok(Statement::Copy(CopyStmt { table, path, direct, rejects }))
    }

    fn delete(&mut self) -> Result<Statement> {
        self.expect_kw("DELETE")?;
        self.expect_kw("FROM")?;
        let table = self.ident()?;
        let where_pred = if self.eat_kw("WHERE") { Some(self.scalar_expr()?) } else { None };
        Ok(Statement::Delete(Delete { table, where_pred }))
    }

    fn update(&mut self) -> Result<Statement> {
        self.expect_kw("UPDATE")?;
        let table = self.ident()?;
        self.expect_kw("SET")?;
        let mut sets = Vec::new();
        loop {
            let col = self.ident()?;
            self.expect_sym("=")?;
            sets.push((col, self.scalar_expr()?));
            if !self.eat_sym(",") {
                break;
            }
        }
        let where_pred = if self.eat_kw("WHERE") { Some(self.scalar_expr()?) } else { None };
        Ok(Statement::Update(Update { table, sets, where_pred }))
    }

    fn drop_partition(&mut self) -> Result<Statement> {
        self.expect_kw("DROP")?;
        self.expect_kw("PARTITION")?;
        let table = self.ident()?;
        let key = match self.literal()? {
            Expr::Literal(v) => v,
            _ => unreachable!(),
        };
        Ok(Statement::DropPartition(DropPartition { table, key }))
    }

    fn design(&mut self) -> Result<Statement> {
        self.expect_kw("DESIGN")?;
        let path = self.string_lit()?;
        let policy = if self.eat_kw("POLICY") {
            let name = self.ident()?;
            Some(Policy::from_name(&name).ok_or_else(|| self.err(format!("unknown policy {name}")))?)
        } else {
            None
        };
        let budget = if self.eat_kw("BUDGET") { Some(self.uint_lit()?) } else { None };
        Ok(Statement::Design(Design { path, policy, budget }))
    }

    fn select(&mut self) -> Result<Select> {
        self.expect_kw("SELECT")?;
        let mut items = Vec::new();
        loop {
            if self.eat_sym("*") {
                items.push(SelectItem::Star);
            } else {
                let expr = self.sel_expr()?;
                let alias = if self.eat_kw("AS") { Some(self.ident()?) } else { None };
                items.push(SelectItem::Expr { expr, alias });
            }
            if !self.eat_sym(",") {
                break;
            }
        }
        let from = if self.eat_kw("FROM") {
            let first = self.table_ref()?;
            let mut joins = Vec::new();
            loop {
                let kind = if self.eat_kw("JOIN") {
                    JoinKind::Inner
                } else if self.eat_kw("INNER") {
                    self.expect_kw("JOIN")?;
                    JoinKind::Inner
                } else if self.eat_kw("LEFT") {
                    self.expect_kw("JOIN")?;
                    JoinKind::Left
                } else if self.eat_kw("RIGHT") {
                    self.expect_kw("JOIN")?;
                    JoinKind::Right
                } else if self.eat_kw("FULL") {
                    self.expect_kw("JOIN")?;
                    JoinKind::Full
                } else {
                    break;
                };
                let table = self.table_ref()?;
                self.expect_kw("ON")?;
                let on = self.scalar_expr()?;
                joins.push(JoinClause { kind, table, on });
            }
            Some(FromClause { first, joins })
        } else {
            None
        };
        let where_pred = if self.eat_kw("WHERE") { Some(self.scalar_expr()?) } else { None };
        let mut group_by = Vec::new();
        if self.eat_kw("GROUP") {
            self.expect_kw("BY")?;
            loop {
                group_by.push(self.scalar_expr()?);
                if !self.eat_sym(",") {
                    break;
                }
            }
        }
        let having = if self.eat_kw("HAVING") { Some(self.sel_expr()?) } else { None };
        let mut order_by = Vec::new();
        if self.eat_kw("ORDER") {
            self.expect_kw("BY")?;
            loop {
                let key = match self.peek() {
                    Tok::Int(v) if *v > 0 => {
                        let v = *v as u64;
                        self.bump();
                        OrderKey::Pos(v)
                    }
                    Tok::Ident(_) => OrderKey::Name(self.ident()?),
                    other => {
                        return Err(self.err(format!(
                            "expected output column name or position, found {other}"
                        )))
                    }
                };
                let desc = if self.eat_kw("DESC") {
                    true
                } else {
                    self.eat_kw("ASC");
                    false
                };
                order_by.push((key, desc));
                if !self.eat_sym(",") {
                    break;
                }
            }
        }
        let limit = if self.eat_kw("LIMIT") { Some(self.uint_lit()?) } else { None };
        let at_epoch = if self.eat_kw("AT") {
            self.expect_kw("EPOCH")?;
            Some(self.uint_lit()?)
        } else {
            None
        };
        Ok(Select { items, from, where_pred, group_by, having, order_by, limit, at_epoch })
    }

    fn table_ref(&mut self) -> Result<TableRef> {
        let table = self.ident()?;
        let alias = if self.eat_kw("AS") { Some(self.ident()?) } else { None };
        Ok(TableRef { table, alias })
    }

    fn scalar_expr(&mut self) -> Result<Expr> {
        let (line, col) = self.span();
        self.sel_expr()?
            .to_scalar()
            .map_err(|_| Error::parse(line, col, "aggregate not allowed in this context"))
    }

    fn sel_expr(&mut self) -> Result<SelExpr> {
        Ok(self.or_expr()?.collapse())
    }

    fn or_expr(&mut self) -> Result<SelExpr> {
        let mut left = self.and_expr()?;
        while self.eat_kw("OR") {
            let right = self.and_expr()?;
            left = SelExpr::Binary { left: Box::new(left), op: BinOp::Or, right: Box::new(right) };
        }
        Ok(left)
    }

    fn and_expr(&mut self) -> Result<SelExpr> {
        let mut left = self.not_expr()?;
        while self.eat_kw("AND") {
            let right = self.not_expr()?;
            left = SelExpr::Binary { left: Box::new(left), op: BinOp::And, right: Box::new(right) };
        }
        Ok(left)
    }

    fn not_expr(&mut self) -> Result<SelExpr> {
        if self.eat_kw("NOT") {
            let inner = self.not_expr()?;
            return Ok(SelExpr::Unary { op: UnaryOp::Not, expr: Box::new(inner) });
        }
        self.cmp_expr()
    }

    fn cmp_expr(&mut self) -> Result<SelExpr> {
        let mut left = self.add_expr()?;
        loop {
            let op = match self.peek() {
                Tok::Sym("=") => Some(BinOp::Eq),
                Tok::Sym("<>") => Some(BinOp::Ne),
                Tok::Sym("<") => Some(BinOp::Lt),
                Tok::Sym("<=") => Some(BinOp::Le),
                Tok::Sym(">") => Some(BinOp::Gt),
                Tok::Sym(">=") => Some(BinOp::Ge),
                _ => None,
            };
            if let Some(op) = op {
                self.bump();
                let right = self.add_expr()?;
                left = SelExpr::Binary { left: Box::new(left), op, right: Box::new(right) };
                continue;
            }
            if self.eat_kw("IS") {
                let negated = self.eat_kw("NOT");
                self.expect_kw("NULL")?;
                left = SelExpr::IsNull { expr: Box::new(left), negated };
                continue;
            }
            let negated = if matches!(self.peek(), Tok::Kw("NOT")) {
                // Only consume NOT when IN follows: NOT also starts not_expr.
                if matches!(self.toks.get(self.pos + 1).map(|s| &s.tok), Some(Tok::Kw("IN"))) {
                    self.bump();
                    true
                } else {
                    break;
                }
            } else {
                false
            };
            if self.eat_kw("IN") {
                self.expect_sym("(")?;
                let mut list = Vec::new();
                loop {
                    list.push(self.scalar_expr()?);
                    if !self.eat_sym(",") {
                        break;
                    }
                }
                self.expect_sym(")")?;
                let scalar = left.to_scalar().map_err(|_| {
                    self.err("IN requires a scalar left-hand side")
                })?;
                left = SelExpr::Scalar(Expr::InList {
                    expr: Box::new(scalar),
                    list,
                    negated,
                });
                continue;
            }
            if negated {
                return Err(self.err("expected IN after NOT"));
            }
            break;
        }
        Ok(left)
    }

    fn add_expr(&mut self) -> Result<SelExpr> {
        let mut left = self.mul_expr()?;
        loop {
            let op = match self.peek() {
                Tok::Sym("+") => BinOp::Add,
                Tok::Sym("-") => BinOp::Sub,
                _ => break,
            };
            self.bump();
            let right = self.mul_expr()?;
            left = SelExpr::Binary { left: Box::new(left), op, right: Box::new(right) };
        }
        Ok(left)
    }

    fn mul_expr(&mut self) -> Result<SelExpr> {
        let mut left = self.unary_expr()?;
        loop {
            let op = match self.peek() {
                Tok::Sym("*") => BinOp::Mul,
                Tok::Sym("/") => BinOp::Div,
                Tok::Sym("%") => BinOp::Mod,
                _ => break,
            };
            self.bump();
            let right = self.unary_expr()?;
            left = SelExpr::Binary { left: Box::new(left), op, right: Box::new(right) };
        }
        Ok(left)
    }

    fn unary_expr(&mut self) -> Result<SelExpr> {
        if self.eat_sym("-") {
            let inner = self.unary_expr()?;
            return Ok(SelExpr::Unary { op: UnaryOp::Neg, expr: Box::new(inner) });
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<SelExpr> {
        match self.peek().clone() {
            Tok::Sym("(") => {
                self.bump();
                let e = self.or_expr()?;
                self.expect_sym(")")?;
                Ok(e)
            }
            Tok::Kw("COUNT") => {
                self.bump();
                self.expect_sym("(")?;
                let agg = if self.eat_sym("*") {
                    SelExpr::Agg { func: AggFunc::Count, arg: None }
                } else if self.eat_kw("DISTINCT") {
                    let arg = self.scalar_expr()?;
                    SelExpr::Agg { func: AggFunc::CountDistinct, arg: Some(arg) }
                } else {
                    let arg = self.scalar_expr()?;
                    SelExpr::Agg { func: AggFunc::Count, arg: Some(arg) }
                };
                self.expect_sym(")")?;
                Ok(agg)
            }
            Tok::Kw(k @ ("SUM" | "MIN" | "MAX" | "AVG")) => {
                self.bump();
                let func = match k {
                    "SUM" => AggFunc::Sum,
                    "MIN" => AggFunc::Min,
                    "MAX" => AggFunc::Max,
                    _ => AggFunc::Avg,
                };
                self.expect_sym("(")?;
                let arg = self.scalar_expr()?;
                self.expect_sym(")")?;
                Ok(SelExpr::Agg { func, arg: Some(arg) })
            }
            Tok::Ident(name) => {
                self.bump();
                // Function call, qualified column, or bare column.
                if self.eat_sym("(") {
                    let func = Func::from_name(&name)
                        .ok_or_else(|| self.err(format!("unknown function {name}")))?;
                    let mut args = Vec::new();
                    if !self.eat_sym(")") {
                        loop {
                            args.push(self.scalar_expr()?);
                            if !self.eat_sym(",") {
                                break;
                            }
                        }
                        self.expect_sym(")")?;
                    }
                    return Ok(SelExpr::Scalar(Expr::Func { func, args }));
                }
                if self.eat_sym(".") {
                    let col = self.ident()?;
                    return Ok(SelExpr::Scalar(Expr::col(&format!("{name}.{col}"))));
                }
                Ok(SelExpr::Scalar(Expr::col(&name)))
            }
            Tok::Int(_) | Tok::Float(_) | Tok::Str(_) | Tok::Kw("NULL") | Tok::Kw("TRUE")
            | Tok::Kw("FALSE") | Tok::Kw("TIMESTAMP") => Ok(SelExpr::Scalar(self.literal()?)),
            other => Err(self.err(format!("expected an expression, found {other}"))),
        }
    }

    fn literal(&mut self) -> Result<Expr> {
        let e = match self.peek().clone() {
            Tok::Int(v) => {
                self.bump();
                Expr::lit(Value::Int(v))
            }
            Tok::Float(v) => {
                self.bump();
                Expr::lit(Value::Float(v))
            }
            Tok::Str(s) => {
                self.bump();
                Expr::lit(Value::Varchar(s))
            }
            Tok::Kw("NULL") => {
                self.bump();
                Expr::lit(Value::Null)
            }
            Tok::Kw("TRUE") => {
                self.bump();
                Expr::lit(Value::Bool(true))
            }
            Tok::Kw("FALSE") => {
                self.bump();
                Expr::lit(Value::Bool(false))
            }
            Tok::Kw("TIMESTAMP") => {
                self.bump();
                let neg = self.eat_sym("-");
                match self.peek() {
                    Tok::Int(v) => {
                        let v = if neg { -*v } else { *v };
                        self.bump();
                        Expr::lit(Value::Timestamp(v))
                    }
                    other => return Err(self.err(format!("expected integer, found {other}"))),
                }
            }
            other => return Err(self.err(format!("expected a literal, found {other}"))),
        };
        Ok(e)
    }
}

// ---------------------------------------------------------------------------
// Analysis

/// One FROM entry mapped into the query's unified column space.
#[derive(Debug, Clone)]
pub struct QueryTable {
    pub table: String,
    pub alias: String,
    /// First unified column index of this table's columns.
    pub offset: usize,
    pub width: usize,
}

/// Equi-join of table `i+1` onto the join of tables `0..=i`. Key pairs are
/// unified column indexes: left over the accumulated side, right within the
/// new table's slice.
#[derive(Debug, Clone)]
pub struct JoinEdge {
    pub kind: JoinKind,
    pub keys: Vec<(usize, usize)>,
}

/// A SELECT after name resolution, ready for planning. All expressions are
/// over the unified column space except `items` and `having`, which run over
/// the post-aggregation row (group keys then aggregates) when `grouped`.
#[derive(Debug, Clone)]
pub struct AnalyzedSelect {
    pub tables: Vec<QueryTable>,
    pub joins: Vec<JoinEdge>,
    pub filters: Vec<Expr>,
    pub group_keys: Vec<Expr>,
    pub aggs: Vec<(AggFunc, Option<Expr>)>,
    pub grouped: bool,
    pub items: Vec<Expr>,
    pub having: Option<Expr>,
    pub order_by: Vec<(usize, bool)>,
    pub limit: Option<u64>,
    pub at_epoch: Option<Epoch>,
    pub col_types: Vec<DataType>,
    pub col_names: Vec<String>,
    pub out_names: Vec<String>,
    pub out_types: Vec<DataType>,
}

struct Scope {
    /// (qualified name "alias.col", bare name, unified index, type)
    cols: Vec<(String, String, usize, DataType)>,
}

impl Scope {
    fn resolve(&self, name: &str) -> Result<(usize, DataType)> {
        if name.contains('.') {
            match self.cols.iter().find(|(q, _, _, _)| q == name) {
                Some((_, _, i, t)) => Ok((*i, *t)),
                None => Err(Error::Plan(format!("unknown column {name}"))),
            }
        } else {
            let mut hits = self.cols.iter().filter(|(_, b, _, _)| b == name);
            match (hits.next(), hits.next()) {
                (Some((_, _, i, t)), None) => Ok((*i, *t)),
                (Some(_), Some(_)) => Err(Error::Plan(format!("ambiguous column {name}"))),
                (None, _) => Err(Error::Plan(format!("unknown column {name}"))),
            }
        }
    }

    /// Resolves every column reference in place.
    fn resolve_expr(&self, expr: &mut Expr) -> Result<()> {
        match expr {
            Expr::Column { name, index } => {
                let (i, _) = self.resolve(name)?;
                *index = i;
                Ok(())
            }
            Expr::Literal(_) => Ok(()),
            Expr::Unary { expr, .. } => self.resolve_expr(expr),
            Expr::Binary { left, right, .. } => {
                self.resolve_expr(left)?;
                self.resolve_expr(right)
            }
            Expr::Func { args, .. } => {
                for a in args {
                    self.resolve_expr(a)?;
                }
                Ok(())
            }
            Expr::IsNull { expr, .. } => self.resolve_expr(expr),
            Expr::InList { expr, list, .. } => {
                self.resolve_expr(expr)?;
                for e in list {
                    self.resolve_expr(e)?;
                }
                Ok(())
            }
        }
    }
}

/// Splits a conjunction into its AND-ed parts.
pub fn conjuncts(expr: Expr, out: &mut Vec<Expr>) {
    match expr {
        Expr::Binary { left, op: BinOp::And, right } => {
            conjuncts(*left, out);
            conjuncts(*right, out);
        }
        other => out.push(other),
    }
}

pub fn analyze_select(catalog: &DesignCatalog, stmt: &Select) -> Result<AnalyzedSelect> {
    let mut tables = Vec::new();
    let mut scope = Scope { cols: Vec::new() };
    let mut col_types = Vec::new();
    let mut col_names = Vec::new();
    let mut schemas: Vec<&TableSchema> = Vec::new();

    let mut add_table = |tref: &TableRef,
                         tables: &mut Vec<QueryTable>,
                         scope: &mut Scope,
                         col_types: &mut Vec<DataType>,
                         col_names: &mut Vec<String>,
                         schemas: &mut Vec<&TableSchema>|
     -> Result<()> {
        let schema = catalog.table(&tref.table)?;
        let label = tref.label().to_string();
        if tables.iter().any(|t: &QueryTable| t.alias == label) {
            return Err(Error::Plan(format!("duplicate table name {label}; use AS")));
        }
        let offset = col_types.len();
        for (i, c) in schema.columns.iter().enumerate() {
            scope.cols.push((format!("{label}.{}", c.name), c.name.clone(), offset + i, c.dtype));
            col_types.push(c.dtype);
            col_names.push(format!("{label}.{}", c.name));
        }
        tables.push(QueryTable {
            table: tref.table.clone(),
            alias: label,
            offset,
            width: schema.columns.len(),
        });
        schemas.push(catalog.table(&tref.table)?);
        Ok(())
    };

    let mut joins = Vec::new();
    let mut filters = Vec::new();
    if let Some(from) = &stmt.from {
        add_table(&from.first, &mut tables, &mut scope, &mut col_types, &mut col_names, &mut schemas)?;
        for j in &from.joins {
            let left_width = col_types.len();
            add_table(&j.table, &mut tables, &mut scope, &mut col_types, &mut col_names, &mut schemas)?;
            let mut on = j.on.clone();
            scope.resolve_expr(&mut on)?;
            let mut parts = Vec::new();
            conjuncts(on, &mut parts);
            let mut keys = Vec::new();
            for part in parts {
                let bad = || {
                    Error::Plan(
                        "join conditions must be AND-ed equalities between columns of the two sides"
                            .into(),
                    )
                };
                let Expr::Binary { left, op: BinOp::Eq, right } = part else {
                    return Err(bad());
                };
                let (Expr::Column { index: a, .. }, Expr::Column { index: b, .. }) =
                    (left.as_ref(), right.as_ref())
                else {
                    return Err(bad());
                };
                let (l, r) = if *a < left_width && *b >= left_width {
                    (*a, *b)
                } else if *b < left_width && *a >= left_width {
                    (*b, *a)
                } else {
                    return Err(bad());
                };
                keys.push((l, r));
            }
            if keys.is_empty() {
                return Err(Error::Plan("join requires at least one equality condition".into()));
            }
            joins.push(JoinEdge { kind: j.kind, keys });
        }
    }
    if let Some(w) = &stmt.where_pred {
        let mut w = w.clone();
        scope.resolve_expr(&mut w)?;
        infer_type(&w, &col_types)?;
        conjuncts(w, &mut filters);
    }

    // Group keys.
    let mut group_keys = Vec::new();
    for g in &stmt.group_by {
        let mut g = g.clone();
        scope.resolve_expr(&mut g)?;
        infer_type(&g, &col_types)?;
        group_keys.push(g);
    }

    // Collect aggregates from items and HAVING, deduplicated.
    let mut aggs: Vec<(AggFunc, Option<Expr>)> = Vec::new();
    let mut collect = |sel: &SelExpr, aggs: &mut Vec<(AggFunc, Option<Expr>)>| -> Result<()> {
        fn walk(
            sel: &SelExpr,
            scope: &Scope,
            types: &[DataType],
            aggs: &mut Vec<(AggFunc, Option<Expr>)>,
        ) -> Result<()> {
            match sel {
                SelExpr::Scalar(_) => Ok(()),
                SelExpr::Agg { func, arg } => {
                    let arg = match arg {
                        Some(a) => {
                            let mut a = a.clone();
                            scope.resolve_expr(&mut a)?;
                            let t = infer_type(&a, types)?;
                            if matches!(func, AggFunc::Sum | AggFunc::Avg)
                                && !matches!(
                                    t,
                                    Some(DataType::Int64) | Some(DataType::Float64) | None
                                )
                            {
                                return Err(Error::Type(format!(
                                    "{:?} requires a numeric argument",
                                    func
                                )));
                            }
                            Some(a)
                        }
                        None => None,
                    };
                    if !aggs.iter().any(|(f, a)| f == func && *a == arg) {
                        aggs.push((*func, arg));
                    }
                    Ok(())
                }
                SelExpr::Unary { expr, .. } => walk(expr, scope, types, aggs),
                SelExpr::Binary { left, right, .. } => {
                    walk(left, scope, types, aggs)?;
                    walk(right, scope, types, aggs)
                }
                SelExpr::IsNull { expr, .. } => walk(expr, scope, types, aggs),
            }
        }
        walk(sel, &scope, &col_types, aggs)
    };
    for item in &stmt.items {
        if let SelectItem::Expr { expr, .. } = item {
            collect(expr, &mut aggs)?;
        }
    }
    if let Some(h) = &stmt.having {
        collect(h, &mut aggs)?;
    }
    let grouped = !group_keys.is_empty() || !aggs.is_empty();
    if stmt.having.is_some() && !grouped {
        return Err(Error::Plan("HAVING requires GROUP BY or aggregates".into()));
    }

    // The row items and HAVING run over: group keys then aggregate results
    // when grouped, the unified row otherwise.
    let agg_out_type = |func: AggFunc, arg: &Option<Expr>| -> Result<DataType> {
        Ok(match func {
            AggFunc::Count | AggFunc::CountDistinct => DataType::Int64,
            AggFunc::Avg => DataType::Float64,
            AggFunc::Sum | AggFunc::Min | AggFunc::Max => {
                match infer_type(arg.as_ref().unwrap(), &col_types)? {
                    Some(t) => t,
                    None => DataType::Int64,
                }
            }
        })
    };
    let (src_types, src_names): (Vec<DataType>, Vec<String>) = if grouped {
        let mut t = Vec::new();
        let mut n = Vec::new();
        for k in &group_keys {
            t.push(infer_type(k, &col_types)?.unwrap_or(DataType::Int64));
            n.push(k.to_string());
        }
        for (func, arg) in &aggs {
            t.push(agg_out_type(*func, arg)?);
            n.push(SelExpr::Agg { func: *func, arg: arg.clone() }.to_string());
        }
        (t, n)
    } else {
        (col_types.clone(), col_names.clone())
    };

    // Rewrites a SelExpr into an Expr over the post-aggregation row.
    fn rewrite(
        sel: &SelExpr,
        scope: &Scope,
        grouped: bool,
        group_keys: &[Expr],
        aggs: &[(AggFunc, Option<Expr>)],
    ) -> Result<Expr> {
        match sel {
            SelExpr::Scalar(e) => {
                let mut e = e.clone();
                scope.resolve_expr(&mut e)?;
                if !grouped {
                    return Ok(e);
                }
                // Must be (part of) a group key expression.
                if let Some(i) = group_keys.iter().position(|k| *k == e) {
                    return Ok(Expr::col_at(&format!("key{i}"), i));
                }
                match &e {
                    Expr::Literal(_) => Ok(e),
                    Expr::Unary { op, expr } => Ok(Expr::Unary {
                        op: *op,
                        expr: Box::new(rewrite(
                            &SelExpr::Scalar((**expr).clone()),
                            scope,
                            grouped,
                            group_keys,
                            aggs,
                        )?),
                    }),
                    Expr::Binary { left, op, right } => Ok(Expr::Binary {
                        left: Box::new(rewrite(
                            &SelExpr::Scalar((**left).clone()),
                            scope,
                            grouped,
                            group_keys,
                            aggs,
                        )?),
                        op: *op,
                        right: Box::new(rewrite(
                            &SelExpr::Scalar((**right).clone()),
                            scope,
                            grouped,
                            group_keys,
                            aggs,
                        )?),
                    }),
                    _ => Err(Error::Plan(format!(
                        "expression {e} must appear in GROUP BY or inside an aggregate"
                    ))),
                }
            }
            SelExpr::Agg { func, arg } => {
                let arg = match arg {
                    Some(a) => {
                        let mut a = a.clone();
                        scope.resolve_expr(&mut a)?;
                        Some(a)
                    }
                    None => None,
                };
                let slot = aggs
                    .iter()
                    .position(|(f, a)| f == func && *a == arg)
                    .expect("aggregate collected earlier");
                Ok(Expr::col_at(&format!("agg{slot}"), group_keys.len() + slot))
            }
            SelExpr::Unary { op, expr } => Ok(Expr::Unary {
                op: *op,
                expr: Box::new(rewrite(expr, scope, grouped, group_keys, aggs)?),
            }),
            SelExpr::Binary { left, op, right } => Ok(Expr::Binary {
                left: Box::new(rewrite(left, scope, grouped, group_keys, aggs)?),
                op: *op,
                right: Box::new(rewrite(right, scope, grouped, group_keys, aggs)?),
            }),
            SelExpr::IsNull { expr, negated } => Ok(Expr::IsNull {
                expr: Box::new(rewrite(expr, scope, grouped, group_keys, aggs)?),
                negated: *negated,
            }),
        }
    }

    let mut items = Vec::new();
    let mut out_names = Vec::new();
    for item in &stmt.items {
        match item {
            SelectItem::Star => {
                if grouped {
                    return Err(Error::Plan("* not allowed with GROUP BY or aggregates".into()));
                }
                if tables.is_empty() {
                    return Err(Error::Plan("* requires a FROM clause".into()));
                }
                for (i, n) in col_names.iter().enumerate() {
                    items.push(Expr::col_at(n, i));
                    out_names.push(n.rsplit('.').next().unwrap().to_string());
                }
            }
            SelectItem::Expr { expr, alias } => {
                let e = rewrite(expr, &scope, grouped, &group_keys, &aggs)?;
                infer_type(&e, &src_types)?;
                let name = match alias {
                    Some(a) => a.clone(),
                    None => match expr {
                        SelExpr::Scalar(Expr::Column { name, .. }) => {
                            name.rsplit('.').next().unwrap().to_string()
                        }
                        other => other.to_string(),
                    },
                };
                items.push(e);
                out_names.push(name);
            }
        }
    }
    let having = match &stmt.having {
        Some(h) => {
            let e = rewrite(h, &scope, grouped, &group_keys, &aggs)?;
            infer_type(&e, &src_types)?;
            Some(e)
        }
        None => None,
    };

    let mut out_types = Vec::new();
    for e in &items {
        out_types.push(infer_type(e, &src_types)?.unwrap_or(DataType::Int64));
    }

    let mut order_by = Vec::new();
    for (key, desc) in &stmt.order_by {
        let idx = match key {
            OrderKey::Pos(p) => {
                let i = *p as usize;
                if i == 0 || i > items.len() {
                    return Err(Error::Plan(format!("ORDER BY position {p} out of range")));
                }
                i - 1
            }
            OrderKey::Name(n) => out_names
                .iter()
                .position(|o| o == n)
                .ok_or_else(|| Error::Plan(format!("ORDER BY column {n} not in output")))?,
        };
        order_by.push((idx, *desc));
    }

    let _ = src_names;
    Ok(AnalyzedSelect {
        tables,
        joins,
        filters,
        group_keys,
        aggs,
        grouped,
        items,
        having,
        order_by,
        limit: stmt.limit,
        at_epoch: stmt.at_epoch,
        col_types,
        col_names,
        out_names,
        out_types,
    })
}

/// DELETE/UPDATE resolved against a single table.
#[derive(Debug, Clone)]
pub struct AnalyzedDml {
    pub table: String,
    pub predicate: Option<Expr>,
    /// UPDATE only: (table column index, value expression over the old row).
    pub sets: Vec<(usize, Expr)>,
}

pub fn analyze_delete(catalog: &DesignCatalog, stmt: &Delete) -> Result<AnalyzedDml> {
    let schema = catalog.table(&stmt.table)?;
    let predicate = resolve_table_pred(schema, &stmt.where_pred)?;
    Ok(AnalyzedDml { table: stmt.table.clone(), predicate, sets: Vec::new() })
}

pub fn analyze_update(catalog: &DesignCatalog, stmt: &Update) -> Result<AnalyzedDml> {
    let schema = catalog.table(&stmt.table)?;
    let predicate = resolve_table_pred(schema, &stmt.where_pred)?;
    let types = schema.column_types();
    let mut sets = Vec::new();
    for (col, e) in &stmt.sets {
        let idx = schema
            .column_index(col)
            .ok_or_else(|| Error::Plan(format!("unknown column {col}")))?;
        let mut e = e.clone();
        crate::catalog::resolve_columns(&mut e, &schema.columns)?;
        infer_type(&e, &types)?;
        if sets.iter().any(|(i, _)| *i == idx) {
            return Err(Error::Plan(format!("column {col} set twice")));
        }
        sets.push((idx, e));
    }
    Ok(AnalyzedDml { table: stmt.table.clone(), predicate, sets })
}

fn resolve_table_pred(schema: &TableSchema, pred: &Option<Expr>) -> Result<Option<Expr>> {
    match pred {
        None => Ok(None),
        Some(p) => {
            let mut p = p.clone();
            crate::catalog::resolve_columns(&mut p, &schema.columns)?;
            infer_type(&p, &schema.column_types())?;
            Ok(Some(p))
        }
    }
}

/// Evaluates INSERT rows to values, reordering through the column list and
/// padding unnamed columns with NULL.
pub fn analyze_insert(catalog: &DesignCatalog, stmt: &Insert) -> Result<Vec<Row>> {
    let schema = catalog.table(&stmt.table)?;
    let positions: Vec<usize> = if stmt.columns.is_empty() {
        (0..schema.columns.len()).collect()
    } else {
        let mut out = Vec::new();
        for c in &stmt.columns {
            let i = schema
                .column_index(c)
                .ok_or_else(|| Error::Plan(format!("unknown column {c}")))?;
            if out.contains(&i) {
                return Err(Error::Plan(format!("column {c} listed twice")));
            }
            out.push(i);
        }
        out
    };
    let mut rows = Vec::with_capacity(stmt.rows.len());
    for exprs in &stmt.rows {
        if exprs.len() != positions.len() {
            return Err(Error::Plan(format!(
                "INSERT row has {} values for {} columns",
                exprs.len(),
                positions.len()
            )));
        }
        let mut row = vec![Value::Null; schema.columns.len()];
        let mut warnings = 0;
        for (e, &pos) in exprs.iter().zip(&positions) {
            let v = e.eval(&[], &mut warnings).map_err(|_| {
                Error::Plan("INSERT values must be literal expressions".into())
            })?;
            row[pos] = coerce(v, schema.columns[pos].dtype)
                .map_err(|e| Error::Type(format!("column {}: {e}", schema.columns[pos].name)))?;
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Widens a literal into a column's type where the conversion is lossless.
pub fn coerce(v: Value, want: DataType) -> Result<Value> {
    let got = match v.data_type() {
        None => return Ok(Value::Null),
        Some(t) => t,
    };
    if got == want {
        return Ok(v);
    }
    match (v, want) {
        (Value::Int(i), DataType::Float64) => Ok(Value::Float(i as f64)),
        (Value::Int(i), DataType::Timestamp) => Ok(Value::Timestamp(i)),
        (Value::Timestamp(t), DataType::Int64) => Ok(Value::Int(t)),
        (v, want) => Err(Error::Type(format!("cannot store {v:?} in a {want} column"))),
    }
}

// ---------------------------------------------------------------------------
// Bulk load line format

/// One rejected load line: kept out of the table, never aborts the load.
#[derive(Debug, Clone, PartialEq)]
pub struct RejectRecord {
    pub line_no: u64,
    pub reason: String,
    pub raw: String,
}

impl RejectRecord {
    /// Rejects-file line: tab separated (line, reason, raw).
    pub fn render(&self) -> String {
        format!("{}\t{}\t{}", self.line_no, self.reason, self.raw)
    }
}

/// Splits one CSV line: comma separated, double-quote escaping with `""`,
/// unquoted `\N` is NULL.
pub fn split_csv(line: &str) -> std::result::Result<Vec<Option<String>>, String> {
    let mut fields = Vec::new();
    let mut chars = line.chars().peekable();
    loop {
        let mut field = String::new();
        let mut quoted = false;
        if chars.peek() == Some(&'"') {
            quoted = true;
            chars.next();
            loop {
                match chars.next() {
                    None => return Err("unterminated quoted field".into()),
                    Some('"') => {
                        if chars.peek() == Some(&'"') {
                            chars.next();
                            field.push('"');
                        } else {
                            break;
                        }
                    }
                    Some(c) => field.push(c),
                }
            }
        } else {
            while let Some(&c) = chars.peek() {
                if c == ',' {
                    break;
                }
                field.push(c);
                chars.next();
            }
        }
        if !quoted && field == "\\N" {
            fields.push(None);
        } else {
            fields.push(Some(field));
        }
        match chars.next() {
            Some(',') => continue,
            None => return Ok(fields),
            Some(c) => return Err(format!("unexpected '{c}' after quoted field")),
        }
    }
}

/// Converts one CSV line into a typed row, or a human-readable reason.
pub fn parse_csv_row(line: &str, types: &[DataType]) -> std::result::Result<Row, String> {
    let fields = split_csv(line)?;
    if fields.len() != types.len() {
        return Err(format!("expected {} fields, got {}", types.len(), fields.len()));
    }
    let mut row = Vec::with_capacity(types.len());
    for (i, (field, t)) in fields.into_iter().zip(types).enumerate() {
        let v = match field {
            None => Value::Null,
            Some(text) => parse_field(&text, *t)
                .map_err(|e| format!("field {}: {e}", i + 1))?,
        };
        row.push(v);
    }
    Ok(row)
}

fn parse_field(text: &str, t: DataType) -> std::result::Result<Value, String> {
    match t {
        DataType::Int64 => text
            .parse::<i64>()
            .map(Value::Int)
            .map_err(|_| format!("'{text}' is not an integer")),
        DataType::Float64 => text
            .parse::<f64>()
            .map(Value::Float)
            .map_err(|_| format!("'{text}' is not a float")),
        DataType::Varchar => Ok(Value::Varchar(text.to_string())),
        DataType::Bool => match text.to_ascii_lowercase().as_str() {
            "true" | "t" | "1" => Ok(Value::Bool(true)),
            "false" | "f" | "0" => Ok(Value::Bool(false)),
            _ => Err(format!("'{text}' is not a boolean")),
        },
        DataType::Timestamp => {
            if let Ok(v) = text.parse::<i64>() {
                return Ok(Value::Timestamp(v));
            }
            // YYYY-MM-DD
            let parts: Vec<&str> = text.split('-').collect();
            if parts.len() == 3 {
                let y = parts[0].parse::<i32>().map_err(|_| bad_ts(text))?;
                let m = parts[1].parse::<u32>().map_err(|_| bad_ts(text))?;
                let d = parts[2].parse::<u32>().map_err(|_| bad_ts(text))?;
                if (1..=12).contains(&m) && (1..=31).contains(&d) {
                    return Ok(Value::Timestamp(unix_from_civil(y, m, d)));
                }
            }
            Err(bad_ts(text))
        }
    }
}

fn bad_ts(text: &str) -> String {
    format!("'{text}' is not a timestamp (unix seconds or YYYY-MM-DD)")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(sql: &str) -> Statement {
        let ast = parse(sql).unwrap();
        let printed = ast.to_string();
        let again = parse(&printed).unwrap_or_else(|e| panic!("reparse of `{printed}`: {e}"));
        assert_eq!(ast, again, "round trip changed the tree for `{printed}`");
        ast
    }

    #[test]
    fn parses_fig_query_shapes() {
        let ast = roundtrip(
            "SELECT dept_id, COUNT(*) FROM emp WHERE salary > 100 GROUP BY dept_id \
             HAVING (COUNT(*) > 2) ORDER BY 2 DESC LIMIT 10",
        );
        let Statement::Select(s) = ast else { panic!() };
        assert_eq!(s.items.len(), 2);
        assert_eq!(s.group_by.len(), 1);
        assert!(s.having.is_some());
        assert_eq!(s.limit, Some(10));
    }

    #[test]
    fn at_epoch_clause() {
        let ast = roundtrip("SELECT a FROM t AT EPOCH 7");
        let Statement::Select(s) = ast else { panic!() };
        assert_eq!(s.at_epoch, Some(7));
    }

    #[test]
    fn syntax_error_carries_position() {
        let err = parse("SELEC 1").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("1:1"), "{msg}");
    }

    #[test]
    fn join_chain_with_aliases() {
        let ast = roundtrip(
            "SELECT f.a, d.name FROM fact AS f JOIN dim AS d ON (f.k = d.k) \
             LEFT JOIN other ON (f.a = other.b) WHERE (d.name = 'x')",
        );
        let Statement::Select(s) = ast else { panic!() };
        let from = s.from.unwrap();
        assert_eq!(from.joins.len(), 2);
        assert_eq!(from.joins[0].kind, JoinKind::Inner);
        assert_eq!(from.joins[1].kind, JoinKind::Left);
    }

    #[test]
    fn ddl_round_trips() {
        roundtrip("CREATE TABLE t (a INT, b VARCHAR, c TIMESTAMP) PARTITION BY MONTH_YEAR(c)");
        roundtrip("CREATE PROJECTION p ON t (a ENCODING RLE, b) ORDER BY a SEGMENTED BY HASH(a)");
        roundtrip("CREATE PROJECTION p ON t (a, b) ORDER BY a, b REPLICATED");
        roundtrip("INSERT INTO t (a, b) VALUES (1, 'x''y'), (2, NULL)");
        roundtrip("COPY t FROM 'data.csv' DIRECT REJECTS 'bad.txt'");
        roundtrip("DELETE FROM t WHERE (a < 3)");
        roundtrip("UPDATE t SET a = (a + 1), b = 'z' WHERE (b = 'y')");
        roundtrip("DROP PARTITION t 201203");
        roundtrip("EXPLAIN SELECT a FROM t");
        roundtrip("DESIGN 'w.sql' POLICY BALANCED BUDGET 1000000");
        roundtrip("SIMULATE 'scenario.txt'");
        roundtrip("BEGIN");
    }

    #[test]
    fn count_distinct_and_aggregate_exprs() {
        let ast = roundtrip("SELECT (SUM(a) / COUNT(*)), COUNT(DISTINCT b) FROM t");
        let Statement::Select(s) = ast else { panic!() };
        let SelectItem::Expr { expr, .. } = &s.items[0] else { panic!() };
        assert!(matches!(expr, SelExpr::Binary { .. }));
        let SelectItem::Expr { expr, .. } = &s.items[1] else { panic!() };
        assert!(matches!(expr, SelExpr::Agg { func: AggFunc::CountDistinct, .. }));
    }

    #[test]
    fn aggregates_rejected_in_where() {
        assert!(parse("SELECT a FROM t WHERE COUNT(*) > 1").is_err());
        assert!(parse("DELETE FROM t WHERE SUM(a) > 1").is_err());
    }

    // ---------------------------------------------------------------
    // Random statement corpus round trip

    struct Gen {
        state: u64,
    }

    impl Gen {
        fn next(&mut self) -> u64 {
            self.state = crate::util::splitmix64(self.state);
            self.state
        }

        fn below(&mut self, n: u64) -> u64 {
            self.next() % n
        }

        fn ident(&mut self) -> String {
            let names = ["a", "b", "c", "cust", "price", "tab", "dim", "fact", "x7"];
            names[self.below(names.len() as u64) as usize].to_string()
        }

        fn value(&mut self) -> Value {
            match self.below(6) {
                0 => Value::Int(self.next() as i64 % 1000),
                1 => Value::Float((self.next() % 1000) as f64 / 8.0),
                2 => Value::Varchar(format!("s{}", self.below(50))),
                3 => Value::Null,
                4 => Value::Bool(self.below(2) == 0),
                _ => Value::Timestamp(self.next() as i64 % 100_000),
            }
        }

        fn expr(&mut self, depth: u32) -> Expr {
            if depth == 0 {
                return match self.below(2) {
                    0 => Expr::col(&self.ident()),
                    _ => Expr::lit(self.value()),
                };
            }
            match self.below(8) {
                0 | 1 => Expr::bin(
                    self.expr(depth - 1),
                    [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div, BinOp::Mod]
                        [self.below(5) as usize],
                    self.expr(depth - 1),
                ),
                2 | 3 => Expr::bin(
                    self.expr(depth - 1),
                    [BinOp::Eq, BinOp::Ne, BinOp::Lt, BinOp::Le, BinOp::Gt, BinOp::Ge]
                        [self.below(6) as usize],
                    self.expr(depth - 1),
                ),
                4 => Expr::bin(
                    self.expr(depth - 1),
                    if self.below(2) == 0 { BinOp::And } else { BinOp::Or },
                    self.expr(depth - 1),
                ),
                5 => Expr::Unary {
                    op: if self.below(2) == 0 { UnaryOp::Neg } else { UnaryOp::Not },
                    expr: Box::new(self.expr(depth - 1)),
                },
                6 => Expr::IsNull {
                    expr: Box::new(self.expr(depth - 1)),
                    negated: self.below(2) == 0,
                },
                _ => Expr::InList {
                    expr: Box::new(self.expr(depth - 1)),
                    list: (0..1 + self.below(3)).map(|_| Expr::lit(self.value())).collect(),
                    negated: self.below(2) == 0,
                },
            }
        }

        fn sel_expr(&mut self, depth: u32) -> SelExpr {
            let e = match self.below(4) {
                0 => SelExpr::Agg {
                    func: [AggFunc::Count, AggFunc::Sum, AggFunc::Min, AggFunc::Max, AggFunc::Avg]
                        [self.below(5) as usize],
                    arg: Some(self.expr(1)),
                },
                1 => SelExpr::Agg {
                    func: if self.below(2) == 0 { AggFunc::Count } else { AggFunc::CountDistinct },
                    arg: if self.below(2) == 0 { None } else { Some(self.expr(1)) },
                },
                2 if depth > 0 => SelExpr::Binary {
                    left: Box::new(self.sel_expr(depth - 1)),
                    op: [BinOp::Add, BinOp::Gt, BinOp::And][self.below(3) as usize],
                    right: Box::new(self.sel_expr(depth - 1)),
                },
                _ => SelExpr::Scalar(self.expr(depth)),
            };
            // CountDistinct must carry an argument.
            match e {
                SelExpr::Agg { func: AggFunc::CountDistinct, arg: None } => {
                    SelExpr::Agg { func: AggFunc::CountDistinct, arg: Some(self.expr(0)) }
                }
                other => other.collapse(),
            }
        }

        fn statement(&mut self) -> Statement {
            match self.below(10) {
                0 => Statement::CreateTable(CreateTable {
                    name: self.ident(),
                    columns: (0..1 + self.below(4))
                        .map(|i| {
                            (
                                format!("c{i}"),
                                [
                                    DataType::Int64,
                                    DataType::Float64,
                                    DataType::Varchar,
                                    DataType::Timestamp,
                                    DataType::Bool,
                                ][self.below(5) as usize],
                            )
                        })
                        .collect(),
                    partition_by: if self.below(2) == 0 { Some(self.expr(1)) } else { None },
                }),
                1 => Statement::Insert(Insert {
                    table: self.ident(),
                    columns: if self.below(2) == 0 {
                        vec![]
                    } else {
                        (0..1 + self.below(3)).map(|i| format!("c{i}")).collect()
                    },
                    rows: (0..1 + self.below(3))
                        .map(|_| (0..2).map(|_| Expr::lit(self.value())).collect())
                        .collect(),
                }),
                2 => Statement::Delete(Delete {
                    table: self.ident(),
                    where_pred: if self.below(2) == 0 { Some(self.expr(2)) } else { None },
                }),
                3 => Statement::Update(Update {
                    table: self.ident(),
                    sets: vec![(self.ident(), self.expr(1))],
                    where_pred: if self.below(2) == 0 { Some(self.expr(1)) } else { None },
                }),
                4 => Statement::Copy(CopyStmt {
                    table: self.ident(),
                    path: format!("p{}.csv", self.below(10)),
                    direct: self.below(2) == 0,
                    rejects: if self.below(2) == 0 { Some("r.txt".into()) } else { None },
                }),
                5 => Statement::DropPartition(DropPartition {
                    table: self.ident(),
                    key: Value::Int(self.next() as i64 % 10_000),
                }),
                _ => {
                    let nitems = 1 + self.below(3);
                    let grouped = self.below(2) == 0;
                    Statement::Select(Select {
                        items: (0..nitems)
                            .map(|i| SelectItem::Expr {
                                expr: self.sel_expr(2),
                                alias: if self.below(2) == 0 {
                                    Some(format!("o{i}"))
                                } else {
                                    None
                                },
                            })
                            .collect(),
                        from: if self.below(5) == 0 {
                            None
                        } else {
                            Some(FromClause {
                                first: TableRef {
                                    table: self.ident(),
                                    alias: Some("t0".into()),
                                },
                                joins: (0..self.below(3))
                                    .map(|i| JoinClause {
                                        kind: [
                                            JoinKind::Inner,
                                            JoinKind::Left,
                                            JoinKind::Right,
                                            JoinKind::Full,
                                        ][self.below(4) as usize],
                                        table: TableRef {
                                            table: self.ident(),
                                            alias: Some(format!("t{}", i + 1)),
                                        },
                                        on: Expr::bin(
                                            Expr::col("t0.k"),
                                            BinOp::Eq,
                                            Expr::col(&format!("t{}.k", i + 1)),
                                        ),
                                    })
                                    .collect(),
                            })
                        },
                        where_pred: if self.below(2) == 0 { Some(self.expr(2)) } else { None },
                        group_by: if grouped {
                            (0..self.below(3)).map(|_| self.expr(1)).collect()
                        } else {
                            vec![]
                        },
                        having: if grouped && self.below(2) == 0 {
                            Some(self.sel_expr(1))
                        } else {
                            None
                        },
                        order_by: (0..self.below(3))
                            .map(|_| {
                                (
                                    if self.below(2) == 0 {
                                        OrderKey::Pos(1 + self.below(nitems))
                                    } else {
                                        OrderKey::Name("o0".into())
                                    },
                                    self.below(2) == 0,
                                )
                            })
                            .collect(),
                        limit: if self.below(2) == 0 { Some(self.below(100)) } else { None },
                        at_epoch: if self.below(4) == 0 { Some(self.below(50)) } else { None },
                    })
                }
            }
        }
    }

    #[test]
    fn random_statement_corpus_round_trips() {
        let mut g = Gen { state: 0x5eed };
        for i in 0..10_000 {
            let ast = g.statement();
            let printed = ast.to_string();
            let back = parse(&printed)
                .unwrap_or_else(|e| panic!("statement {i}: parse of `{printed}`: {e}"));
            assert_eq!(ast, back, "statement {i} changed across print/parse: `{printed}`");
        }
    }

    // ---------------------------------------------------------------
    // Analysis

    fn two_table_catalog() -> DesignCatalog {
        use crate::catalog::{ColumnDef, ProjectionDef, Segmentation, TableSchema};
        let mut cat = DesignCatalog::new();
        cat.create_table(TableSchema {
            name: "fact".into(),
            columns: vec![
                ColumnDef { name: "k".into(), dtype: DataType::Int64 },
                ColumnDef { name: "v".into(), dtype: DataType::Int64 },
            ],
            partition_expr: None,
        })
        .unwrap();
        cat.create_table(TableSchema {
            name: "dim".into(),
            columns: vec![
                ColumnDef { name: "k".into(), dtype: DataType::Int64 },
                ColumnDef { name: "name".into(), dtype: DataType::Varchar },
            ],
            partition_expr: None,
        })
        .unwrap();
        for t in ["fact", "dim"] {
            cat.create_projection(
                ProjectionDef {
                    name: format!("{t}_super"),
                    anchor_table: t.into(),
                    columns: cat.table(t).unwrap().columns.iter().map(|c| c.name.clone()).collect(),
                    sort_order: vec!["k".into()],
                    segmentation: Segmentation::SegmentedBy(Expr::Func {
                        func: Func::Hash,
                        args: vec![Expr::col("k")],
                    }),
                    encodings: vec![],
                    is_super: true,
                    buddy_offset: 1,
                    needs_refresh: false,
                },
                false,
            )
            .unwrap();
        }
        cat
    }

    #[test]
    fn analyzes_join_into_unified_columns() {
        let cat = two_table_catalog();
        let Statement::Select(s) =
            parse("SELECT fact.v, dim.name FROM fact JOIN dim ON (fact.k = dim.k) WHERE (dim.name = 'x')")
                .unwrap()
        else {
            panic!()
        };
        let a = analyze_select(&cat, &s).unwrap();
        assert_eq!(a.tables.len(), 2);
        assert_eq!(a.tables[1].offset, 2);
        assert_eq!(a.joins[0].keys, vec![(0, 2)]);
        assert_eq!(a.filters.len(), 1);
        assert_eq!(a.items.len(), 2);
        assert_eq!(a.out_names, vec!["v", "name"]);
        assert_eq!(a.out_types, vec![DataType::Int64, DataType::Varchar]);
    }

    #[test]
    fn grouped_select_rewrites_aggregates() {
        let cat = two_table_catalog();
        let Statement::Select(s) = parse(
            "SELECT k, (COUNT(*) + 1) AS n, AVG(v) FROM fact GROUP BY k HAVING (COUNT(*) > 2) ORDER BY n DESC",
        )
        .unwrap() else {
            panic!()
        };
        let a = analyze_select(&cat, &s).unwrap();
        assert!(a.grouped);
        assert_eq!(a.group_keys.len(), 1);
        assert_eq!(a.aggs.len(), 2); // COUNT(*), AVG(v)
        // Items address the post-group row: key0, then agg slots.
        assert_eq!(a.items[0], Expr::col_at("key0", 0));
        assert_eq!(a.order_by, vec![(1, true)]);
        assert_eq!(a.out_types[2], DataType::Float64);
    }

    #[test]
    fn ungrouped_column_with_aggregate_rejected() {
        let cat = two_table_catalog();
        let Statement::Select(s) = parse("SELECT v, COUNT(*) FROM fact").unwrap() else {
            panic!()
        };
        assert!(analyze_select(&cat, &s).is_err());
    }

    #[test]
    fn ambiguous_bare_column_rejected() {
        let cat = two_table_catalog();
        let Statement::Select(s) =
            parse("SELECT k FROM fact JOIN dim ON (fact.k = dim.k)").unwrap()
        else {
            panic!()
        };
        assert!(analyze_select(&cat, &s).unwrap_err().to_string().contains("ambiguous"));
    }

    #[test]
    fn insert_coercion_and_reorder() {
        let cat = two_table_catalog();
        let Statement::Insert(i) =
            parse("INSERT INTO fact (v, k) VALUES (10, 1), (20, 2)").unwrap()
        else {
            panic!()
        };
        let rows = analyze_insert(&cat, &i).unwrap();
        assert_eq!(rows[0], vec![Value::Int(1), Value::Int(10)]);
        assert_eq!(rows[1], vec![Value::Int(2), Value::Int(20)]);
        // Arity mismatch.
        let Statement::Insert(i) = parse("INSERT INTO fact (v) VALUES (1, 2)").unwrap() else {
            panic!()
        };
        assert!(analyze_insert(&cat, &i).is_err());
    }

    #[test]
    fn star_expansion() {
        let cat = two_table_catalog();
        let Statement::Select(s) = parse("SELECT * FROM fact").unwrap() else { panic!() };
        let a = analyze_select(&cat, &s).unwrap();
        assert_eq!(a.out_names, vec!["k", "v"]);
    }

    // ---------------------------------------------------------------
    // CSV splitting

    #[test]
    fn csv_quoting_and_nulls() {
        assert_eq!(
            split_csv(r#"1,"a,b",\N,"say ""hi""""#).unwrap(),
            vec![
                Some("1".into()),
                Some("a,b".into()),
                None,
                Some("say \"hi\"".into())
            ]
        );
        assert_eq!(split_csv("").unwrap(), vec![Some("".into())]);
        assert!(split_csv("\"unterminated").is_err());
    }

    #[test]
    fn csv_rows_convert_or_reject() {
        let types = [DataType::Int64, DataType::Varchar, DataType::Timestamp];
        let row = parse_csv_row("5,hello,2012-03-15", &types).unwrap();
        assert_eq!(row[0], Value::Int(5));
        assert_eq!(row[2], Value::Timestamp(unix_from_civil(2012, 3, 15)));
        let err = parse_csv_row("x,hello,0", &types).unwrap_err();
        assert!(err.contains("not an integer"), "{err}");
        let err = parse_csv_row("5,hello", &types).unwrap_err();
        assert!(err.contains("expected 3 fields"), "{err}");
    }
}
