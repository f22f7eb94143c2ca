//! Unified error type. Parse errors carry source positions; everything else
//! is a category plus message, which keeps call sites terse.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at {line}:{col}: {msg}")]
    Parse { line: u32, col: u32, msg: String },

    #[error("catalog error: {0}")]
    Catalog(String),

    #[error("type error: {0}")]
    Type(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("storage error: {0}")]
    Storage(String),

    #[error("transaction error: {0}")]
    Txn(String),

    #[error("deadlock detected, transaction {0} aborted")]
    Deadlock(u64),

    #[error("cluster error: {0}")]
    Cluster(String),

    #[error("cluster is shut down: {0}")]
    Shutdown(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("execution error: {0}")]
    Exec(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn parse(line: u32, col: u32, msg: impl Into<String>) -> Error {
        Error::Parse { line, col, msg: msg.into() }
    }
}
