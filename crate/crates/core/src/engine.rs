//! Database facade. Placeholder while lower layers land.

use crate::error::Result;
use crate::value::Row;

#[derive(Debug, Clone)]
pub struct DbConfig {
    pub data_dir: std::path::PathBuf,
    pub nodes: usize,
    pub k_safety: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ExecOptions {
    pub explain: bool,
}

#[derive(Debug, Clone, Default)]
pub struct StatementResult {
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
    pub affected: u64,
    pub warnings: Vec<String>,
}

pub struct Database;

impl Database {
    pub fn open(_config: DbConfig) -> Result<Database> {
        unimplemented!("engine not wired yet")
    }
}
