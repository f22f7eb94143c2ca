//! Append-only metadata log.
//!
//! Every catalog mutation (DDL, container registration, epoch marks) is one
//! newline-delimited record: `<byte len> <crc32 hex> <json>`. Startup replays
//! the log in order. A torn final record (crash mid-append) is ignored;
//! corruption anywhere else is an error because later records may depend on
//! the damaged one.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::catalog::{ColumnDef, Epoch, ProjectionDef, TableSchema};
use crate::error::{Error, Result};
use crate::storage::{ContainerMeta, DvMeta};
use crate::util::crc32;
use crate::value::Value;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum MetaRecord {
    CreateTable { schema: TableSchema },
    CreateProjection { def: ProjectionDef, needs_refresh: bool },
    DropProjection { name: String },
    AddColumn { table: String, column: ColumnDef },
    RefreshDone { projection: String },
    /// Atomic container set change on one node: `added` become live,
    /// `retired` stop being live. Mergeout and drop-partition retire and add
    /// in one record so replay can never observe a half-applied swap.
    Containers { node: usize, added: Vec<ContainerMeta>, retired: Vec<u64> },
    DeleteVectors { node: usize, added: Vec<DvMeta>, retired: Vec<u64> },
    Commit { epoch: Epoch },
    Lge { projection: String, node: usize, epoch: Epoch },
    Ahm { epoch: Epoch },
    Topology { node_count: usize, k: u32, segment_owner: Vec<usize> },
    DropPartition { table: String, key: Value },
}

pub struct MetaLog {
    path: PathBuf,
    file: BufWriter<File>,
    fsync: bool,
}

impl MetaLog {
    pub fn open(path: &Path, fsync: bool) -> Result<MetaLog> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(MetaLog { path: path.to_path_buf(), file: BufWriter::new(file), fsync })
    }

    pub fn append(&mut self, rec: &MetaRecord) -> Result<()> {
        let json = serde_json::to_string(rec)
            .map_err(|e| Error::Catalog(format!("serialize metadata: {e}")))?;
        let crc = crc32(json.as_bytes());
        writeln!(self.file, "{} {:08x} {}", json.len(), crc, json)?;
        self.file.flush()?;
        if self.fsync {
            self.file.get_ref().sync_data()?;
        }
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Replays all intact records. A damaged or truncated *final* record is
    /// dropped (torn append); damage earlier in the log is corruption.
    pub fn replay(path: &Path) -> Result<Vec<MetaRecord>> {
        let mut text = String::new();
        match File::open(path) {
            Ok(mut f) => {
                f.read_to_string(&mut text)?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        }
        let mut out = Vec::new();
        let lines: Vec<&str> = text.split('\n').collect();
        let last_content = lines.iter().rposition(|l| !l.is_empty());
        for (i, line) in lines.iter().enumerate() {
            if line.is_empty() {
                continue;
            }
            let is_last = Some(i) == last_content;
            match parse_record(line) {
                Ok(rec) => out.push(rec),
                Err(e) => {
                    if is_last {
                        break; // torn tail from a crash mid-append
                    }
                    return Err(e);
                }
            }
        }
        Ok(out)
    }
}

fn parse_record(line: &str) -> Result<MetaRecord> {
    let bad = || Error::Corrupt(format!("malformed catalog record: {line:.60}"));
    let (len_s, rest) = line.split_once(' ').ok_or_else(bad)?;
    let (crc_s, json) = rest.split_once(' ').ok_or_else(bad)?;
    let len: usize = len_s.parse().map_err(|_| bad())?;
    let crc: u32 = u32::from_str_radix(crc_s, 16).map_err(|_| bad())?;
    if json.len() != len {
        return Err(Error::Corrupt(format!(
            "catalog record length mismatch: stated {len}, actual {}",
            json.len()
        )));
    }
    if crc32(json.as_bytes()) != crc {
        return Err(Error::Corrupt("catalog record checksum mismatch".into()));
    }
    serde_json::from_str(json).map_err(|e| Error::Corrupt(format!("catalog record decode: {e}")))
}
