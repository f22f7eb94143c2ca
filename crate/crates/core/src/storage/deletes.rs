//! Delete vectors: out-of-line tombstones for immutable storage.
//!
//! A delete vector records (position, delete_epoch) pairs against one target:
//! either a projection's WOS buffer or a specific ROS container. Fresh
//! vectors accumulate in memory (DVWOS); the tuple mover spills them to disk
//! (DVROS) as a pair of encoded column blocks. Multiple vectors may hit the
//! same target, and re-deleting an already-deleted position at a later epoch
//! is legal; readers take the earliest delete epoch per position.

use std::fs::{self, File};
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::catalog::Epoch;
use crate::encoding::{decode_block, encode_column, read_block, write_block, EncodingType};
use crate::error::{Error, Result};
use crate::storage::container::{write_atomically, ContainerId};
use crate::value::{DataType, Value};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DvTarget {
    Wos { projection: String, replica: u32 },
    Ros(ContainerId),
}

/// An in-memory delete vector. Entries are (position, delete_epoch), sorted
/// by position.
#[derive(Debug, Clone)]
pub struct DeleteVector {
    pub id: u64,
    pub target: DvTarget,
    pub entries: Vec<(u64, Epoch)>,
}

impl DeleteVector {
    pub fn epoch_range(&self) -> (Epoch, Epoch) {
        let min = self.entries.iter().map(|e| e.1).min().unwrap_or(0);
        let max = self.entries.iter().map(|e| e.1).max().unwrap_or(0);
        (min, max)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DvMeta {
    pub id: u64,
    pub container: ContainerId,
    pub file: String,
    pub entry_count: u64,
    pub epoch_min: Epoch,
    pub epoch_max: Epoch,
}

/// Writes a ROS-targeted delete vector to disk: positions column then epochs
/// column, both as standard encoded blocks (positions are sorted, so RLE or
/// a delta form typically wins).
pub fn write_dvros(root: &Path, tmp: &Path, dv: &DeleteVector) -> Result<DvMeta> {
    let container = match dv.target {
        DvTarget::Ros(id) => id,
        DvTarget::Wos { .. } => {
            return Err(Error::Storage("only ROS-targeted vectors are spilled".into()))
        }
    };
    fs::create_dir_all(root.join("dv"))?;
    let positions: Vec<Value> = dv.entries.iter().map(|e| Value::Int(e.0 as i64)).collect();
    let epochs: Vec<Value> = dv.entries.iter().map(|e| Value::Int(e.1 as i64)).collect();
    let mut bytes = Vec::new();
    for vals in [&positions, &epochs] {
        let (_, blocks) = encode_column(vals, DataType::Int64, EncodingType::Auto)?;
        bytes.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for b in &blocks {
            write_block(&mut bytes, b);
        }
    }
    let file = format!("dv/d{}.dv", dv.id);
    write_atomically(root, tmp, &file, &bytes)?;
    let (epoch_min, epoch_max) = dv.epoch_range();
    Ok(DvMeta {
        id: dv.id,
        container,
        file,
        entry_count: dv.entries.len() as u64,
        epoch_min,
        epoch_max,
    })
}

pub fn read_dvros(root: &Path, meta: &DvMeta) -> Result<DeleteVector> {
    let mut bytes = Vec::new();
    File::open(root.join(&meta.file))?.read_to_end(&mut bytes)?;
    let mut offset = 0usize;
    let mut cols: Vec<Vec<i64>> = Vec::with_capacity(2);
    for _ in 0..2 {
        if bytes.len() < offset + 4 {
            return Err(Error::Corrupt("truncated delete vector".into()));
        }
        let nblocks = u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
        offset += 4;
        let mut vals = Vec::new();
        for _ in 0..nblocks {
            let (block, consumed) = read_block(&bytes, offset)?;
            offset += consumed;
            for v in decode_block(&block)? {
                vals.push(v.as_i64().ok_or_else(|| {
                    Error::Corrupt("non-integer value in delete vector".into())
                })?);
            }
        }
        cols.push(vals);
    }
    if cols[0].len() != cols[1].len() || cols[0].len() as u64 != meta.entry_count {
        return Err(Error::Corrupt("delete vector entry count mismatch".into()));
    }
    let entries = cols[0]
        .iter()
        .zip(&cols[1])
        .map(|(&p, &e)| (p as u64, e as Epoch))
        .collect();
    Ok(DeleteVector { id: meta.id, target: DvTarget::Ros(meta.container), entries })
}

/// A spilled delete vector kept open for reads. Like containers, the file is
/// unlinked when the last reference to a retired vector drops.
#[derive(Debug)]
pub struct DvRos {
    pub meta: DvMeta,
    pub root: PathBuf,
    retired: std::sync::atomic::AtomicBool,
}

impl DvRos {
    pub fn new(meta: DvMeta, root: PathBuf) -> Self {
        DvRos { meta, root, retired: std::sync::atomic::AtomicBool::new(false) }
    }

    pub fn retire(&self) {
        self.retired.store(true, std::sync::atomic::Ordering::Release);
    }

    pub fn load(&self) -> Result<DeleteVector> {
        read_dvros(&self.root, &self.meta)
    }
}

impl Drop for DvRos {
    fn drop(&mut self) {
        if self.retired.load(std::sync::atomic::Ordering::Acquire) {
            let _ = fs::remove_file(self.root.join(&self.meta.file));
        }
    }
}

/// Merges delete vectors into a per-position earliest delete epoch, for
/// visibility checks during scans.
pub fn deletion_map(vectors: &[&DeleteVector]) -> Vec<(u64, Epoch)> {
    let mut all: Vec<(u64, Epoch)> = vectors.iter().flat_map(|v| v.entries.iter().copied()).collect();
    all.sort_unstable();
    all.dedup_by(|next, prev| {
        // Sorted ascending, so first entry per position has the minimum epoch.
        next.0 == prev.0
    });
    all
}

/// True if `position` is deleted as of snapshot `epoch`.
pub fn deleted_at(map: &[(u64, Epoch)], position: u64, epoch: Epoch) -> bool {
    match map.binary_search_by(|e| e.0.cmp(&position)) {
        Ok(i) => map[i].1 <= epoch,
        Err(_) => false,
    }
}
