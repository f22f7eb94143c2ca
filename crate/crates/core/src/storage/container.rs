//! ROS containers: immutable sorted column files plus per-block position
//! indexes.
//!
//! A container is one sorted run of one projection's rows, confined to a
//! single partition key and local segment. Each column is a pair of files:
//! `<id>_<col>.dat` holds encoded blocks, `<id>_<col>.idx` holds fixed-width
//! index entries (start position, file offset, min/max prefixes). Positions
//! are implicit: the i-th row of the container has position i, in every
//! column file. Mixed-epoch containers carry a hidden epoch column.

use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::catalog::Epoch;
use crate::encoding::{
    decode_block, encode_block, read_block, write_block, EncodedBlock, EncodingType, BLOCK_CAP,
};
use crate::error::{Error, Result};
use crate::util::crc32;
use crate::value::{DataType, Row, Value};

pub type ContainerId = u64;

/// Name of the hidden per-row epoch column in mixed-epoch containers.
pub const EPOCH_COLUMN: &str = "__epoch";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnFileMeta {
    pub name: String,
    pub encoding: EncodingType,
    pub data_file: String,
    pub index_file: String,
    pub data_bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContainerMeta {
    pub id: ContainerId,
    pub projection: String,
    /// Which copy this is: 0 = primary placement, j = j-th buddy.
    pub replica: u32,
    pub partition_key: Value,
    /// Global segment id for segmented projections; 0 for replicated ones.
    pub segment: u32,
    pub row_count: u64,
    /// Commit epoch range of the rows. Equal min/max means single-epoch and
    /// no hidden epoch column.
    pub epoch_min: Epoch,
    pub epoch_max: Epoch,
    pub columns: Vec<ColumnFileMeta>,
    /// Hidden per-row epoch column, present iff epoch_min < epoch_max.
    pub epoch_column: Option<ColumnFileMeta>,
    /// Container-level extrema per column for pruning; None = all NULL.
    pub col_min: Vec<Option<Value>>,
    pub col_max: Vec<Option<Value>>,
    /// How many merge rewrites the most-travelled tuple in here has seen.
    pub rewrite_gen: u32,
}

impl ContainerMeta {
    pub fn total_bytes(&self) -> u64 {
        self.columns.iter().map(|c| c.data_bytes).sum::<u64>()
            + self.epoch_column.as_ref().map_or(0, |c| c.data_bytes)
    }

    pub fn file_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in self.columns.iter().chain(self.epoch_column.iter()) {
            out.push(c.data_file.clone());
            out.push(c.index_file.clone());
        }
        out
    }
}

/// A live, registered container. Holds the node-local root directory so
/// readers can open files. When `retired` is set, the backing files are
/// unlinked once the last reference drops, which lets in-flight scans finish
/// against merged-away containers.
#[derive(Debug)]
pub struct RosContainer {
    pub meta: ContainerMeta,
    pub root: PathBuf,
    retired: AtomicBool,
}

impl RosContainer {
    pub fn new(meta: ContainerMeta, root: PathBuf) -> Self {
        RosContainer { meta, root, retired: AtomicBool::new(false) }
    }

    pub fn retire(&self) {
        self.retired.store(true, Ordering::Release);
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.meta.columns.iter().position(|c| c.name == name)
    }

    pub fn open_column(&self, col: usize) -> Result<ColumnReader> {
        ColumnReader::open(&self.root, &self.meta.columns[col])
    }

    pub fn open_epoch_column(&self) -> Result<Option<ColumnReader>> {
        match &self.meta.epoch_column {
            Some(meta) => Ok(Some(ColumnReader::open(&self.root, meta)?)),
            None => Ok(None),
        }
    }

    /// Reads the tuple at `position` touching one block per column, located
    /// through the position index.
    pub fn reconstruct_tuple(&self, position: u64) -> Result<Row> {
        if position >= self.meta.row_count {
            return Err(Error::Storage(format!(
                "position {position} out of range (rows: {})",
                self.meta.row_count
            )));
        }
        let mut row = Vec::with_capacity(self.meta.columns.len());
        for col in 0..self.meta.columns.len() {
            let reader = self.open_column(col)?;
            let block_idx = reader.block_for_position(position)?;
            let block = reader.read_block(block_idx)?;
            let values = decode_block(&block)?;
            let offset = (position - reader.index[block_idx].start_position) as usize;
            row.push(values[offset].clone());
        }
        Ok(row)
    }

    /// Decodes the full container into rows plus per-row epochs. Mover,
    /// recovery, and tests use this; queries go through the block scanner.
    pub fn read_all_rows(&self) -> Result<(Vec<Row>, Vec<Epoch>)> {
        let ncols = self.meta.columns.len();
        let n = self.meta.row_count as usize;
        let mut cols: Vec<Vec<Value>> = Vec::with_capacity(ncols);
        for c in 0..ncols {
            let reader = self.open_column(c)?;
            cols.push(reader.read_all()?);
        }
        let epochs = match self.open_epoch_column()? {
            Some(reader) => reader
                .read_all()?
                .into_iter()
                .map(|v| v.as_i64().unwrap_or(0) as Epoch)
                .collect(),
            None => vec![self.meta.epoch_min; n],
        };
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            rows.push(cols.iter().map(|c| c[i].clone()).collect());
        }
        Ok((rows, epochs))
    }
}

impl Drop for RosContainer {
    fn drop(&mut self) {
        if self.retired.load(Ordering::Acquire) {
            for f in self.meta.file_names() {
                let _ = fs::remove_file(self.root.join(f));
            }
        }
    }
}

/// One position-index entry (40 bytes on disk).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexEntry {
    pub start_position: u64,
    pub file_offset: u64,
    /// Order-preserving 8-byte prefixes of the block's min/max. An all-NULL
    /// block stores the empty range (min > max).
    pub min_prefix: u64,
    pub max_prefix: u64,
}

impl IndexEntry {
    const WIRE: usize = 40;

    fn write(&self, out: &mut Vec<u8>) {
        let base = out.len();
        out.extend_from_slice(&self.start_position.to_le_bytes());
        out.extend_from_slice(&self.file_offset.to_le_bytes());
        out.extend_from_slice(&self.min_prefix.to_le_bytes());
        out.extend_from_slice(&self.max_prefix.to_le_bytes());
        let crc = crc32(&out[base..base + 32]);
        out.extend_from_slice(&crc.to_le_bytes());
        out.extend_from_slice(&[0u8; 4]);
    }

    fn read(buf: &[u8]) -> Result<IndexEntry> {
        if buf.len() < Self::WIRE {
            return Err(Error::Corrupt("truncated index entry".into()));
        }
        let stored = u32::from_le_bytes(buf[32..36].try_into().unwrap());
        if crc32(&buf[..32]) != stored {
            return Err(Error::Corrupt("index entry checksum mismatch".into()));
        }
        Ok(IndexEntry {
            start_position: u64::from_le_bytes(buf[0..8].try_into().unwrap()),
            file_offset: u64::from_le_bytes(buf[8..16].try_into().unwrap()),
            min_prefix: u64::from_le_bytes(buf[16..24].try_into().unwrap()),
            max_prefix: u64::from_le_bytes(buf[24..32].try_into().unwrap()),
        })
    }
}

/// Reader over one sealed column: full data bytes plus parsed index.
pub struct ColumnReader {
    pub data: Vec<u8>,
    pub index: Vec<IndexEntry>,
    pub encoding: EncodingType,
}

impl ColumnReader {
    pub fn open(root: &Path, meta: &ColumnFileMeta) -> Result<ColumnReader> {
        let mut data = Vec::new();
        File::open(root.join(&meta.data_file))?.read_to_end(&mut data)?;
        let mut raw = Vec::new();
        File::open(root.join(&meta.index_file))?.read_to_end(&mut raw)?;
        if raw.len() % IndexEntry::WIRE != 0 {
            return Err(Error::Corrupt("index file length not entry-aligned".into()));
        }
        let mut index = Vec::with_capacity(raw.len() / IndexEntry::WIRE);
        for chunk in raw.chunks(IndexEntry::WIRE) {
            let e = IndexEntry::read(chunk)?;
            if let Some(prev) = index.last() {
                let prev: &IndexEntry = prev;
                if e.start_position <= prev.start_position {
                    return Err(Error::Corrupt("index positions not increasing".into()));
                }
            }
            index.push(e);
        }
        Ok(ColumnReader { data, index, encoding: meta.encoding })
    }

    pub fn block_count(&self) -> usize {
        self.index.len()
    }

    /// Index of the block containing `position`.
    pub fn block_for_position(&self, position: u64) -> Result<usize> {
        match self.index.binary_search_by(|e| e.start_position.cmp(&position)) {
            Ok(i) => Ok(i),
            Err(0) => Err(Error::Corrupt("position before first block".into())),
            Err(i) => Ok(i - 1),
        }
    }

    pub fn read_block(&self, block: usize) -> Result<EncodedBlock> {
        let offset = self.index[block].file_offset as usize;
        let (b, _) = read_block(&self.data, offset)?;
        Ok(b)
    }

    pub fn read_all(&self) -> Result<Vec<Value>> {
        let mut out = Vec::new();
        for i in 0..self.block_count() {
            out.extend(decode_block(&self.read_block(i)?)?);
        }
        Ok(out)
    }
}

/// Per-row epoch assignment for a seal.
pub enum EpochSpec<'a> {
    Single(Epoch),
    PerRow(&'a [Epoch]),
}

/// Everything needed to seal one container.
pub struct SealRequest<'a> {
    pub projection: String,
    pub column_names: &'a [String],
    pub column_types: &'a [DataType],
    /// Declared encodings (may be AUTO); parallel to columns.
    pub encodings: &'a [EncodingType],
    /// Projection-shaped rows, already sorted by the projection sort order.
    pub rows: &'a [Row],
    pub partition_key: Value,
    pub segment: u32,
    pub replica: u32,
    pub epochs: EpochSpec<'a>,
    pub rewrite_gen: u32,
}

/// Writes all column files for a container under `root` (via `tmp`), fsyncs,
/// and returns the metadata. The container is not live until the caller
/// registers the metadata; files for never-registered containers are swept
/// at startup.
pub fn seal_container(root: &Path, tmp: &Path, id: ContainerId, req: &SealRequest<'_>) -> Result<ContainerMeta> {
    if req.rows.is_empty() {
        return Err(Error::Storage("cannot seal an empty container".into()));
    }
    let n = req.rows.len();
    let ncols = req.column_names.len();
    fs::create_dir_all(root.join("ros"))?;
    fs::create_dir_all(tmp)?;

    let (epoch_min, epoch_max) = match req.epochs {
        EpochSpec::Single(e) => (e, e),
        EpochSpec::PerRow(es) => {
            debug_assert_eq!(es.len(), n);
            (*es.iter().min().unwrap(), *es.iter().max().unwrap())
        }
    };

    let mut columns = Vec::with_capacity(ncols);
    let mut col_min = Vec::with_capacity(ncols);
    let mut col_max = Vec::with_capacity(ncols);
    let mut values = Vec::with_capacity(n);
    for c in 0..ncols {
        values.clear();
        values.extend(req.rows.iter().map(|r| r[c].clone()));
        let meta = write_column_files(
            root,
            tmp,
            id,
            &req.column_names[c],
            &values,
            req.column_types[c],
            req.encodings[c],
        )?;
        col_min.push(meta.1);
        col_max.push(meta.2);
        columns.push(meta.0);
    }

    let epoch_column = if epoch_min < epoch_max {
        let es: Vec<Value> = match req.epochs {
            EpochSpec::PerRow(es) => es.iter().map(|&e| Value::Int(e as i64)).collect(),
            EpochSpec::Single(_) => unreachable!("single epoch cannot be mixed"),
        };
        let meta =
            write_column_files(root, tmp, id, EPOCH_COLUMN, &es, DataType::Int64, EncodingType::Auto)?;
        Some(meta.0)
    } else {
        None
    };

    Ok(ContainerMeta {
        id,
        projection: req.projection.clone(),
        replica: req.replica,
        partition_key: req.partition_key.clone(),
        segment: req.segment,
        row_count: n as u64,
        epoch_min,
        epoch_max,
        columns,
        epoch_column,
        col_min,
        col_max,
        rewrite_gen: req.rewrite_gen,
    })
}

type SealedColumn = (ColumnFileMeta, Option<Value>, Option<Value>);

fn write_column_files(
    root: &Path,
    tmp: &Path,
    id: ContainerId,
    name: &str,
    values: &[Value],
    dtype: DataType,
    declared: EncodingType,
) -> Result<SealedColumn> {
    // Resolve AUTO once on the first block's worth of values.
    let resolved = match declared {
        EncodingType::Auto => {
            let sample = &values[..values.len().min(BLOCK_CAP)];
            crate::encoding::auto_select(sample, dtype, sample_is_sorted(sample))
        }
        other => other,
    };

    let mut data = Vec::new();
    let mut index = Vec::new();
    let mut start_position = 0u64;
    let mut min: Option<Value> = None;
    let mut max: Option<Value> = None;
    for chunk in values.chunks(BLOCK_CAP) {
        let block = encode_block(chunk, dtype, resolved)?;
        let (min_prefix, max_prefix) = match (&block.min, &block.max) {
            (Some(lo), Some(hi)) => (lo.order_prefix(), hi.order_prefix()),
            _ => (u64::MAX, 0), // all-NULL: empty range
        };
        if let Some(lo) = &block.min {
            if min.as_ref().map_or(true, |m| lo.total_cmp(m).is_lt()) {
                min = Some(lo.clone());
            }
        }
        if let Some(hi) = &block.max {
            if max.as_ref().map_or(true, |m| hi.total_cmp(m).is_gt()) {
                max = Some(hi.clone());
            }
        }
        IndexEntry {
            start_position,
            file_offset: data.len() as u64,
            min_prefix,
            max_prefix,
        }
        .write(&mut index);
        write_block(&mut data, &block);
        start_position += chunk.len() as u64;
    }

    let data_file = format!("ros/c{id}_{name}.dat");
    let index_file = format!("ros/c{id}_{name}.idx");
    write_atomically(root, tmp, &data_file, &data)?;
    write_atomically(root, tmp, &index_file, &index)?;
    Ok((
        ColumnFileMeta {
            name: name.to_string(),
            encoding: resolved,
            data_file,
            index_file,
            data_bytes: data.len() as u64,
        },
        min,
        max,
    ))
}

fn sample_is_sorted(values: &[Value]) -> bool {
    values.windows(2).all(|w| w[0].total_cmp(&w[1]).is_le())
}

/// Write-temp-then-rename so a crash never leaves a half-written live file.
pub fn write_atomically(root: &Path, tmp: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    fs::create_dir_all(tmp)?;
    let final_path = root.join(rel);
    if let Some(parent) = final_path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp_path = tmp.join(format!(
        "{}.tmp",
        final_path.file_name().unwrap().to_string_lossy()
    ));
    {
        let mut f = File::create(&tmp_path)?;
        f.write_all(bytes)?;
        f.sync_data()?;
    }
    fs::rename(&tmp_path, &final_path)?;
    Ok(())
}
