//! Block codecs for column storage.
//!
//! Five concrete encodings plus AUTO, which resolves to a concrete one by
//! measuring a sample at seal time:
//!
//! * `RLE`            — (value, count) runs; the workhorse for sorted
//!                      low-cardinality columns.
//! * `DELTA_VALUE`    — each value as an unsigned offset from the block
//!                      minimum, bit-packed at a fixed width.
//! * `BLOCK_DICT`     — per-block sorted dictionary, bit-packed indexes; for
//!                      few-valued unsorted columns.
//! * `COMPRESSED_DELTA_RANGE` — zigzag delta from the previous value,
//!                      bit-packed; for mostly-sorted many-valued columns.
//! * `COMPRESSED_COMMON_DELTA` — dictionary of consecutive deltas,
//!                      entropy-coded with a canonical prefix code; for
//!                      sequences whose steps repeat (periodic timestamps,
//!                      dense ascending keys).
//!
//! Codecs are lossless, including NULLs (tracked in a per-block bitmap ahead
//! of the codec payload) and float bit patterns (delta codecs work on the raw
//! 64-bit representation). Blocks hold at most [`BLOCK_CAP`] values.

pub mod huffman;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{bit_width, crc32, unzigzag, zigzag, BitReader, BitWriter};
use crate::value::{DataType, Value};

/// Maximum values per encoded block (64 Ki). Keeps the position index near
/// 0.1% of data size while bounding decode working sets.
pub const BLOCK_CAP: usize = 65_536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncodingType {
    Auto,
    Rle,
    DeltaValue,
    BlockDict,
    CompressedDeltaRange,
    CompressedCommonDelta,
}

impl EncodingType {
    pub fn name(self) -> &'static str {
        match self {
            EncodingType::Auto => "AUTO",
            EncodingType::Rle => "RLE",
            EncodingType::DeltaValue => "DELTA_VALUE",
            EncodingType::BlockDict => "BLOCK_DICT",
            EncodingType::CompressedDeltaRange => "COMPRESSED_DELTA_RANGE",
            EncodingType::CompressedCommonDelta => "COMPRESSED_COMMON_DELTA",
        }
    }

    pub fn from_name(s: &str) -> Option<EncodingType> {
        match s.to_ascii_uppercase().as_str() {
            "AUTO" => Some(EncodingType::Auto),
            "RLE" => Some(EncodingType::Rle),
            "DELTA_VALUE" => Some(EncodingType::DeltaValue),
            "BLOCK_DICT" => Some(EncodingType::BlockDict),
            "COMPRESSED_DELTA_RANGE" => Some(EncodingType::CompressedDeltaRange),
            "COMPRESSED_COMMON_DELTA" => Some(EncodingType::CompressedCommonDelta),
            _ => None,
        }
    }

    fn tag(self) -> u8 {
        match self {
            EncodingType::Auto => 0,
            EncodingType::Rle => 1,
            EncodingType::DeltaValue => 2,
            EncodingType::BlockDict => 3,
            EncodingType::CompressedDeltaRange => 4,
            EncodingType::CompressedCommonDelta => 5,
        }
    }

    fn from_tag(t: u8) -> Option<EncodingType> {
        Some(match t {
            1 => EncodingType::Rle,
            2 => EncodingType::DeltaValue,
            3 => EncodingType::BlockDict,
            4 => EncodingType::CompressedDeltaRange,
            5 => EncodingType::CompressedCommonDelta,
            _ => return None,
        })
    }

    /// Delta codecs need a 64-bit numeric domain.
    pub fn applicable_to(self, dtype: DataType) -> bool {
        match self {
            EncodingType::Auto | EncodingType::Rle | EncodingType::BlockDict => true,
            EncodingType::DeltaValue
            | EncodingType::CompressedDeltaRange
            | EncodingType::CompressedCommonDelta => dtype.is_numeric(),
        }
    }
}

/// One encoded block of a single column.
#[derive(Debug, Clone)]
pub struct EncodedBlock {
    pub encoding: EncodingType,
    pub dtype: DataType,
    pub value_count: u64,
    /// Exact extrema of the decoded values, NULLs excluded. `None` when the
    /// block is entirely NULL.
    pub min: Option<Value>,
    pub max: Option<Value>,
    /// Null bitmap section followed by codec bytes.
    pub payload: Vec<u8>,
}

impl EncodedBlock {
    /// Size of this block in the wire format.
    pub fn wire_len(&self) -> u64 {
        let mut n = 1 + 8 + 1; // tag, count, extrema tag
        if self.min.is_some() {
            n += value_wire_len(self.min.as_ref().unwrap())
                + value_wire_len(self.max.as_ref().unwrap());
        }
        n + 4 + self.payload.len() as u64 + 4
    }
}

fn value_wire_len(v: &Value) -> u64 {
    match v {
        Value::Varchar(s) => 4 + s.len() as u64,
        Value::Bool(_) => 1,
        _ => 8,
    }
}

fn dtype_tag(d: DataType) -> u8 {
    match d {
        DataType::Int64 => 0,
        DataType::Float64 => 1,
        DataType::Varchar => 2,
        DataType::Timestamp => 3,
        DataType::Bool => 4,
    }
}

fn dtype_from_tag(t: u8) -> Option<DataType> {
    Some(match t {
        0 => DataType::Int64,
        1 => DataType::Float64,
        2 => DataType::Varchar,
        3 => DataType::Timestamp,
        4 => DataType::Bool,
        _ => return None,
    })
}

/// Raw 64-bit image of a numeric value; delta codecs operate on this domain
/// so float deltas stay lossless.
fn raw64(v: &Value) -> u64 {
    match v {
        Value::Int(i) | Value::Timestamp(i) => *i as u64,
        Value::Float(f) => f.to_bits(),
        _ => unreachable!("raw64 on non-numeric value"),
    }
}

fn value_from_raw(raw: u64, dtype: DataType) -> Value {
    match dtype {
        DataType::Int64 => Value::Int(raw as i64),
        DataType::Timestamp => Value::Timestamp(raw as i64),
        DataType::Float64 => Value::Float(f64::from_bits(raw)),
        _ => unreachable!("raw value for non-numeric type"),
    }
}

fn write_value_bytes(buf: &mut Vec<u8>, v: &Value, dtype: DataType) {
    match dtype {
        DataType::Int64 | DataType::Timestamp | DataType::Float64 => {
            buf.extend_from_slice(&raw64(v).to_le_bytes())
        }
        DataType::Bool => buf.push(match v {
            Value::Bool(b) => *b as u8,
            _ => unreachable!(),
        }),
        DataType::Varchar => match v {
            Value::Varchar(s) => {
                buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
                buf.extend_from_slice(s.as_bytes());
            }
            _ => unreachable!(),
        },
    }
}

struct ByteCursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        ByteCursor { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Corrupt("truncated block payload".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.data[self.pos..];
        self.pos = self.data.len();
        s
    }
}

fn read_value_bytes(cur: &mut ByteCursor<'_>, dtype: DataType) -> Result<Value> {
    Ok(match dtype {
        DataType::Int64 => Value::Int(cur.u64()? as i64),
        DataType::Timestamp => Value::Timestamp(cur.u64()? as i64),
        DataType::Float64 => Value::Float(f64::from_bits(cur.u64()?)),
        DataType::Bool => Value::Bool(cur.u8()? != 0),
        DataType::Varchar => {
            let len = cur.u32()? as usize;
            let bytes = cur.take(len)?;
            Value::Varchar(
                String::from_utf8(bytes.to_vec())
                    .map_err(|_| Error::Corrupt("invalid utf-8 in block".into()))?,
            )
        }
    })
}

/// Encodes one block. `values` must be non-empty, at most [`BLOCK_CAP`] long,
/// and homogeneous in `dtype` (NULLs allowed anywhere).
pub fn encode_block(values: &[Value], dtype: DataType, t: EncodingType) -> Result<EncodedBlock> {
    if values.is_empty() {
        return Err(Error::Encoding("cannot encode an empty block".into()));
    }
    if values.len() > BLOCK_CAP {
        return Err(Error::Encoding(format!(
            "block of {} values exceeds capacity {BLOCK_CAP}",
            values.len()
        )));
    }
    if !t.applicable_to(dtype) {
        return Err(Error::Encoding(format!(
            "{} is not applicable to {dtype}",
            t.name()
        )));
    }
    let t = match t {
        EncodingType::Auto => auto_select(values, dtype, is_sorted(values)),
        other => other,
    };

    let mut payload = Vec::new();
    let nulls: Vec<bool> = values.iter().map(Value::is_null).collect();
    let has_nulls = nulls.iter().any(|&b| b);
    payload.push(has_nulls as u8);
    if has_nulls {
        let mut bitmap = vec![0u8; (values.len() + 7) / 8];
        for (i, &isnull) in nulls.iter().enumerate() {
            if isnull {
                bitmap[i / 8] |= 1 << (i % 8);
            }
        }
        payload.extend_from_slice(&bitmap);
    }
    let present: Vec<&Value> = values.iter().filter(|v| !v.is_null()).collect();
    for v in &present {
        if v.data_type() != Some(dtype) {
            return Err(Error::Encoding(format!(
                "value {v:?} does not match column type {dtype}"
            )));
        }
    }

    let mut min: Option<Value> = None;
    let mut max: Option<Value> = None;
    for v in &present {
        if min.as_ref().map_or(true, |m| v.total_cmp(m).is_lt()) {
            min = Some((*v).clone());
        }
        if max.as_ref().map_or(true, |m| v.total_cmp(m).is_gt()) {
            max = Some((*v).clone());
        }
    }

    match t {
        EncodingType::Rle => encode_rle(&present, dtype, &mut payload),
        EncodingType::DeltaValue => encode_delta_value(&present, &mut payload),
        EncodingType::BlockDict => encode_block_dict(&present, dtype, &mut payload),
        EncodingType::CompressedDeltaRange => encode_delta_range(&present, &mut payload),
        EncodingType::CompressedCommonDelta => encode_common_delta(&present, &mut payload),
        EncodingType::Auto => unreachable!(),
    }

    Ok(EncodedBlock {
        encoding: t,
        dtype,
        value_count: values.len() as u64,
        min,
        max,
        payload,
    })
}

fn is_sorted(values: &[Value]) -> bool {
    values.windows(2).all(|w| w[0].total_cmp(&w[1]).is_le())
}

fn encode_rle(present: &[&Value], dtype: DataType, out: &mut Vec<u8>) {
    let mut runs: Vec<(&Value, u32)> = Vec::new();
    for v in present {
        match runs.last_mut() {
            Some((rv, count)) if rv.total_eq(v) => *count += 1,
            _ => runs.push((v, 1)),
        }
    }
    out.extend_from_slice(&(runs.len() as u32).to_le_bytes());
    for (v, count) in runs {
        debug_assert!(count > 0);
        write_value_bytes(out, v, dtype);
        out.extend_from_slice(&count.to_le_bytes());
    }
}

fn encode_delta_value(present: &[&Value], out: &mut Vec<u8>) {
    if present.is_empty() {
        return;
    }
    // Base is the smallest raw image, so all offsets are non-negative. For
    // integers the raw order matches value order via wrapping subtraction
    // from the true minimum.
    let raws: Vec<u64> = present.iter().map(|v| raw64(v)).collect();
    let base = match present[0] {
        Value::Float(_) => *raws.iter().min().unwrap(),
        _ => {
            let min = present.iter().map(|v| v.as_i64().unwrap()).min().unwrap();
            min as u64
        }
    };
    let width = raws
        .iter()
        .map(|&r| bit_width(r.wrapping_sub(base)))
        .max()
        .unwrap();
    out.extend_from_slice(&base.to_le_bytes());
    out.push(width as u8);
    let mut w = BitWriter::new();
    for &r in &raws {
        w.write_bits(r.wrapping_sub(base), width);
    }
    out.extend_from_slice(&w.finish());
}

fn encode_block_dict(present: &[&Value], dtype: DataType, out: &mut Vec<u8>) {
    let mut dict: Vec<&Value> = present.to_vec();
    dict.sort_by(|a, b| a.total_cmp(b));
    dict.dedup_by(|a, b| a.total_eq(b));
    out.extend_from_slice(&(dict.len() as u32).to_le_bytes());
    for v in &dict {
        write_value_bytes(out, v, dtype);
    }
    let width = if dict.len() <= 1 { 0 } else { bit_width(dict.len() as u64 - 1) };
    out.push(width as u8);
    let mut w = BitWriter::new();
    for v in present {
        let idx = dict
            .binary_search_by(|d| d.total_cmp(v))
            .expect("dictionary covers all values");
        w.write_bits(idx as u64, width);
    }
    out.extend_from_slice(&w.finish());
}

fn encode_delta_range(present: &[&Value], out: &mut Vec<u8>) {
    if present.is_empty() {
        return;
    }
    let raws: Vec<u64> = present.iter().map(|v| raw64(v)).collect();
    out.extend_from_slice(&raws[0].to_le_bytes());
    let zz: Vec<u64> = raws
        .windows(2)
        .map(|w| zigzag(w[1].wrapping_sub(w[0]) as i64))
        .collect();
    let width = zz.iter().copied().map(bit_width).max().unwrap_or(0);
    out.push(width as u8);
    let mut w = BitWriter::new();
    for &z in &zz {
        w.write_bits(z, width);
    }
    out.extend_from_slice(&w.finish());
}

fn encode_common_delta(present: &[&Value], out: &mut Vec<u8>) {
    if present.is_empty() {
        return;
    }
    let raws: Vec<u64> = present.iter().map(|v| raw64(v)).collect();
    out.extend_from_slice(&raws[0].to_le_bytes());
    let deltas: Vec<u64> = raws.windows(2).map(|w| w[1].wrapping_sub(w[0])).collect();
    // Dictionary of distinct deltas, sorted for canonical layout.
    let mut freq: HashMap<u64, u64> = HashMap::new();
    for &d in &deltas {
        *freq.entry(d).or_insert(0) += 1;
    }
    let mut dict: Vec<u64> = freq.keys().copied().collect();
    dict.sort_unstable();
    out.extend_from_slice(&(dict.len() as u32).to_le_bytes());
    for &d in &dict {
        out.extend_from_slice(&d.to_le_bytes());
    }
    if dict.is_empty() {
        return; // single value, no deltas
    }
    let freqs: Vec<u64> = dict.iter().map(|d| freq[d]).collect();
    let lengths = huffman::code_lengths(&freqs);
    out.extend_from_slice(&lengths);
    let enc = huffman::Encoder::new(&lengths);
    let index: HashMap<u64, usize> =
        dict.iter().enumerate().map(|(i, &d)| (d, i)).collect();
    let mut w = BitWriter::new();
    for &d in &deltas {
        enc.write(&mut w, index[&d]);
    }
    out.extend_from_slice(&w.finish());
}

/// Decodes a block back into values (exactly `value_count` of them).
pub fn decode_block(block: &EncodedBlock) -> Result<Vec<Value>> {
    let n = block.value_count as usize;
    let mut cur = ByteCursor::new(&block.payload);
    let has_nulls = cur.u8()? != 0;
    let mut nulls = vec![false; n];
    if has_nulls {
        let bitmap = cur.take((n + 7) / 8)?;
        for (i, slot) in nulls.iter_mut().enumerate() {
            *slot = bitmap[i / 8] & (1 << (i % 8)) != 0;
        }
    }
    let n_present = nulls.iter().filter(|&&b| !b).count();
    let dtype = block.dtype;

    let present = match block.encoding {
        EncodingType::Rle => decode_rle(&mut cur, dtype, n_present)?,
        EncodingType::DeltaValue => decode_delta_value(&mut cur, dtype, n_present)?,
        EncodingType::BlockDict => decode_block_dict(&mut cur, dtype, n_present)?,
        EncodingType::CompressedDeltaRange => decode_delta_range(&mut cur, dtype, n_present)?,
        EncodingType::CompressedCommonDelta => decode_common_delta(&mut cur, dtype, n_present)?,
        EncodingType::Auto => {
            return Err(Error::Corrupt("AUTO encoding in a sealed block".into()))
        }
    };
    debug_assert_eq!(present.len(), n_present);

    let mut out = Vec::with_capacity(n);
    let mut it = present.into_iter();
    for isnull in nulls {
        if isnull {
            out.push(Value::Null);
        } else {
            out.push(it.next().ok_or_else(|| Error::Corrupt("value underflow".into()))?);
        }
    }
    Ok(out)
}

fn decode_rle(cur: &mut ByteCursor<'_>, dtype: DataType, expect: usize) -> Result<Vec<Value>> {
    let run_count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(expect);
    for _ in 0..run_count {
        let v = read_value_bytes(cur, dtype)?;
        let count = cur.u32()? as usize;
        if count == 0 {
            return Err(Error::Corrupt("zero-count run".into()));
        }
        if out.len() + count > expect {
            return Err(Error::Corrupt("run overflow".into()));
        }
        for _ in 0..count {
            out.push(v.clone());
        }
    }
    if out.len() != expect {
        return Err(Error::Corrupt("run underflow".into()));
    }
    Ok(out)
}

/// Iterates an RLE payload at run granularity without expanding it.
pub fn rle_runs(block: &EncodedBlock) -> Result<Vec<(Value, u32)>> {
    if block.encoding != EncodingType::Rle {
        return Err(Error::Encoding("not an RLE block".into()));
    }
    let n = block.value_count as usize;
    let mut cur = ByteCursor::new(&block.payload);
    let has_nulls = cur.u8()? != 0;
    if has_nulls {
        // Nulls break run structure for callers; fall back to decode.
        return Err(Error::Encoding("RLE block with NULLs".into()));
    }
    let run_count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(run_count);
    let mut total = 0usize;
    for _ in 0..run_count {
        let v = read_value_bytes(&mut cur, block.dtype)?;
        let count = cur.u32()?;
        if count == 0 {
            return Err(Error::Corrupt("zero-count run".into()));
        }
        total += count as usize;
        out.push((v, count));
    }
    if total != n {
        return Err(Error::Corrupt("run count mismatch".into()));
    }
    Ok(out)
}

fn decode_delta_value(
    cur: &mut ByteCursor<'_>,
    dtype: DataType,
    expect: usize,
) -> Result<Vec<Value>> {
    if expect == 0 {
        return Ok(Vec::new());
    }
    let base = cur.u64()?;
    let width = cur.u8()? as u32;
    if width > 64 {
        return Err(Error::Corrupt("delta width out of range".into()));
    }
    let mut r = BitReader::new(cur.rest());
    let mut out = Vec::with_capacity(expect);
    for _ in 0..expect {
        let d = r
            .read_bits(width)
            .ok_or_else(|| Error::Corrupt("truncated delta stream".into()))?;
        out.push(value_from_raw(base.wrapping_add(d), dtype));
    }
    Ok(out)
}

fn decode_block_dict(
    cur: &mut ByteCursor<'_>,
    dtype: DataType,
    expect: usize,
) -> Result<Vec<Value>> {
    let dict_len = cur.u32()? as usize;
    if dict_len > BLOCK_CAP {
        return Err(Error::Corrupt("dictionary too large".into()));
    }
    let mut dict = Vec::with_capacity(dict_len);
    for _ in 0..dict_len {
        dict.push(read_value_bytes(cur, dtype)?);
    }
    let width = cur.u8()? as u32;
    if width > 32 {
        return Err(Error::Corrupt("dictionary index width out of range".into()));
    }
    if expect > 0 && dict.is_empty() {
        return Err(Error::Corrupt("empty dictionary".into()));
    }
    let mut r = BitReader::new(cur.rest());
    let mut out = Vec::with_capacity(expect);
    for _ in 0..expect {
        let idx = r
            .read_bits(width)
            .ok_or_else(|| Error::Corrupt("truncated dictionary indexes".into()))?
            as usize;
        let v = dict
            .get(idx)
            .ok_or_else(|| Error::Corrupt("dictionary index out of range".into()))?;
        out.push(v.clone());
    }
    Ok(out)
}

fn decode_delta_range(
    cur: &mut ByteCursor<'_>,
    dtype: DataType,
    expect: usize,
) -> Result<Vec<Value>> {
    if expect == 0 {
        return Ok(Vec::new());
    }
    let first = cur.u64()?;
    let width = cur.u8()? as u32;
    if width > 64 {
        return Err(Error::Corrupt("delta width out of range".into()));
    }
    let mut out = Vec::with_capacity(expect);
    out.push(value_from_raw(first, dtype));
    let mut prev = first;
    let mut r = BitReader::new(cur.rest());
    for _ in 1..expect {
        let z = r
            .read_bits(width)
            .ok_or_else(|| Error::Corrupt("truncated delta stream".into()))?;
        prev = prev.wrapping_add(unzigzag(z) as u64);
        out.push(value_from_raw(prev, dtype));
    }
    Ok(out)
}

fn decode_common_delta(
    cur: &mut ByteCursor<'_>,
    dtype: DataType,
    expect: usize,
) -> Result<Vec<Value>> {
    if expect == 0 {
        return Ok(Vec::new());
    }
    let first = cur.u64()?;
    let dict_len = cur.u32()? as usize;
    if dict_len > BLOCK_CAP {
        return Err(Error::Corrupt("delta dictionary too large".into()));
    }
    if expect > 1 && dict_len == 0 {
        return Err(Error::Corrupt("empty delta dictionary".into()));
    }
    let mut dict = Vec::with_capacity(dict_len);
    for _ in 0..dict_len {
        dict.push(cur.u64()?);
    }
    let mut out = Vec::with_capacity(expect);
    out.push(value_from_raw(first, dtype));
    if expect == 1 {
        return Ok(out);
    }
    let lengths = cur.take(dict_len)?.to_vec();
    let dec = huffman::Decoder::new(&lengths)?;
    let mut r = BitReader::new(cur.rest());
    let mut prev = first;
    for _ in 1..expect {
        let sym = dec.read(&mut r)? as usize;
        let d = *dict
            .get(sym)
            .ok_or_else(|| Error::Corrupt("delta symbol out of range".into()))?;
        prev = prev.wrapping_add(d);
        out.push(value_from_raw(prev, dtype));
    }
    Ok(out)
}

/// Picks the concrete encoding with the smallest measured size on the sample.
/// Ties break in a fixed preference order (RLE first: it also enables
/// run-level execution). `sorted` is a hint callers already know; selection
/// is by measurement either way.
pub fn auto_select(sample: &[Value], dtype: DataType, sorted: bool) -> EncodingType {
    let _ = sorted;
    let candidates = [
        EncodingType::Rle,
        EncodingType::CompressedCommonDelta,
        EncodingType::CompressedDeltaRange,
        EncodingType::DeltaValue,
        EncodingType::BlockDict,
    ];
    let mut best = EncodingType::Rle;
    let mut best_size = u64::MAX;
    for t in candidates {
        if !t.applicable_to(dtype) {
            continue;
        }
        match measure_encoded_size(sample, dtype, t) {
            Ok(size) if size < best_size => {
                best_size = size;
                best = t;
            }
            _ => {}
        }
    }
    best
}

/// Total wire bytes for `values` under encoding `t`, chunked into blocks.
pub fn measure_encoded_size(values: &[Value], dtype: DataType, t: EncodingType) -> Result<u64> {
    if !t.applicable_to(dtype) {
        return Err(Error::Encoding(format!("{} is not applicable to {dtype}", t.name())));
    }
    let mut total = 0u64;
    for chunk in values.chunks(BLOCK_CAP) {
        total += encode_block(chunk, dtype, t)?.wire_len();
    }
    Ok(total)
}

/// Writes a block in the wire format:
/// encoding tag (1B) | value_count (8B LE) | extrema tag (1B) | min | max |
/// payload length (4B LE) | payload | CRC32 of all preceding bytes (4B LE).
/// The extrema tag carries the column type in its low bits; 0x80 means the
/// block is all-NULL and min/max are absent.
pub fn write_block(out: &mut Vec<u8>, block: &EncodedBlock) {
    let start = out.len();
    out.push(block.encoding.tag());
    out.extend_from_slice(&block.value_count.to_le_bytes());
    match (&block.min, &block.max) {
        (Some(min), Some(max)) => {
            out.push(dtype_tag(block.dtype));
            write_value_bytes(out, min, block.dtype);
            write_value_bytes(out, max, block.dtype);
        }
        _ => out.push(dtype_tag(block.dtype) | 0x80),
    }
    out.extend_from_slice(&(block.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&block.payload);
    let crc = crc32(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

/// Reads one block from `data` starting at `offset`. Returns the block and
/// the number of bytes consumed. Verifies the CRC.
pub fn read_block(data: &[u8], offset: usize) -> Result<(EncodedBlock, usize)> {
    let mut cur = ByteCursor::new(&data[offset.min(data.len())..]);
    let enc_tag = cur.u8()?;
    let encoding = EncodingType::from_tag(enc_tag)
        .ok_or_else(|| Error::Corrupt(format!("bad encoding tag {enc_tag}")))?;
    let value_count = cur.u64()?;
    if value_count as usize > BLOCK_CAP {
        return Err(Error::Corrupt("value count exceeds block capacity".into()));
    }
    let ext_tag = cur.u8()?;
    let dtype = dtype_from_tag(ext_tag & 0x7f)
        .ok_or_else(|| Error::Corrupt(format!("bad type tag {ext_tag}")))?;
    let (min, max) = if ext_tag & 0x80 != 0 {
        (None, None)
    } else {
        (
            Some(read_value_bytes(&mut cur, dtype)?),
            Some(read_value_bytes(&mut cur, dtype)?),
        )
    };
    let payload_len = cur.u32()? as usize;
    let payload = cur.take(payload_len)?.to_vec();
    let body_len = cur.pos;
    let crc_stored = cur.u32()?;
    let crc_actual = crc32(&data[offset..offset + body_len]);
    if crc_stored != crc_actual {
        return Err(Error::Corrupt("block checksum mismatch".into()));
    }
    Ok((
        EncodedBlock { encoding, dtype, value_count, min, max, payload },
        body_len + 4,
    ))
}

/// Encodes a full column into wire-format blocks of at most [`BLOCK_CAP`]
/// values. AUTO resolves once on the first block's sample and applies to the
/// whole column. Returns the chosen encoding and per-block (row offset,
/// byte offset, block) triples flattened into a byte stream via `write_block`.
pub fn encode_column(
    values: &[Value],
    dtype: DataType,
    t: EncodingType,
) -> Result<(EncodingType, Vec<EncodedBlock>)> {
    if values.is_empty() {
        return Err(Error::Encoding("cannot encode an empty column".into()));
    }
    let resolved = match t {
        EncodingType::Auto => {
            let sample = &values[..values.len().min(BLOCK_CAP)];
            auto_select(sample, dtype, is_sorted(sample))
        }
        other => other,
    };
    let mut blocks = Vec::with_capacity(values.len().div_ceil(BLOCK_CAP));
    for chunk in values.chunks(BLOCK_CAP) {
        blocks.push(encode_block(chunk, dtype, resolved)?);
    }
    Ok((resolved, blocks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    const NUMERIC_CODECS: [EncodingType; 5] = [
        EncodingType::Rle,
        EncodingType::DeltaValue,
        EncodingType::BlockDict,
        EncodingType::CompressedDeltaRange,
        EncodingType::CompressedCommonDelta,
    ];

    fn ints(vals: &[i64]) -> Vec<Value> {
        vals.iter().map(|&v| Value::Int(v)).collect()
    }

    fn roundtrip(values: &[Value], dtype: DataType, t: EncodingType) {
        let block = encode_block(values, dtype, t).unwrap();
        assert_eq!(block.value_count as usize, values.len());
        let decoded = decode_block(&block).unwrap();
        assert_eq!(decoded.len(), values.len());
        for (a, b) in values.iter().zip(&decoded) {
            assert!(
                a.total_eq(b) || (a.is_null() && b.is_null()),
                "{a:?} != {b:?} under {}",
                t.name()
            );
        }
        // Wire roundtrip too.
        let mut buf = Vec::new();
        write_block(&mut buf, &block);
        let (back, used) = read_block(&buf, 0).unwrap();
        assert_eq!(used, buf.len());
        assert_eq!(back.payload, block.payload);
        assert_eq!(back.value_count, block.value_count);
        assert_eq!(decode_block(&back).unwrap().len(), values.len());
    }

    #[test]
    fn rle_definition_example() {
        // [a,a,a,b,b] -> runs (a,3),(b,2), count 5.
        let vals = ints(&[7, 7, 7, 9, 9]);
        let block = encode_block(&vals, DataType::Int64, EncodingType::Rle).unwrap();
        assert_eq!(block.value_count, 5);
        let runs = rle_runs(&block).unwrap();
        assert_eq!(runs.len(), 2);
        assert!(runs[0].0.total_eq(&Value::Int(7)) && runs[0].1 == 3);
        assert!(runs[1].0.total_eq(&Value::Int(9)) && runs[1].1 == 2);
        roundtrip(&vals, DataType::Int64, EncodingType::Rle);
    }

    #[test]
    fn delta_value_uses_block_minimum() {
        // [107,103,109] -> base 103, offsets [4,0,6].
        let vals = ints(&[107, 103, 109]);
        let block = encode_block(&vals, DataType::Int64, EncodingType::DeltaValue).unwrap();
        let base = u64::from_le_bytes(block.payload[1..9].try_into().unwrap());
        assert_eq!(base, 103);
        let width = block.payload[9];
        assert_eq!(width, 3); // max offset 6 needs 3 bits
        assert!(block.min.as_ref().unwrap().total_eq(&Value::Int(103)));
        assert!(block.max.as_ref().unwrap().total_eq(&Value::Int(109)));
        roundtrip(&vals, DataType::Int64, EncodingType::DeltaValue);
    }

    #[test]
    fn common_delta_periodic_timestamps() {
        // Fixed 300 s cadence with one 305 s break: dictionary {300, 305},
        // entropy-coded indexes well under 2 bits/value.
        let mut ts = Vec::new();
        let mut t = 1_600_000_000i64;
        for i in 0..10_000 {
            ts.push(Value::Timestamp(t));
            t += if i == 4999 { 305 } else { 300 };
        }
        let block =
            encode_block(&ts, DataType::Timestamp, EncodingType::CompressedCommonDelta).unwrap();
        // Oracle: independent reconstruction must match input exactly.
        let decoded = decode_block(&block).unwrap();
        for (a, b) in ts.iter().zip(&decoded) {
            assert!(a.total_eq(b));
        }
        // Payload layout: [has_nulls][first 8B][dict_len 4B][dict 8B each]...
        let dict_len = u32::from_le_bytes(block.payload[9..13].try_into().unwrap());
        assert_eq!(dict_len, 2);
        let d0 = u64::from_le_bytes(block.payload[13..21].try_into().unwrap());
        let d1 = u64::from_le_bytes(block.payload[21..29].try_into().unwrap());
        assert_eq!((d0, d1), (300, 305));
        let bits_per_value = block.payload.len() as f64 * 8.0 / ts.len() as f64;
        assert!(bits_per_value < 2.0, "{bits_per_value} bits/value");
    }

    #[test]
    fn roundtrip_10k_random_ints_all_numeric_codecs() {
        let mut rng = StdRng::seed_from_u64(7);
        let vals: Vec<Value> = (0..10_000).map(|_| Value::Int(rng.gen())).collect();
        for t in NUMERIC_CODECS {
            roundtrip(&vals, DataType::Int64, t);
        }
    }

    #[test]
    fn roundtrip_floats_including_special_bits() {
        let mut rng = StdRng::seed_from_u64(8);
        let mut vals: Vec<Value> = (0..5_000)
            .map(|_| Value::Float(f64::from_bits(rng.gen())))
            .collect();
        vals.push(Value::Float(f64::NAN));
        vals.push(Value::Float(-0.0));
        vals.push(Value::Float(0.0));
        vals.push(Value::Float(f64::INFINITY));
        for t in NUMERIC_CODECS {
            let block = encode_block(&vals, DataType::Float64, t).unwrap();
            let decoded = decode_block(&block).unwrap();
            for (a, b) in vals.iter().zip(&decoded) {
                // Bit-exact, not just total_eq.
                match (a, b) {
                    (Value::Float(x), Value::Float(y)) => {
                        assert_eq!(x.to_bits(), y.to_bits(), "under {}", t.name())
                    }
                    _ => panic!("type changed"),
                }
            }
        }
    }

    #[test]
    fn roundtrip_with_nulls_everywhere() {
        let mut rng = StdRng::seed_from_u64(9);
        let vals: Vec<Value> = (0..4_096)
            .map(|_| {
                if rng.gen_bool(0.3) {
                    Value::Null
                } else {
                    Value::Int(rng.gen_range(-50..50))
                }
            })
            .collect();
        for t in NUMERIC_CODECS {
            roundtrip(&vals, DataType::Int64, t);
        }
        // All-NULL block: extrema absent.
        let all_null = vec![Value::Null; 100];
        for t in NUMERIC_CODECS {
            let block = encode_block(&all_null, DataType::Int64, t).unwrap();
            assert!(block.min.is_none() && block.max.is_none());
            let decoded = decode_block(&block).unwrap();
            assert!(decoded.iter().all(Value::is_null));
            assert_eq!(decoded.len(), 100);
        }
    }

    #[test]
    fn roundtrip_varchar_and_bool() {
        let strs: Vec<Value> = ["red", "red", "green", "", "blue", "blue", "blue"]
            .iter()
            .map(|s| Value::Varchar(s.to_string()))
            .collect();
        for t in [EncodingType::Rle, EncodingType::BlockDict] {
            roundtrip(&strs, DataType::Varchar, t);
        }
        let bools: Vec<Value> =
            [true, true, false, true, false].iter().map(|&b| Value::Bool(b)).collect();
        for t in [EncodingType::Rle, EncodingType::BlockDict] {
            roundtrip(&bools, DataType::Bool, t);
        }
        // Delta codecs reject non-numeric types.
        assert!(encode_block(&strs, DataType::Varchar, EncodingType::DeltaValue).is_err());
        assert!(
            encode_block(&bools, DataType::Bool, EncodingType::CompressedCommonDelta).is_err()
        );
    }

    #[test]
    fn min_max_exclude_nulls() {
        let vals = vec![Value::Null, Value::Int(5), Value::Int(-3), Value::Null];
        let block = encode_block(&vals, DataType::Int64, EncodingType::Rle).unwrap();
        assert!(block.min.as_ref().unwrap().total_eq(&Value::Int(-3)));
        assert!(block.max.as_ref().unwrap().total_eq(&Value::Int(5)));
    }

    #[test]
    fn zero_count_run_is_corruption() {
        let vals = ints(&[1, 1, 2]);
        let block = encode_block(&vals, DataType::Int64, EncodingType::Rle).unwrap();
        // Forge a zero count in the first run: payload is
        // [has_nulls][run_count 4B][value 8B][count 4B]...
        let mut forged = block.clone();
        forged.payload[13..17].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_block(&forged), Err(Error::Corrupt(_))));
    }

    #[test]
    fn corrupted_wire_bytes_fail_checksum() {
        let vals = ints(&[10, 20, 30, 40]);
        let block = encode_block(&vals, DataType::Int64, EncodingType::DeltaValue).unwrap();
        let mut buf = Vec::new();
        write_block(&mut buf, &block);
        for pos in 0..buf.len() {
            let mut dirty = buf.clone();
            dirty[pos] ^= 0x40;
            assert!(read_block(&dirty, 0).is_err(), "flip at {pos} went unnoticed");
        }
    }

    #[test]
    fn decode_fuzz_never_panics() {
        let mut rng = StdRng::seed_from_u64(10);
        for _ in 0..2_000 {
            let len = rng.gen_range(0..200);
            let junk: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let _ = read_block(&junk, 0);
            // Well-formed header, garbage payload.
            let block = EncodedBlock {
                encoding: NUMERIC_CODECS[rng.gen_range(0..NUMERIC_CODECS.len())],
                dtype: DataType::Int64,
                value_count: rng.gen_range(0..100),
                min: Some(Value::Int(0)),
                max: Some(Value::Int(1)),
                payload: junk,
            };
            let _ = decode_block(&block);
        }
    }

    #[test]
    fn auto_select_prefers_rle_on_sorted_low_cardinality() {
        // Few distinct values, long runs: run-length wins outright.
        let mut vals = Vec::new();
        for d in 0..20i64 {
            for _ in 0..3000 {
                vals.push(Value::Int(d));
            }
        }
        assert_eq!(auto_select(&vals, DataType::Int64, true), EncodingType::Rle);
    }

    #[test]
    fn auto_select_prefers_dict_on_few_valued_unsorted() {
        // Stock-price-like: a handful of distinct floats in random order.
        let mut rng = StdRng::seed_from_u64(11);
        let prices = [101.25f64, 101.5, 101.75, 102.0, 102.25];
        let vals: Vec<Value> = (0..20_000)
            .map(|_| Value::Float(prices[rng.gen_range(0..prices.len())]))
            .collect();
        assert_eq!(auto_select(&vals, DataType::Float64, false), EncodingType::BlockDict);
    }

    #[test]
    fn auto_select_prefers_common_delta_on_periodic_timestamps() {
        let vals: Vec<Value> =
            (0..20_000).map(|i| Value::Timestamp(1_600_000_000 + 300 * i)).collect();
        assert_eq!(
            auto_select(&vals, DataType::Timestamp, true),
            EncodingType::CompressedCommonDelta
        );
    }

    #[test]
    fn auto_select_is_optimal_on_its_sample() {
        let mut rng = StdRng::seed_from_u64(12);
        for case in 0..30 {
            let n = rng.gen_range(1..3_000);
            let vals: Vec<Value> = match case % 3 {
                0 => (0..n).map(|_| Value::Int(rng.gen_range(-100..100))).collect(),
                1 => {
                    let mut v: Vec<i64> = (0..n).map(|_| rng.gen_range(0..1_000_000)).collect();
                    v.sort_unstable();
                    v.into_iter().map(Value::Int).collect()
                }
                _ => (0..n).map(|_| Value::Int(rng.gen())).collect(),
            };
            let chosen = auto_select(&vals, DataType::Int64, false);
            let chosen_size = measure_encoded_size(&vals, DataType::Int64, chosen).unwrap();
            for t in NUMERIC_CODECS {
                let other = measure_encoded_size(&vals, DataType::Int64, t).unwrap();
                assert!(
                    chosen_size <= other,
                    "{} ({chosen_size}) beaten by {} ({other})",
                    chosen.name(),
                    t.name()
                );
            }
        }
    }

    #[test]
    fn constant_column_under_rle_is_tiny() {
        let vals = vec![Value::Int(42); 1_000_000];
        let size = measure_encoded_size(&vals, DataType::Int64, EncodingType::Rle).unwrap();
        // 16 blocks; each a single run.
        assert!(size < 100 * 16, "{size} bytes");
        let one_block = encode_block(&vals[..BLOCK_CAP], DataType::Int64, EncodingType::Rle)
            .unwrap()
            .wire_len();
        assert!(one_block < 100, "{one_block} bytes per block");
    }

    #[test]
    fn rle_larger_than_dict_on_unsorted_high_cardinality() {
        let mut rng = StdRng::seed_from_u64(13);
        let vals: Vec<Value> =
            (0..BLOCK_CAP).map(|_| Value::Int(rng.gen_range(0..5_000))).collect();
        let rle = measure_encoded_size(&vals, DataType::Int64, EncodingType::Rle).unwrap();
        let dict = measure_encoded_size(&vals, DataType::Int64, EncodingType::BlockDict).unwrap();
        assert!(rle > dict, "rle {rle} <= dict {dict}");
    }

    #[test]
    fn million_sorted_random_ints_fit_budget() {
        // Values in [1, 10^7]; sorted. Best codec must land under 1.2 MB.
        let mut rng = StdRng::seed_from_u64(14);
        let mut raw: Vec<i64> = (0..1_000_000).map(|_| rng.gen_range(1..=10_000_000)).collect();
        raw.sort_unstable();
        let vals: Vec<Value> = raw.into_iter().map(Value::Int).collect();
        let chosen = auto_select(&vals[..BLOCK_CAP], DataType::Int64, true);
        let size = measure_encoded_size(&vals, DataType::Int64, chosen).unwrap();
        assert!(size <= 1_200_000, "{} bytes under {}", size, chosen.name());
    }

    #[test]
    fn block_capacity_enforced() {
        let vals = vec![Value::Int(1); BLOCK_CAP + 1];
        assert!(encode_block(&vals, DataType::Int64, EncodingType::Rle).is_err());
        let (_, blocks) = encode_column(&vals, DataType::Int64, EncodingType::Rle).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].value_count as usize, BLOCK_CAP);
        assert_eq!(blocks[1].value_count, 1);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(encode_block(&[], DataType::Int64, EncodingType::Rle).is_err());
        assert!(encode_column(&[], DataType::Int64, EncodingType::Auto).is_err());
    }

    #[test]
    fn auto_never_appears_in_encoded_blocks() {
        let vals = ints(&[5, 5, 6]);
        let block = encode_block(&vals, DataType::Int64, EncodingType::Auto).unwrap();
        assert_ne!(block.encoding, EncodingType::Auto);
        let (resolved, blocks) = encode_column(&vals, DataType::Int64, EncodingType::Auto).unwrap();
        assert_ne!(resolved, EncodingType::Auto);
        assert!(blocks.iter().all(|b| b.encoding == resolved));
    }
}
