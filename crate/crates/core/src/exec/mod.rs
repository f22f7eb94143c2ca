//! Vectorized pull-model executor.
//!
//! Operators exchange `RowBlock`s of up to `BLOCK_ROWS` rows and produce
//! nothing until the consumer asks. Every stateful operator runs under an
//! `OperatorBudget`; state that would exceed the budget is externalized to
//! spill runs rather than grown. Scans evaluate predicates against encoded
//! blocks where possible (extrema skip, run-granularity RLE) and apply
//! sideways information passed down from join builds.

pub mod exchange;
pub mod group;
pub mod join;
pub mod sort;

pub use exchange::{send_recv, storage_union, ParallelUnion, RecvOp, SendMode};
pub use group::{AggFunc, AggSpec, GroupByOp, GroupMode, GroupVariant};
pub use join::{HashJoinOp, JoinType, MergeJoinOp};
pub use sort::SortOp;

use std::borrow::Cow;
use std::cmp::Ordering;
use std::collections::{HashSet, VecDeque};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrder};
use std::sync::{Arc, Mutex, OnceLock};

use crate::catalog::Epoch;
use crate::encoding::{decode_block, rle_runs, EncodingType, BLOCK_CAP};
use crate::error::{Error, Result};
use crate::expr::{BinOp, Expr};
use crate::storage::{ColumnRange, ColumnReader, ScanBinding, ScanSlice};
use crate::util::StableHasher;
use crate::value::{DataType, Row, Value};

/// Rows per pipeline block. Small enough that a block of a few dozen columns
/// stays cache-resident, large enough to amortize per-block dispatch.
pub const BLOCK_ROWS: usize = 4096;

/// In-memory table cap for pre-aggregation ahead of a data movement.
pub const PREPASS_TABLE_BYTES: u64 = 32 * 1024;

const DEFAULT_BUDGET: u64 = 64 * 1024 * 1024;

// ---------------------------------------------------------------------------
// Sort orders and block sortedness markers

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SortOrder {
    pub col: usize,
    pub desc: bool,
}

impl SortOrder {
    pub fn asc(col: usize) -> SortOrder {
        SortOrder { col, desc: false }
    }
}

pub fn cmp_ordered(a: &[Value], b: &[Value], order: &[SortOrder]) -> Ordering {
    for o in order {
        let c = a[o.col].total_cmp(&b[o.col]);
        if c != Ordering::Equal {
            return if o.desc { c.reverse() } else { c };
        }
    }
    Ordering::Equal
}

/// Whether a stream sorted by `marker` is grouped on `cols`: every key column
/// must appear in the marker prefix, in any order among themselves.
pub fn marker_covers(marker: Option<&[SortOrder]>, cols: &[usize]) -> bool {
    let Some(m) = marker else { return cols.is_empty() };
    if m.len() < cols.len() {
        return false;
    }
    cols.iter().all(|c| m[..cols.len()].iter().any(|o| o.col == *c))
}

// ---------------------------------------------------------------------------
// Row blocks

/// One column of a block: fully decoded, or still a run-length view when the
/// scan could keep the storage representation.
#[derive(Debug, Clone)]
pub enum ColVec {
    Plain(Vec<Value>),
    Runs(Vec<(Value, u32)>),
}

impl ColVec {
    pub fn len(&self) -> usize {
        match self {
            ColVec::Plain(v) => v.len(),
            ColVec::Runs(r) => r.iter().map(|(_, n)| *n as usize).sum(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn expand(&self) -> Cow<'_, [Value]> {
        match self {
            ColVec::Plain(v) => Cow::Borrowed(v),
            ColVec::Runs(runs) => {
                let mut out = Vec::with_capacity(self.len());
                for (v, n) in runs {
                    out.extend(std::iter::repeat_with(|| v.clone()).take(*n as usize));
                }
                Cow::Owned(out)
            }
        }
    }

    /// Rows [start, start+len) as a new ColVec, run structure preserved.
    fn slice(&self, start: usize, len: usize) -> ColVec {
        match self {
            ColVec::Plain(v) => ColVec::Plain(v[start..start + len].to_vec()),
            ColVec::Runs(runs) => {
                let mut out = Vec::new();
                let (mut pos, mut want_start, mut want) = (0usize, start, len);
                for (v, n) in runs {
                    if want == 0 {
                        break;
                    }
                    let n = *n as usize;
                    if pos + n <= want_start {
                        pos += n;
                        continue;
                    }
                    let skip = want_start.saturating_sub(pos);
                    let take = (n - skip).min(want);
                    out.push((v.clone(), take as u32));
                    want -= take;
                    want_start = pos + skip + take;
                    pos += n;
                }
                ColVec::Runs(out)
            }
        }
    }
}

/// Unit of data flow between operators. Columns are row-aligned; `sorted`
/// names orders the emitting operator guarantees for its whole stream, not
/// just this block.
#[derive(Debug, Clone)]
pub struct RowBlock {
    pub columns: Vec<ColVec>,
    pub rows: usize,
    pub sorted: Option<Vec<SortOrder>>,
}

impl RowBlock {
    pub fn from_rows(width: usize, rows: &[Row]) -> RowBlock {
        let mut columns = vec![Vec::with_capacity(rows.len()); width];
        for r in rows {
            debug_assert_eq!(r.len(), width);
            for (c, v) in r.iter().enumerate() {
                columns[c].push(v.clone());
            }
        }
        RowBlock {
            columns: columns.into_iter().map(ColVec::Plain).collect(),
            rows: rows.len(),
            sorted: None,
        }
    }

    pub fn from_columns(columns: Vec<ColVec>) -> RowBlock {
        let rows = columns.first().map(|c| c.len()).unwrap_or(0);
        debug_assert!(columns.iter().all(|c| c.len() == rows));
        RowBlock { columns, rows, sorted: None }
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn to_rows(&self) -> Vec<Row> {
        let cols: Vec<Cow<'_, [Value]>> = self.columns.iter().map(|c| c.expand()).collect();
        (0..self.rows).map(|r| cols.iter().map(|c| c[r].clone()).collect()).collect()
    }

    /// Split into pipeline-sized blocks, all carrying `sorted`.
    fn into_chunks(self, marker: Option<Vec<SortOrder>>) -> Vec<RowBlock> {
        if self.rows <= BLOCK_ROWS {
            let mut b = self;
            b.sorted = marker;
            return if b.rows == 0 { Vec::new() } else { vec![b] };
        }
        let mut out = Vec::new();
        let mut start = 0;
        while start < self.rows {
            let len = BLOCK_ROWS.min(self.rows - start);
            out.push(RowBlock {
                columns: self.columns.iter().map(|c| c.slice(start, len)).collect(),
                rows: len,
                sorted: marker.clone(),
            });
            start += len;
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Execution context, stats, traces

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeakRecord {
    pub op: u64,
    pub label: String,
    pub peak: u64,
    pub budget: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Req,
    Emit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub op: u64,
    pub kind: TraceKind,
}

/// Counters shared by every operator of one statement execution.
#[derive(Debug, Default)]
pub struct ExecStats {
    pub blocks_decoded: AtomicU64,
    pub blocks_skipped: AtomicU64,
    /// Values (or RLE runs) a predicate actually looked at.
    pub values_touched: AtomicU64,
    pub rows_scanned: AtomicU64,
    pub containers_opened: AtomicU64,
    pub containers_pruned: AtomicU64,
    pub warnings: AtomicU64,
    pub spill_events: AtomicU64,
    pub spill_files_created: AtomicU64,
    pub spill_files_removed: AtomicU64,
    pub join_switches: AtomicU64,
    pub prepass_disables: AtomicU64,
    peaks: Mutex<Vec<PeakRecord>>,
    trace: Mutex<Vec<TraceEvent>>,
    /// (container id, block index) claims made by restricted scans.
    regions: Mutex<Vec<(u64, usize)>>,
}

impl ExecStats {
    pub fn peaks(&self) -> Vec<PeakRecord> {
        self.peaks.lock().unwrap().clone()
    }

    pub fn trace(&self) -> Vec<TraceEvent> {
        self.trace.lock().unwrap().clone()
    }

    pub fn region_claims(&self) -> Vec<(u64, usize)> {
        self.regions.lock().unwrap().clone()
    }

    pub fn get(&self, c: &AtomicU64) -> u64 {
        c.load(AtomicOrder::Relaxed)
    }
}

/// Shared per-statement execution state: stats, spill directory, id wells.
#[derive(Debug)]
pub struct ExecContext {
    pub stats: ExecStats,
    pub spill_root: PathBuf,
    pub trace_enabled: bool,
    spill_seq: AtomicU64,
    op_seq: AtomicU64,
}

impl ExecContext {
    pub fn new(spill_root: PathBuf) -> Arc<ExecContext> {
        Arc::new(ExecContext {
            stats: ExecStats::default(),
            spill_root,
            trace_enabled: false,
            spill_seq: AtomicU64::new(0),
            op_seq: AtomicU64::new(0),
        })
    }

    pub fn with_trace(spill_root: PathBuf) -> Arc<ExecContext> {
        Arc::new(ExecContext {
            stats: ExecStats::default(),
            spill_root,
            trace_enabled: true,
            spill_seq: AtomicU64::new(0),
            op_seq: AtomicU64::new(0),
        })
    }

    pub fn op_id(&self) -> u64 {
        self.op_seq.fetch_add(1, AtomicOrder::Relaxed)
    }

    fn spill_path(&self) -> PathBuf {
        let n = self.spill_seq.fetch_add(1, AtomicOrder::Relaxed);
        self.spill_root.join(format!("spill-{n}.run"))
    }

    pub fn warn(&self, n: u64) {
        if n > 0 {
            self.stats.warnings.fetch_add(n, AtomicOrder::Relaxed);
        }
    }

    fn trace_req(&self, op: u64) {
        if self.trace_enabled {
            self.stats.trace.lock().unwrap().push(TraceEvent { op, kind: TraceKind::Req });
        }
    }

    fn trace_emit(&self, op: u64) {
        if self.trace_enabled {
            self.stats.trace.lock().unwrap().push(TraceEvent { op, kind: TraceKind::Emit });
        }
    }

    fn claim_region(&self, container: u64, block: usize) {
        self.stats.regions.lock().unwrap().push((container, block));
    }
}

// ---------------------------------------------------------------------------
// Memory budgets

/// Memory grant for one operator instance. `zone` names the resource pool the
/// planner drew the grant from; accounting is per operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OperatorBudget {
    pub bytes: u64,
    pub zone: usize,
}

impl Default for OperatorBudget {
    fn default() -> Self {
        OperatorBudget { bytes: DEFAULT_BUDGET, zone: 0 }
    }
}

impl OperatorBudget {
    pub fn bytes(bytes: u64) -> OperatorBudget {
        OperatorBudget { bytes, zone: 0 }
    }
}

/// Tracks one operator's state size against its budget. Callers must check
/// `fits` and externalize BEFORE charging; `charge` never admits an
/// over-budget total, so the recorded peak proves the budget held.
pub struct MemTracker {
    ctx: Arc<ExecContext>,
    op: u64,
    label: String,
    pub budget: u64,
    used: u64,
    peak: u64,
}

impl MemTracker {
    pub fn new(ctx: &Arc<ExecContext>, op: u64, label: impl Into<String>, budget: OperatorBudget) -> MemTracker {
        MemTracker {
            ctx: Arc::clone(ctx),
            op,
            label: label.into(),
            budget: budget.bytes,
            used: 0,
            peak: 0,
        }
    }

    pub fn fits(&self, extra: u64) -> bool {
        self.used.saturating_add(extra) <= self.budget
    }

    pub fn charge(&mut self, n: u64) {
        debug_assert!(self.fits(n), "operator exceeded its memory budget");
        self.used += n;
        self.peak = self.peak.max(self.used);
    }

    pub fn release(&mut self, n: u64) {
        debug_assert!(n <= self.used);
        self.used = self.used.saturating_sub(n);
    }

    pub fn clear(&mut self) {
        self.used = 0;
    }

    pub fn used(&self) -> u64 {
        self.used
    }
}

impl Drop for MemTracker {
    fn drop(&mut self) {
        self.ctx.stats.peaks.lock().unwrap().push(PeakRecord {
            op: self.op,
            label: std::mem::take(&mut self.label),
            peak: self.peak,
            budget: self.budget,
        });
    }
}

// ---------------------------------------------------------------------------
// Spill runs

// Row wire format: u32 column count, then per value a tag byte and payload.
const TAG_NULL: u8 = 0;
const TAG_INT: u8 = 1;
const TAG_FLOAT: u8 = 2;
const TAG_VARCHAR: u8 = 3;
const TAG_TS: u8 = 4;
const TAG_BOOL: u8 = 5;

pub(crate) fn put_value(w: &mut impl Write, v: &Value) -> Result<()> {
    match v {
        Value::Null => w.write_all(&[TAG_NULL])?,
        Value::Int(i) => {
            w.write_all(&[TAG_INT])?;
            w.write_all(&i.to_le_bytes())?;
        }
        Value::Float(f) => {
            w.write_all(&[TAG_FLOAT])?;
            w.write_all(&f.to_bits().to_le_bytes())?;
        }
        Value::Varchar(s) => {
            w.write_all(&[TAG_VARCHAR])?;
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())?;
        }
        Value::Timestamp(t) => {
            w.write_all(&[TAG_TS])?;
            w.write_all(&t.to_le_bytes())?;
        }
        Value::Bool(b) => w.write_all(&[TAG_BOOL, *b as u8])?,
    }
    Ok(())
}

pub(crate) fn get_value(r: &mut impl Read) -> Result<Value> {
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    Ok(match tag[0] {
        TAG_NULL => Value::Null,
        TAG_INT => {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Value::Int(i64::from_le_bytes(b))
        }
        TAG_FLOAT => {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Value::Float(f64::from_bits(u64::from_le_bytes(b)))
        }
        TAG_VARCHAR => {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            let mut s = vec![0u8; u32::from_le_bytes(b) as usize];
            r.read_exact(&mut s)?;
            Value::Varchar(String::from_utf8(s).map_err(|_| Error::Corrupt("spill row not utf8".into()))?)
        }
        TAG_TS => {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Value::Timestamp(i64::from_le_bytes(b))
        }
        TAG_BOOL => {
            let mut b = [0u8; 1];
            r.read_exact(&mut b)?;
            Value::Bool(b[0] != 0)
        }
        t => return Err(Error::Corrupt(format!("bad spill value tag {t}"))),
    })
}

pub(crate) fn put_row(w: &mut impl Write, row: &[Value]) -> Result<()> {
    w.write_all(&(row.len() as u32).to_le_bytes())?;
    for v in row {
        put_value(w, v)?;
    }
    Ok(())
}

/// None on clean end-of-file; mid-row truncation is corruption.
pub(crate) fn get_row(r: &mut impl Read) -> Result<Option<Row>> {
    let mut first = [0u8; 1];
    if r.read(&mut first)? == 0 {
        return Ok(None);
    }
    let mut rest = [0u8; 3];
    r.read_exact(&mut rest)?;
    let n = u32::from_le_bytes([first[0], rest[0], rest[1], rest[2]]) as usize;
    let mut row = Vec::with_capacity(n);
    for _ in 0..n {
        row.push(get_value(r)?);
    }
    Ok(Some(row))
}

pub struct SpillWriter {
    w: BufWriter<File>,
    path: PathBuf,
    ctx: Arc<ExecContext>,
    rows: u64,
}

impl SpillWriter {
    pub fn create(ctx: &Arc<ExecContext>) -> Result<SpillWriter> {
        let path = ctx.spill_path();
        let file = File::create(&path)?;
        ctx.stats.spill_files_created.fetch_add(1, AtomicOrder::Relaxed);
        Ok(SpillWriter { w: BufWriter::new(file), path, ctx: Arc::clone(ctx), rows: 0 })
    }

    pub fn push(&mut self, row: &[Value]) -> Result<()> {
        put_row(&mut self.w, row)?;
        self.rows += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<SpillRun> {
        self.w.flush()?;
        Ok(SpillRun { path: self.path.clone(), rows: self.rows, ctx: Arc::clone(&self.ctx) })
    }
}

/// A finished on-disk run. Deleting the handle deletes the file.
pub struct SpillRun {
    path: PathBuf,
    pub rows: u64,
    ctx: Arc<ExecContext>,
}

impl SpillRun {
    pub fn reader(&self) -> Result<SpillReader> {
        Ok(SpillReader { r: BufReader::new(File::open(&self.path)?) })
    }
}

impl Drop for SpillRun {
    fn drop(&mut self) {
        if std::fs::remove_file(&self.path).is_ok() {
            self.ctx.stats.spill_files_removed.fetch_add(1, AtomicOrder::Relaxed);
        }
    }
}

pub struct SpillReader {
    r: BufReader<File>,
}

impl SpillReader {
    pub fn next_row(&mut self) -> Result<Option<Row>> {
        get_row(&mut self.r)
    }
}

// ---------------------------------------------------------------------------
// Sideways information passing

/// Key-tuple hash for set-membership SIP. None when any key is NULL: a NULL
/// key never equi-joins, and every consumer of these filters discards
/// unmatched probe rows, so dropping the row early is sound.
pub fn sip_key_hash(row: &[Value], cols: &[usize]) -> Option<u64> {
    let mut h = StableHasher::new();
    for &c in cols {
        if row[c].is_null() {
            return None;
        }
        row[c].hash_into(&mut h);
    }
    Some(h.finish())
}

#[derive(Debug, Clone)]
pub enum SipKeys {
    /// Stable hashes of the build side's key tuples. May pass strangers
    /// (hash collisions), never drops a key present in the build.
    Set(HashSet<u64>),
    /// Per-key-column [min, max] over the build side, non-NULL values only.
    /// A None column means the build had no usable key at all.
    Range(Vec<Option<(Value, Value)>>),
}

/// Filter a join build publishes for scans feeding its probe side.
#[derive(Debug, Clone)]
pub struct SipFilter {
    /// Operator id of the publishing join, for plan introspection.
    pub source: u64,
    pub keys: SipKeys,
}

impl SipFilter {
    pub fn admits(&self, vals: &[&Value]) -> bool {
        if vals.iter().any(|v| v.is_null()) {
            return false;
        }
        match &self.keys {
            SipKeys::Set(set) => {
                let mut h = StableHasher::new();
                for v in vals {
                    v.hash_into(&mut h);
                }
                set.contains(&h.finish())
            }
            SipKeys::Range(ranges) => vals.iter().zip(ranges).all(|(v, r)| match r {
                Some((lo, hi)) => {
                    v.total_cmp(lo) != Ordering::Less && v.total_cmp(hi) != Ordering::Greater
                }
                None => false,
            }),
        }
    }
}

/// Publish-once slot: the build side fills it, scans poll it. The cell is the
/// visibility barrier between builder and probe-side readers.
pub type SipHandle = Arc<OnceLock<SipFilter>>;

pub fn sip_handle() -> SipHandle {
    Arc::new(OnceLock::new())
}

/// A handle attached to a scan, plus which scan output columns feed the join
/// keys (in join key order). Until published, everything passes.
#[derive(Clone)]
pub struct SipTarget {
    pub handle: SipHandle,
    pub cols: Vec<usize>,
}

impl SipTarget {
    pub fn admits_row(&self, row: &[Value]) -> bool {
        match self.handle.get() {
            Some(f) => {
                let vals: Vec<&Value> = self.cols.iter().map(|&c| &row[c]).collect();
                f.admits(&vals)
            }
            None => true,
        }
    }
}

// ---------------------------------------------------------------------------
// Operator interface

pub trait Operator: Send {
    /// Output column count.
    fn width(&self) -> usize;
    /// Pull the next block. None means end of stream; a returned block is
    /// never empty.
    fn next_block(&mut self) -> Result<Option<RowBlock>>;
    fn explain(&self) -> ExplainNode;
}

pub type BoxOp = Box<dyn Operator>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExplainNode {
    pub label: String,
    pub children: Vec<ExplainNode>,
}

impl ExplainNode {
    pub fn leaf(label: impl Into<String>) -> ExplainNode {
        ExplainNode { label: label.into(), children: Vec::new() }
    }

    pub fn new(label: impl Into<String>, children: Vec<ExplainNode>) -> ExplainNode {
        ExplainNode { label: label.into(), children }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        self.render_into(&mut out, 0);
        out
    }

    fn render_into(&self, out: &mut String, depth: usize) {
        let _ = writeln!(out, "{:indent$}{}", "", self.label, indent = depth * 2);
        for c in &self.children {
            c.render_into(out, depth + 1);
        }
    }
}

pub fn explain(op: &dyn Operator) -> String {
    op.explain().render()
}

/// Row-at-a-time view over an operator, for consumers that need rows.
pub trait RowSource: Send {
    fn next_row(&mut self) -> Result<Option<Row>>;
}

pub struct OpCursor {
    op: BoxOp,
    buf: VecDeque<Row>,
    marker: Option<Vec<SortOrder>>,
    started: bool,
    done: bool,
}

impl OpCursor {
    pub fn new(op: BoxOp) -> OpCursor {
        OpCursor { op, buf: VecDeque::new(), marker: None, started: false, done: false }
    }

    /// Sortedness marker of the stream, observed from its first block.
    pub fn peek_marker(&mut self) -> Result<Option<Vec<SortOrder>>> {
        self.fill()?;
        Ok(self.marker.clone())
    }

    fn fill(&mut self) -> Result<()> {
        while self.buf.is_empty() && !self.done {
            match self.op.next_block()? {
                Some(b) => {
                    if !self.started {
                        self.marker = b.sorted.clone();
                        self.started = true;
                    }
                    self.buf.extend(b.to_rows());
                }
                None => self.done = true,
            }
        }
        Ok(())
    }
}

impl RowSource for OpCursor {
    fn next_row(&mut self) -> Result<Option<Row>> {
        self.fill()?;
        Ok(self.buf.pop_front())
    }
}

pub fn collect_rows(op: &mut dyn Operator) -> Result<Vec<Row>> {
    let mut out = Vec::new();
    while let Some(b) = op.next_block()? {
        out.extend(b.to_rows());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Leaf and stateless operators

/// Emits a fixed row set. Leaf for tests, INSERT..VALUES, and recv buffers.
pub struct ValuesOp {
    ctx: Arc<ExecContext>,
    op: u64,
    width: usize,
    rows: Vec<Row>,
    pos: usize,
    marker: Option<Vec<SortOrder>>,
}

impl ValuesOp {
    pub fn new(ctx: &Arc<ExecContext>, width: usize, rows: Vec<Row>) -> ValuesOp {
        ValuesOp { ctx: Arc::clone(ctx), op: ctx.op_id(), width, rows, pos: 0, marker: None }
    }

    pub fn sorted(mut self, marker: Vec<SortOrder>) -> ValuesOp {
        self.marker = Some(marker);
        self
    }
}

impl Operator for ValuesOp {
    fn width(&self) -> usize {
        self.width
    }

    fn next_block(&mut self) -> Result<Option<RowBlock>> {
        self.ctx.trace_req(self.op);
        if self.pos >= self.rows.len() {
            return Ok(None);
        }
        let end = (self.pos + BLOCK_ROWS).min(self.rows.len());
        let mut b = RowBlock::from_rows(self.width, &self.rows[self.pos..end]);
        b.sorted = self.marker.clone();
        self.pos = end;
        self.ctx.trace_emit(self.op);
        Ok(Some(b))
    }

    fn explain(&self) -> ExplainNode {
        ExplainNode::leaf(format!("Values(rows={})", self.rows.len()))
    }
}

/// Evaluate expressions over a block, one output column per expression.
pub fn eval_exprs(block: &RowBlock, exprs: &[Expr], warnings: &mut u64) -> Result<Vec<Vec<Value>>> {
    let cols: Vec<Cow<'_, [Value]>> = block.columns.iter().map(|c| c.expand()).collect();
    let mut out: Vec<Vec<Value>> = exprs.iter().map(|_| Vec::with_capacity(block.rows)).collect();
    let mut scratch: Row = vec![Value::Null; cols.len()];
    for r in 0..block.rows {
        for (c, col) in cols.iter().enumerate() {
            scratch[c] = col[r].clone();
        }
        for (i, e) in exprs.iter().enumerate() {
            out[i].push(e.eval(&scratch, warnings)?);
        }
    }
    Ok(out)
}

/// When every projection expression is a bare column reference, sortedness
/// survives projection for the marker prefix whose columns are all kept.
fn remap_marker(marker: &Option<Vec<SortOrder>>, exprs: &[Expr]) -> Option<Vec<SortOrder>> {
    let marker = marker.as_ref()?;
    let mut out = Vec::new();
    for o in marker {
        let found = exprs.iter().position(|e| matches!(e, Expr::Column { index, .. } if *index == o.col));
        match found {
            Some(i) => out.push(SortOrder { col: i, desc: o.desc }),
            None => break,
        }
    }
    if out.is_empty() {
        None
    } else {
        Some(out)
    }
}

/// Vectorized expression evaluation over its input.
pub struct ProjectOp {
    ctx: Arc<ExecContext>,
    op: u64,
    input: BoxOp,
    exprs: Vec<Expr>,
}

impl ProjectOp {
    pub fn new(ctx: &Arc<ExecContext>, input: BoxOp, exprs: Vec<Expr>) -> ProjectOp {
        ProjectOp { ctx: Arc::clone(ctx), op: ctx.op_id(), input, exprs }
    }
}

impl Operator for ProjectOp {
    fn width(&self) -> usize {
        self.exprs.len()
    }

    fn next_block(&mut self) -> Result<Option<RowBlock>> {
        self.ctx.trace_req(self.op);
        let Some(b) = self.input.next_block()? else { return Ok(None) };
        let mut warnings = 0;
        let cols = eval_exprs(&b, &self.exprs, &mut warnings)?;
        self.ctx.warn(warnings);
        let mut out = RowBlock::from_columns(cols.into_iter().map(ColVec::Plain).collect());
        out.sorted = remap_marker(&b.sorted, &self.exprs);
        self.ctx.trace_emit(self.op);
        Ok(Some(out))
    }

    fn explain(&self) -> ExplainNode {
        let list = self.exprs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(", ");
        ExplainNode::new(format!("ExprEval({list})"), vec![self.input.explain()])
    }
}

/// Residual row filter; used above aggregation (HAVING) and anywhere a
/// predicate cannot ride on a scan.
pub struct FilterOp {
    ctx: Arc<ExecContext>,
    op: u64,
    input: BoxOp,
    pred: Expr,
}

impl FilterOp {
    pub fn new(ctx: &Arc<ExecContext>, input: BoxOp, pred: Expr) -> FilterOp {
        FilterOp { ctx: Arc::clone(ctx), op: ctx.op_id(), input, pred }
    }
}

impl Operator for FilterOp {
    fn width(&self) -> usize {
        self.input.width()
    }

    fn next_block(&mut self) -> Result<Option<RowBlock>> {
        self.ctx.trace_req(self.op);
        loop {
            let Some(b) = self.input.next_block()? else { return Ok(None) };
            let mut warnings = 0;
            let mut keep = Vec::new();
            let cols: Vec<Cow<'_, [Value]>> = b.columns.iter().map(|c| c.expand()).collect();
            let mut scratch: Row = vec![Value::Null; cols.len()];
            for r in 0..b.rows {
                for (c, col) in cols.iter().enumerate() {
                    scratch[c] = col[r].clone();
                }
                if self.pred.eval_pred(&scratch, &mut warnings)? {
                    keep.push(scratch.clone());
                }
            }
            self.ctx.warn(warnings);
            if keep.is_empty() {
                continue;
            }
            let mut out = RowBlock::from_rows(b.width(), &keep);
            out.sorted = b.sorted.clone();
            self.ctx.trace_emit(self.op);
            return Ok(Some(out));
        }
    }

    fn explain(&self) -> ExplainNode {
        ExplainNode::new(format!("Filter({})", self.pred), vec![self.input.explain()])
    }
}

// ---------------------------------------------------------------------------
// Scan

/// Predicate a scan can evaluate. Simple comparisons get the encoded-block
/// fast paths; anything else evaluates row at a time.
#[derive(Debug, Clone)]
pub enum ScanPred {
    Cmp { col: usize, op: BinOp, lit: Value },
    Expr(Expr),
}

fn cmp_value(op: BinOp, v: &Value, lit: &Value) -> bool {
    if v.is_null() || lit.is_null() {
        return false;
    }
    let c = v.total_cmp(lit);
    match op {
        BinOp::Eq => c == Ordering::Equal,
        BinOp::Ne => c != Ordering::Equal,
        BinOp::Lt => c == Ordering::Less,
        BinOp::Le => c != Ordering::Greater,
        BinOp::Gt => c == Ordering::Greater,
        BinOp::Ge => c != Ordering::Less,
        _ => unreachable!("not a comparison"),
    }
}

/// Column ranges implied by simple comparisons, for container pruning and
/// block skipping. Only literals of the column's own type produce a range:
/// extrema prefixes order values within one type only.
pub fn predicate_ranges(preds: &[ScanPred], types: &[DataType]) -> Vec<ColumnRange> {
    let mut ranges: Vec<ColumnRange> = Vec::new();
    for p in preds {
        let ScanPred::Cmp { col, op, lit } = p else { continue };
        if lit.data_type() != Some(types[*col]) {
            continue;
        }
        let (lo, hi) = match op {
            BinOp::Eq => (Some(lit.clone()), Some(lit.clone())),
            BinOp::Lt | BinOp::Le => (None, Some(lit.clone())),
            BinOp::Gt | BinOp::Ge => (Some(lit.clone()), None),
            _ => (None, None),
        };
        if lo.is_none() && hi.is_none() {
            continue;
        }
        match ranges.iter_mut().find(|r| r.column == *col) {
            Some(r) => {
                if let Some(lo) = lo {
                    r.lo = match r.lo.take() {
                        Some(old) if old.total_cmp(&lo) == Ordering::Greater => Some(old),
                        _ => Some(lo),
                    };
                }
                if let Some(hi) = hi {
                    r.hi = match r.hi.take() {
                        Some(old) if old.total_cmp(&hi) == Ordering::Less => Some(old),
                        _ => Some(hi),
                    };
                }
            }
            None => ranges.push(ColumnRange { column: *col, lo, hi }),
        }
    }
    ranges
}

struct SliceCursor {
    slice: ScanSlice,
    readers: Option<Vec<Option<ColumnReader>>>,
    epoch_reader: Option<Option<ColumnReader>>,
    /// Block range this worker owns within the container.
    lo: usize,
    hi: usize,
    next: usize,
}

/// Columnar scan over one projection replica's visible data: ROS containers
/// (encoded-block fast paths) then WOS rows. Emits the full projection width.
pub struct ScanOp {
    ctx: Arc<ExecContext>,
    op: u64,
    label: String,
    types: Vec<DataType>,
    preds: Vec<ScanPred>,
    /// (column, lo prefix, hi prefix) for index-entry block skipping.
    skip_ranges: Vec<(usize, Option<u64>, Option<u64>)>,
    sips: Vec<SipTarget>,
    epoch: Epoch,
    slices: Vec<SliceCursor>,
    wos_rows: Vec<Row>,
    wos_pos: usize,
    opened: usize,
    pruned: usize,
    region: Option<(usize, usize)>,
    /// Marker when the stream is one container's sort order end to end.
    marker: Option<Vec<SortOrder>>,
    slice_idx: usize,
    outq: VecDeque<RowBlock>,
}

impl ScanOp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ctx: &Arc<ExecContext>,
        label: impl Into<String>,
        binding: ScanBinding,
        types: Vec<DataType>,
        sort_cols: Vec<usize>,
        preds: Vec<ScanPred>,
        sips: Vec<SipTarget>,
        epoch: Epoch,
    ) -> ScanOp {
        let opened = binding.containers_opened();
        let pruned = binding.containers_pruned;
        ctx.stats.containers_opened.fetch_add(opened as u64, AtomicOrder::Relaxed);
        ctx.stats.containers_pruned.fetch_add(pruned as u64, AtomicOrder::Relaxed);
        let marker = if binding.slices.len() <= 1 && binding.wos_rows.is_empty() && !sort_cols.is_empty()
        {
            Some(sort_cols.iter().map(|&c| SortOrder::asc(c)).collect())
        } else {
            None
        };
        let skip_ranges = predicate_ranges(&preds, &types)
            .into_iter()
            .map(|r| (r.column, r.lo.map(|v| v.order_prefix()), r.hi.map(|v| v.order_prefix())))
            .collect();
        let slices = binding
            .slices
            .into_iter()
            .map(|slice| {
                let nblocks = (slice.container.meta.row_count as usize).div_ceil(BLOCK_CAP);
                SliceCursor { slice, readers: None, epoch_reader: None, lo: 0, hi: nblocks, next: 0 }
            })
            .collect();
        ScanOp {
            ctx: Arc::clone(ctx),
            op: ctx.op_id(),
            label: label.into(),
            types,
            preds,
            skip_ranges,
            sips,
            epoch,
            slices,
            wos_rows: binding.wos_rows,
            wos_pos: 0,
            opened,
            pruned,
            region: None,
            marker,
            slice_idx: 0,
            outq: VecDeque::new(),
        }
    }

    /// Restrict this scan to runtime region `worker` of `ways`: a disjoint
    /// block range per container plus a disjoint WOS row range. The union of
    /// all workers' regions is exactly the unrestricted scan.
    pub fn restrict(mut self, worker: usize, ways: usize) -> ScanOp {
        assert!(worker < ways);
        for s in &mut self.slices {
            let n = s.hi;
            s.lo = worker * n / ways;
            s.hi = (worker + 1) * n / ways;
            s.next = s.lo;
        }
        let n = self.wos_rows.len();
        let (lo, hi) = (worker * n / ways, (worker + 1) * n / ways);
        self.wos_rows = self.wos_rows[lo..hi].to_vec();
        self.region = Some((worker, ways));
        self
    }

    /// Process one owned ROS block; pushes 0..n pipeline blocks to outq.
    fn step_ros(&mut self) -> Result<bool> {
        let ctx = Arc::clone(&self.ctx);
        let Some(cur) = self.slices.get_mut(self.slice_idx) else { return Ok(false) };
        if cur.next >= cur.hi {
            self.slice_idx += 1;
            return Ok(true);
        }
        let block = cur.next;
        cur.next += 1;
        let meta = &cur.slice.container.meta;
        let container_id = meta.id;
        if self.region.is_some() {
            ctx.claim_region(container_id, block);
        }
        // Column readers open on first touched block of the slice.
        if cur.readers.is_none() {
            cur.readers = Some((0..self.types.len()).map(|_| None).collect());
            cur.epoch_reader = None;
        }
        let readers = cur.readers.as_mut().unwrap();
        let open_col = |readers: &mut Vec<Option<ColumnReader>>, slice: &ScanSlice, c: usize| -> Result<()> {
            if readers[c].is_none() {
                readers[c] = Some(slice.container.open_column(c)?);
            }
            Ok(())
        };

        // Block skip from index-entry extrema prefixes. An all-NULL block
        // (stored min prefix > max prefix) never satisfies a range.
        for &(col, lo, hi) in &self.skip_ranges {
            open_col(readers, &cur.slice, col)?;
            let entry = &readers[col].as_ref().unwrap().index[block];
            let dead = entry.min_prefix > entry.max_prefix
                || lo.is_some_and(|lp| lp > entry.max_prefix)
                || hi.is_some_and(|hp| hp < entry.min_prefix);
            if dead {
                ctx.stats.blocks_skipped.fetch_add(1, AtomicOrder::Relaxed);
                return Ok(true);
            }
        }

        open_col(readers, &cur.slice, 0)?;
        let idx0 = &readers[0].as_ref().unwrap().index;
        let start = idx0[block].start_position;
        let n = if block + 1 < idx0.len() {
            (idx0[block + 1].start_position - start) as usize
        } else {
            (meta.row_count - start) as usize
        };

        let mut sel = vec![true; n];
        let mut live = n;

        // Row visibility: per-row commit epochs when the container spans
        // epochs beyond the snapshot, then the delete vector overlay.
        if meta.epoch_max > self.epoch {
            if cur.epoch_reader.is_none() {
                cur.epoch_reader = Some(cur.slice.container.open_epoch_column()?);
            }
            if let Some(er) = cur.epoch_reader.as_ref().unwrap() {
                let evs = decode_counted(&ctx, er, block)?;
                for (i, ev) in evs.iter().enumerate() {
                    if sel[i] && ev.as_i64().map(|e| e as u64 > self.epoch).unwrap_or(true) {
                        sel[i] = false;
                        live -= 1;
                    }
                }
            }
        }
        if !cur.slice.deletes.is_empty() {
            let dels = &cur.slice.deletes;
            let from = dels.partition_point(|d| d.0 < start);
            for d in &dels[from..] {
                if d.0 >= start + n as u64 {
                    break;
                }
                if d.1 <= self.epoch && sel[(d.0 - start) as usize] {
                    sel[(d.0 - start) as usize] = false;
                    live -= 1;
                }
            }
        }

        // Predicates, lazily decoding only referenced columns. A column kept
        // as runs is remembered so full-selection emission can reuse it.
        let mut decoded: Vec<Option<Vec<Value>>> = vec![None; self.types.len()];
        let mut run_cols: Vec<Option<Vec<(Value, u32)>>> = vec![None; self.types.len()];
        for p in &self.preds {
            if live == 0 {
                break;
            }
            match p {
                ScanPred::Cmp { col, op, lit } => {
                    open_col(readers, &cur.slice, *col)?;
                    let reader = readers[*col].as_ref().unwrap();
                    let mut done_runs = false;
                    if reader.encoding == EncodingType::Rle && decoded[*col].is_none() {
                        let enc = reader.read_block(block)?;
                        if enc.encoding == EncodingType::Rle {
                            if let Ok(runs) = rle_runs(&enc) {
                                ctx.stats
                                    .values_touched
                                    .fetch_add(runs.len() as u64, AtomicOrder::Relaxed);
                                let mut pos = 0usize;
                                for (v, len) in &runs {
                                    let len = *len as usize;
                                    if !cmp_value(*op, v, lit) {
                                        for s in &mut sel[pos..pos + len] {
                                            if *s {
                                                *s = false;
                                                live -= 1;
                                            }
                                        }
                                    }
                                    pos += len;
                                }
                                run_cols[*col] = Some(runs);
                                done_runs = true;
                            }
                        }
                    }
                    if !done_runs {
                        if decoded[*col].is_none() {
                            decoded[*col] = Some(decode_counted(&ctx, reader, block)?);
                        }
                        let vals = decoded[*col].as_ref().unwrap();
                        let mut touched = 0u64;
                        for (i, s) in sel.iter_mut().enumerate() {
                            if *s {
                                touched += 1;
                                if !cmp_value(*op, &vals[i], lit) {
                                    *s = false;
                                    live -= 1;
                                }
                            }
                        }
                        ctx.stats.values_touched.fetch_add(touched, AtomicOrder::Relaxed);
                    }
                }
                ScanPred::Expr(e) => {
                    let mut need = Vec::new();
                    e.columns(&mut need);
                    for &c in &need {
                        open_col(readers, &cur.slice, c)?;
                        if decoded[c].is_none() && run_cols[c].is_none() {
                            decoded[c] =
                                Some(decode_counted(&ctx, readers[c].as_ref().unwrap(), block)?);
                        }
                    }
                    let mut scratch: Row = vec![Value::Null; self.types.len()];
                    let mut warnings = 0;
                    let mut touched = 0u64;
                    let expanded: Vec<Option<Vec<Value>>> = run_cols
                        .iter()
                        .map(|rc| rc.as_ref().map(|runs| expand_runs(runs)))
                        .collect();
                    for (i, s) in sel.iter_mut().enumerate() {
                        if !*s {
                            continue;
                        }
                        touched += 1;
                        for &c in &need {
                            scratch[c] = match (&decoded[c], &expanded[c]) {
                                (Some(vals), _) => vals[i].clone(),
                                (None, Some(vals)) => vals[i].clone(),
                                _ => unreachable!(),
                            };
                        }
                        if !e.eval_pred(&scratch, &mut warnings)? {
                            *s = false;
                            live -= 1;
                        }
                    }
                    ctx.warn(warnings);
                    ctx.stats.values_touched.fetch_add(touched, AtomicOrder::Relaxed);
                }
            }
        }

        // SIP filters after ordinary predicates: cheap hash probes that only
        // pay off on rows that survived everything else.
        if live > 0 && self.sips.iter().any(|t| t.handle.get().is_some()) {
            let mut need = Vec::new();
            for t in &self.sips {
                need.extend(t.cols.iter().copied());
            }
            need.sort_unstable();
            need.dedup();
            for &c in &need {
                open_col(readers, &cur.slice, c)?;
                if decoded[c].is_none() && run_cols[c].is_none() {
                    decoded[c] = Some(decode_counted(&ctx, readers[c].as_ref().unwrap(), block)?);
                }
            }
            let expanded: Vec<Option<Vec<Value>>> =
                run_cols.iter().map(|rc| rc.as_ref().map(|runs| expand_runs(runs))).collect();
            let mut scratch: Row = vec![Value::Null; self.types.len()];
            for (i, s) in sel.iter_mut().enumerate() {
                if !*s {
                    continue;
                }
                for &c in &need {
                    scratch[c] = match (&decoded[c], &expanded[c]) {
                        (Some(vals), _) => vals[i].clone(),
                        (None, Some(vals)) => vals[i].clone(),
                        _ => unreachable!(),
                    };
                }
                if !self.sips.iter().all(|t| t.admits_row(&scratch)) {
                    *s = false;
                    live -= 1;
                }
            }
        }

        if live == 0 {
            return Ok(true);
        }

        // Emit. Full selection keeps run-length columns as runs; filtered
        // output materializes the survivors.
        let mut columns: Vec<ColVec> = Vec::with_capacity(self.types.len());
        if live == n {
            for c in 0..self.types.len() {
                if let Some(runs) = run_cols[c].take() {
                    columns.push(ColVec::Runs(runs));
                    continue;
                }
                if let Some(vals) = decoded[c].take() {
                    columns.push(ColVec::Plain(vals));
                    continue;
                }
                open_col(readers, &cur.slice, c)?;
                let reader = readers[c].as_ref().unwrap();
                if reader.encoding == EncodingType::Rle {
                    let enc = reader.read_block(block)?;
                    if enc.encoding == EncodingType::Rle {
                        if let Ok(runs) = rle_runs(&enc) {
                            columns.push(ColVec::Runs(runs));
                            continue;
                        }
                    }
                    ctx.stats.blocks_decoded.fetch_add(1, AtomicOrder::Relaxed);
                    columns.push(ColVec::Plain(decode_block(&enc)?));
                    continue;
                }
                columns.push(ColVec::Plain(decode_counted(&ctx, reader, block)?));
            }
        } else {
            let expanded: Vec<Option<Vec<Value>>> =
                run_cols.iter().map(|rc| rc.as_ref().map(|runs| expand_runs(runs))).collect();
            for c in 0..self.types.len() {
                let full: Cow<'_, [Value]> = if let Some(vals) = &decoded[c] {
                    Cow::Borrowed(vals.as_slice())
                } else if let Some(vals) = &expanded[c] {
                    Cow::Borrowed(vals.as_slice())
                } else {
                    open_col(readers, &cur.slice, c)?;
                    Cow::Owned(decode_counted(&ctx, readers[c].as_ref().unwrap(), block)?)
                };
                let mut keep = Vec::with_capacity(live);
                for (i, v) in full.iter().enumerate() {
                    if sel[i] {
                        keep.push(v.clone());
                    }
                }
                columns.push(ColVec::Plain(keep));
            }
        }

        ctx.stats.rows_scanned.fetch_add(live as u64, AtomicOrder::Relaxed);
        let blockset = RowBlock::from_columns(columns).into_chunks(self.marker.clone());
        self.outq.extend(blockset);
        Ok(true)
    }

    fn step_wos(&mut self) -> Result<bool> {
        if self.wos_pos >= self.wos_rows.len() {
            return Ok(false);
        }
        let end = (self.wos_pos + BLOCK_ROWS).min(self.wos_rows.len());
        let mut keep = Vec::new();
        let mut warnings = 0;
        let mut touched = 0u64;
        'row: for i in self.wos_pos..end {
            let row = &self.wos_rows[i];
            for p in &self.preds {
                touched += 1;
                match p {
                    ScanPred::Cmp { col, op, lit } => {
                        if !cmp_value(*op, &row[*col], lit) {
                            continue 'row;
                        }
                    }
                    ScanPred::Expr(e) => {
                        if !e.eval_pred(row, &mut warnings)? {
                            continue 'row;
                        }
                    }
                }
            }
            if !self.sips.iter().all(|t| t.admits_row(row)) {
                continue;
            }
            keep.push(row.clone());
        }
        self.wos_pos = end;
        self.ctx.warn(warnings);
        self.ctx.stats.values_touched.fetch_add(touched, AtomicOrder::Relaxed);
        self.ctx.stats.rows_scanned.fetch_add(keep.len() as u64, AtomicOrder::Relaxed);
        if !keep.is_empty() {
            self.outq.push_back(RowBlock::from_rows(self.types.len(), &keep));
        }
        Ok(true)
    }
}

fn decode_counted(ctx: &ExecContext, reader: &ColumnReader, block: usize) -> Result<Vec<Value>> {
    ctx.stats.blocks_decoded.fetch_add(1, AtomicOrder::Relaxed);
    decode_block(&reader.read_block(block)?)
}

fn expand_runs(runs: &[(Value, u32)]) -> Vec<Value> {
    let n = runs.iter().map(|(_, l)| *l as usize).sum();
    let mut out = Vec::with_capacity(n);
    for (v, l) in runs {
        out.extend(std::iter::repeat_with(|| v.clone()).take(*l as usize));
    }
    out
}

impl Operator for ScanOp {
    fn width(&self) -> usize {
        self.types.len()
    }

    fn next_block(&mut self) -> Result<Option<RowBlock>> {
        self.ctx.trace_req(self.op);
        loop {
            if let Some(b) = self.outq.pop_front() {
                self.ctx.trace_emit(self.op);
                return Ok(Some(b));
            }
            if self.slice_idx < self.slices.len() {
                self.step_ros()?;
            } else if !self.step_wos()? {
                return Ok(None);
            }
        }
    }

    fn explain(&self) -> ExplainNode {
        let mut label = format!(
            "Scan({}, opened={}, pruned={}",
            self.label, self.opened, self.pruned
        );
        if !self.preds.is_empty() {
            let _ = write!(label, ", preds={}", self.preds.len());
        }
        if !self.sips.is_empty() {
            let cols: Vec<String> = self
                .sips
                .iter()
                .map(|t| format!("[{}]", t.cols.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")))
                .collect();
            let _ = write!(label, ", sip={}", cols.join("+"));
        }
        if let Some((w, n)) = self.region {
            let _ = write!(label, ", region={w}/{n}");
        }
        label.push(')');
        ExplainNode::leaf(label)
    }
}

// ---------------------------------------------------------------------------

pub(crate) fn fmt_cols(cols: &[usize]) -> String {
    let inner = cols.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(", ");
    format!("[{inner}]")
}
