//! Grouping and aggregation.
//!
//! Three physical variants share one operator: HASH builds a table and
//! externalizes whole-table runs under memory pressure; PIPELINED rides
//! key-sorted input and holds one group; PREPASS is the small opportunistic
//! table placed below a data movement, emitting partial aggregates and
//! retiring itself when the data stops reducing.
//!
//! Aggregation splits into partial and final phases for distributed plans:
//! PARTIAL emits mergeable accumulator columns, FINAL absorbs them. COUNT
//! DISTINCT does not decompose and is rejected outside COMPLETE mode.

use std::collections::BTreeMap;
use std::sync::atomic::Ordering as AtomicOrder;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::value::{cmp_rows, row_size, Row, Value};

use super::{
    marker_covers, BoxOp, ExecContext, ExplainNode, MemTracker, Operator, OperatorBudget,
    RowBlock, SortOrder, SpillReader, SpillRun, SpillWriter, BLOCK_ROWS, PREPASS_TABLE_BYTES,
};
use crate::util::StableHasher;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggFunc {
    Count,
    Sum,
    Min,
    Max,
    Avg,
    CountDistinct,
}

impl AggFunc {
    fn name(self) -> &'static str {
        match self {
            AggFunc::Count => "COUNT",
            AggFunc::Sum => "SUM",
            AggFunc::Min => "MIN",
            AggFunc::Max => "MAX",
            AggFunc::Avg => "AVG",
            AggFunc::CountDistinct => "COUNT DISTINCT",
        }
    }
}

/// One aggregate over an input column. `arg: None` is COUNT of rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggSpec {
    pub func: AggFunc,
    pub arg: Option<usize>,
}

impl AggSpec {
    pub fn count_star() -> AggSpec {
        AggSpec { func: AggFunc::Count, arg: None }
    }

    pub fn of(func: AggFunc, col: usize) -> AggSpec {
        AggSpec { func, arg: Some(col) }
    }

    /// Columns this aggregate occupies in partial (mergeable) form.
    fn partial_width(&self) -> usize {
        match self.func {
            AggFunc::Avg => 2,
            _ => 1,
        }
    }

    fn label(&self) -> String {
        match self.arg {
            None => format!("{}(*)", self.func.name()),
            Some(c) => format!("{}({})", self.func.name(), c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupVariant {
    Hash,
    Pipelined,
    Prepass,
}

impl GroupVariant {
    fn name(self) -> &'static str {
        match self {
            GroupVariant::Hash => "HASH",
            GroupVariant::Pipelined => "PIPELINED",
            GroupVariant::Prepass => "PREPASS",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupMode {
    /// Raw rows in, finished aggregates out.
    Complete,
    /// Raw rows in, mergeable accumulators out.
    Partial,
    /// Accumulators in (keys first, then partial columns), finished out.
    Final,
}

impl GroupMode {
    fn name(self) -> &'static str {
        match self {
            GroupMode::Complete => "COMPLETE",
            GroupMode::Partial => "PARTIAL",
            GroupMode::Final => "FINAL",
        }
    }
}

/// Integer sums stay integers (wrapping, like the scalar engine); anything
/// float-tainted promotes to float.
fn sum_add(acc: Option<Value>, v: &Value) -> Result<Option<Value>> {
    if v.is_null() {
        return Ok(acc);
    }
    let Some(acc) = acc else { return Ok(Some(v.clone())) };
    match (&acc, v) {
        (Value::Int(a), Value::Int(b)) => Ok(Some(Value::Int(a.wrapping_add(*b)))),
        _ => match (acc.as_f64(), v.as_f64()) {
            (Some(a), Some(b)) => Ok(Some(Value::Float(a + b))),
            _ => Err(Error::Type(format!("cannot sum {v:?}"))),
        },
    }
}

#[derive(Debug, Clone)]
enum AggState {
    Count(i64),
    Sum(Option<Value>),
    Min(Option<Value>),
    Max(Option<Value>),
    Avg(Option<Value>, i64),
    /// Sorted unique non-NULL values seen.
    Distinct(Vec<Value>),
}

impl AggState {
    fn init(spec: &AggSpec) -> AggState {
        match spec.func {
            AggFunc::Count => AggState::Count(0),
            AggFunc::Sum => AggState::Sum(None),
            AggFunc::Min => AggState::Min(None),
            AggFunc::Max => AggState::Max(None),
            AggFunc::Avg => AggState::Avg(None, 0),
            AggFunc::CountDistinct => AggState::Distinct(Vec::new()),
        }
    }

    /// Fold in one row's argument. NULL arguments vanish everywhere except
    /// COUNT of rows, which gets no argument at all.
    fn update(&mut self, arg: Option<&Value>) -> Result<()> {
        match self {
            AggState::Count(n) => match arg {
                None => *n += 1,
                Some(v) if !v.is_null() => *n += 1,
                _ => {}
            },
            AggState::Sum(acc) => {
                if let Some(v) = arg {
                    *acc = sum_add(acc.take(), v)?;
                }
            }
            AggState::Min(acc) => {
                if let Some(v) = arg {
                    if !v.is_null()
                        && acc.as_ref().map(|m| v.total_cmp(m).is_lt()).unwrap_or(true)
                    {
                        *acc = Some(v.clone());
                    }
                }
            }
            AggState::Max(acc) => {
                if let Some(v) = arg {
                    if !v.is_null()
                        && acc.as_ref().map(|m| v.total_cmp(m).is_gt()).unwrap_or(true)
                    {
                        *acc = Some(v.clone());
                    }
                }
            }
            AggState::Avg(acc, n) => {
                if let Some(v) = arg {
                    if !v.is_null() {
                        *acc = sum_add(acc.take(), v)?;
                        *n += 1;
                    }
                }
            }
            AggState::Distinct(vals) => {
                if let Some(v) = arg {
                    if !v.is_null() {
                        if let Err(pos) = vals.binary_search_by(|x| x.total_cmp(v)) {
                            vals.insert(pos, v.clone());
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Combine two accumulators for the same group.
    fn merge(&mut self, other: AggState) -> Result<()> {
        match (self, other) {
            (AggState::Count(a), AggState::Count(b)) => *a += b,
            (AggState::Sum(a), AggState::Sum(b)) => {
                if let Some(v) = b {
                    *a = sum_add(a.take(), &v)?;
                }
            }
            (AggState::Min(a), AggState::Min(Some(v))) => {
                if a.as_ref().map(|m| v.total_cmp(m).is_lt()).unwrap_or(true) {
                    *a = Some(v);
                }
            }
            (AggState::Min(_), AggState::Min(None)) => {}
            (AggState::Max(a), AggState::Max(Some(v))) => {
                if a.as_ref().map(|m| v.total_cmp(m).is_gt()).unwrap_or(true) {
                    *a = Some(v);
                }
            }
            (AggState::Max(_), AggState::Max(None)) => {}
            (AggState::Avg(a, n), AggState::Avg(b, m)) => {
                if let Some(v) = b {
                    *a = sum_add(a.take(), &v)?;
                }
                *n += m;
            }
            (AggState::Distinct(a), AggState::Distinct(b)) => {
                for v in b {
                    if let Err(pos) = a.binary_search_by(|x| x.total_cmp(&v)) {
                        a.insert(pos, v);
                    }
                }
            }
            _ => return Err(Error::Exec("mismatched aggregate accumulators".into())),
        }
        Ok(())
    }

    /// Fold a flattened partial (see `flatten`) into this accumulator.
    fn absorb_partial(&mut self, vals: &[Value]) -> Result<()> {
        match self {
            AggState::Count(n) => {
                *n += vals[0].as_i64().unwrap_or(0);
            }
            AggState::Sum(acc) => {
                if !vals[0].is_null() {
                    *acc = sum_add(acc.take(), &vals[0])?;
                }
            }
            AggState::Min(acc) => {
                let v = &vals[0];
                if !v.is_null() && acc.as_ref().map(|m| v.total_cmp(m).is_lt()).unwrap_or(true) {
                    *acc = Some(v.clone());
                }
            }
            AggState::Max(acc) => {
                let v = &vals[0];
                if !v.is_null() && acc.as_ref().map(|m| v.total_cmp(m).is_gt()).unwrap_or(true) {
                    *acc = Some(v.clone());
                }
            }
            AggState::Avg(acc, n) => {
                if !vals[0].is_null() {
                    *acc = sum_add(acc.take(), &vals[0])?;
                }
                *n += vals[1].as_i64().unwrap_or(0);
            }
            AggState::Distinct(_) => {
                return Err(Error::Exec("COUNT DISTINCT has no mergeable partial".into()))
            }
        }
        Ok(())
    }

    fn finalize(self) -> Value {
        match self {
            AggState::Count(n) => Value::Int(n),
            AggState::Sum(acc) => acc.unwrap_or(Value::Null),
            AggState::Min(acc) => acc.unwrap_or(Value::Null),
            AggState::Max(acc) => acc.unwrap_or(Value::Null),
            AggState::Avg(None, _) => Value::Null,
            AggState::Avg(Some(sum), n) => {
                let s = sum.as_f64().unwrap_or(0.0);
                Value::Float(s / n as f64)
            }
            AggState::Distinct(vals) => Value::Int(vals.len() as i64),
        }
    }

    /// Mergeable column form, `partial_width` values.
    fn flatten(&self, out: &mut Row) {
        match self {
            AggState::Count(n) => out.push(Value::Int(*n)),
            AggState::Sum(acc) | AggState::Min(acc) | AggState::Max(acc) => {
                out.push(acc.clone().unwrap_or(Value::Null))
            }
            AggState::Avg(acc, n) => {
                out.push(acc.clone().unwrap_or(Value::Null));
                out.push(Value::Int(*n));
            }
            AggState::Distinct(_) => unreachable!("rejected at construction"),
        }
    }

    fn bytes(&self) -> u64 {
        let base = 48u64;
        match self {
            AggState::Sum(Some(v)) | AggState::Min(Some(v)) | AggState::Max(Some(v)) => {
                base + v.heap_size() as u64
            }
            AggState::Avg(Some(v), _) => base + v.heap_size() as u64,
            AggState::Distinct(vals) => {
                base + vals.iter().map(|v| 16 + v.heap_size() as u64).sum::<u64>()
            }
            _ => base,
        }
    }

    /// Spill form: self-delimiting value sequence a reader with the spec can
    /// parse back (Distinct carries a length prefix).
    fn encode(&self, out: &mut Row) {
        match self {
            AggState::Distinct(vals) => {
                out.push(Value::Int(vals.len() as i64));
                out.extend(vals.iter().cloned());
            }
            other => other.flatten(out),
        }
    }

    fn decode(spec: &AggSpec, vals: &mut std::vec::IntoIter<Value>) -> Result<AggState> {
        let mut take = || vals.next().ok_or_else(|| Error::Corrupt("short aggregate spill".into()));
        Ok(match spec.func {
            AggFunc::Count => AggState::Count(take()?.as_i64().unwrap_or(0)),
            AggFunc::Sum => AggState::Sum(non_null(take()?)),
            AggFunc::Min => AggState::Min(non_null(take()?)),
            AggFunc::Max => AggState::Max(non_null(take()?)),
            AggFunc::Avg => {
                let sum = non_null(take()?);
                let n = take()?.as_i64().unwrap_or(0);
                AggState::Avg(sum, n)
            }
            AggFunc::CountDistinct => {
                let n = take()?.as_i64().unwrap_or(0) as usize;
                let mut out = Vec::with_capacity(n);
                for _ in 0..n {
                    out.push(take()?);
                }
                AggState::Distinct(out)
            }
        })
    }
}

fn non_null(v: Value) -> Option<Value> {
    if v.is_null() {
        None
    } else {
        Some(v)
    }
}

fn init_states(aggs: &[AggSpec]) -> Vec<AggState> {
    aggs.iter().map(AggState::init).collect()
}

fn key_hash(keys: &[Value]) -> u64 {
    let mut h = StableHasher::new();
    for k in keys {
        k.hash_into(&mut h);
    }
    h.finish()
}

type Bucket = Vec<(Row, Vec<AggState>)>;

/// Hash-of-buckets keyed by stable hash; BTreeMap for deterministic walks.
#[derive(Default)]
struct GroupTable {
    buckets: BTreeMap<u64, Bucket>,
    entries: usize,
}

impl GroupTable {
    fn drain_sorted(&mut self) -> Vec<(Row, Vec<AggState>)> {
        let mut all: Vec<(Row, Vec<AggState>)> =
            std::mem::take(&mut self.buckets).into_values().flatten().collect();
        all.sort_by(|a, b| cmp_rows(&a.0, &b.0));
        self.entries = 0;
        all
    }
}

enum Source {
    Op(BoxOp),
    Done,
}

/// Emission queue shared by all variants.
struct OutQueue {
    rows: std::collections::VecDeque<Row>,
    width: usize,
    marker: Option<Vec<SortOrder>>,
}

impl OutQueue {
    fn new(width: usize) -> OutQueue {
        OutQueue { rows: std::collections::VecDeque::new(), width, marker: None }
    }

    fn pop_block(&mut self, force: bool) -> Option<RowBlock> {
        if self.rows.is_empty() || (!force && self.rows.len() < BLOCK_ROWS) {
            return None;
        }
        let n = self.rows.len().min(BLOCK_ROWS);
        let rows: Vec<Row> = self.rows.drain(..n).collect();
        let mut b = RowBlock::from_rows(self.width, &rows);
        b.sorted = self.marker.clone();
        Some(b)
    }
}

pub struct GroupByOp {
    ctx: Arc<ExecContext>,
    op: u64,
    input: Source,
    keys: Vec<usize>,
    aggs: Vec<AggSpec>,
    variant: GroupVariant,
    mode: GroupMode,
    budget: OperatorBudget,
    width: usize,
    child_explain: ExplainNode,
    /// Byte offset of each aggregate's partial columns in FINAL-mode input.
    partial_offsets: Vec<usize>,
    // Hash state
    table: GroupTable,
    tracker: Option<MemTracker>,
    runs: Vec<SpillRun>,
    merge: Option<GroupMerge>,
    built: bool,
    // Pipelined state
    cur: Option<(Row, Vec<AggState>)>,
    checked_marker: bool,
    // Prepass state
    disabled: bool,
    rows_since_flush: u64,
    emitted_any: bool,
    out: OutQueue,
}

impl GroupByOp {
    pub fn new(
        ctx: &Arc<ExecContext>,
        input: BoxOp,
        keys: Vec<usize>,
        aggs: Vec<AggSpec>,
        variant: GroupVariant,
        mode: GroupMode,
        budget: OperatorBudget,
    ) -> Result<GroupByOp> {
        if variant == GroupVariant::Prepass && mode != GroupMode::Partial {
            return Err(Error::Exec("a pre-pass group-by can only emit partial aggregates".into()));
        }
        let distinct = aggs.iter().any(|a| a.func == AggFunc::CountDistinct);
        if distinct && mode != GroupMode::Complete {
            return Err(Error::Exec(
                "COUNT DISTINCT does not decompose into partial aggregates".into(),
            ));
        }
        if distinct && variant == GroupVariant::Pipelined {
            return Err(Error::Exec(
                "pipelined group-by cannot bound COUNT DISTINCT state; use hash".into(),
            ));
        }
        for a in &aggs {
            if a.arg.is_none() && a.func != AggFunc::Count {
                return Err(Error::Exec("only COUNT can aggregate whole rows".into()));
            }
        }
        let width = keys.len()
            + match mode {
                GroupMode::Partial => aggs.iter().map(|a| a.partial_width()).sum(),
                _ => aggs.len(),
            };
        let mut partial_offsets = Vec::with_capacity(aggs.len());
        let mut off = keys.len();
        for a in &aggs {
            partial_offsets.push(off);
            off += a.partial_width();
        }
        if mode == GroupMode::Final {
            // FINAL reads its own partial layout back: keys first.
            if keys.iter().enumerate().any(|(i, &k)| i != k) {
                return Err(Error::Exec("final group-by expects keys in leading columns".into()));
            }
            if input.width() != off {
                return Err(Error::Exec(format!(
                    "final group-by expects {} input columns, got {}",
                    off,
                    input.width()
                )));
            }
        }
        let op = ctx.op_id();
        let cap = match variant {
            GroupVariant::Prepass => OperatorBudget {
                bytes: budget.bytes.min(PREPASS_TABLE_BYTES),
                zone: budget.zone,
            },
            _ => budget,
        };
        let tracker = match variant {
            GroupVariant::Pipelined => None,
            _ => Some(MemTracker::new(ctx, op, format!("GroupBy({})", variant.name()), cap)),
        };
        let out = OutQueue::new(width);
        Ok(GroupByOp {
            ctx: Arc::clone(ctx),
            op,
            child_explain: input.explain(),
            input: Source::Op(input),
            keys,
            aggs,
            variant,
            mode,
            budget: cap,
            width,
            partial_offsets,
            table: GroupTable::default(),
            tracker,
            runs: Vec::new(),
            merge: None,
            built: false,
            cur: None,
            checked_marker: false,
            disabled: false,
            rows_since_flush: 0,
            emitted_any: false,
            out,
        })
    }

    fn key_row(&self, row: &[Value]) -> Row {
        self.keys.iter().map(|&c| row[c].clone()).collect()
    }

    /// Apply one input row to a set of accumulators.
    fn update_states(&self, states: &mut [AggState], row: &[Value]) -> Result<()> {
        for (i, (st, spec)) in states.iter_mut().zip(&self.aggs).enumerate() {
            match self.mode {
                GroupMode::Final => {
                    let off = self.partial_offsets[i];
                    st.absorb_partial(&row[off..off + spec.partial_width()])?;
                }
                _ => st.update(spec.arg.map(|c| &row[c]))?,
            }
        }
        Ok(())
    }

    /// Upper bound on how much memory absorbing `row` can add.
    fn growth_bound(&self, keys: &Row, row: &[Value]) -> u64 {
        let mut b = 64 + row_size(keys) as u64 + 48 * self.aggs.len() as u64;
        for spec in &self.aggs {
            if let Some(c) = spec.arg {
                b += 16 + row[c].heap_size() as u64;
            }
        }
        b
    }

    fn spill_table(&mut self) -> Result<()> {
        let entries = self.table.drain_sorted();
        if entries.is_empty() {
            return Ok(());
        }
        let mut w = SpillWriter::create(&self.ctx)?;
        for (keys, states) in &entries {
            w.push(keys)?;
            let mut srow = Vec::new();
            for st in states {
                st.encode(&mut srow);
            }
            w.push(&srow)?;
        }
        self.runs.push(w.finish()?);
        self.ctx.stats.spill_events.fetch_add(1, AtomicOrder::Relaxed);
        if let Some(t) = &mut self.tracker {
            t.clear();
        }
        Ok(())
    }

    /// Hash-table insertion under the budget. Overflow spills the whole
    /// table first; a row too large for an empty table becomes its own run.
    fn hash_push(&mut self, row: &[Value]) -> Result<()> {
        let keys = self.key_row(row);
        let bound = self.growth_bound(&keys, row);
        if !self.tracker.as_ref().unwrap().fits(bound) {
            self.spill_table()?;
        }
        if !self.tracker.as_ref().unwrap().fits(bound) {
            let mut states = init_states(&self.aggs);
            self.update_states(&mut states, row)?;
            let mut w = SpillWriter::create(&self.ctx)?;
            w.push(&keys)?;
            let mut srow = Vec::new();
            for st in &states {
                st.encode(&mut srow);
            }
            w.push(&srow)?;
            self.runs.push(w.finish()?);
            self.ctx.stats.spill_events.fetch_add(1, AtomicOrder::Relaxed);
            return Ok(());
        }
        self.insert_tracked(keys, row, bound)
    }

    fn finish_row(&self, keys: Row, states: Vec<AggState>) -> Row {
        let mut row = keys;
        match self.mode {
            GroupMode::Partial => {
                for st in &states {
                    st.flatten(&mut row);
                }
            }
            _ => {
                for st in states {
                    row.push(st.finalize());
                }
            }
        }
        row
    }

    fn out_marker(&self) -> Option<Vec<SortOrder>> {
        Some((0..self.keys.len()).map(SortOrder::asc).collect())
    }

    /// Drain input, build, and queue all output rows (HASH).
    fn build_hash(&mut self) -> Result<()> {
        let Source::Op(mut input) = std::mem::replace(&mut self.input, Source::Done) else {
            return Ok(());
        };
        let mut saw_rows = false;
        while let Some(b) = input.next_block()? {
            for row in b.to_rows() {
                saw_rows = true;
                self.hash_push(&row)?;
            }
        }
        if self.keys.is_empty() && !saw_rows {
            // A grand total over nothing is still one row.
            let states = init_states(&self.aggs);
            self.out.rows.push_back(self.finish_row(Vec::new(), states));
            return Ok(());
        }
        if self.runs.is_empty() {
            self.out.marker = self.out_marker();
            for (keys, states) in self.table.drain_sorted() {
                self.out.rows.push_back(self.finish_row(keys, states));
            }
        } else {
            self.spill_table()?;
            self.merge = Some(GroupMerge::open(&self.runs, &self.aggs)?);
            self.out.marker = self.out_marker();
        }
        Ok(())
    }

    fn pump_merge(&mut self) -> Result<()> {
        let Some(mut m) = self.merge.take() else { return Ok(()) };
        while self.out.rows.len() < BLOCK_ROWS {
            match m.next_group()? {
                Some((keys, states)) => {
                    let row = self.finish_row(keys, states);
                    self.out.rows.push_back(row);
                }
                None => {
                    self.runs.clear();
                    return Ok(());
                }
            }
        }
        self.merge = Some(m);
        Ok(())
    }

    /// One input block through the PIPELINED path.
    fn pipe_block(&mut self, b: &RowBlock) -> Result<()> {
        if !self.checked_marker {
            if !marker_covers(b.sorted.as_deref(), &self.keys) {
                return Err(Error::Exec(
                    "pipelined group-by requires input sorted on its keys".into(),
                ));
            }
            // Output keys sit at 0..k in self.keys order; input order carries
            // over column by column.
            if let Some(m) = &b.sorted {
                let mut out = Vec::new();
                for o in &m[..self.keys.len().min(m.len())] {
                    match self.keys.iter().position(|&k| k == o.col) {
                        Some(i) => out.push(SortOrder { col: i, desc: o.desc }),
                        None => break,
                    }
                }
                if !out.is_empty() {
                    self.out.marker = Some(out);
                }
            } else if self.keys.is_empty() {
                self.out.marker = None;
            }
            self.checked_marker = true;
        }
        for row in b.to_rows() {
            let keys = self.key_row(&row);
            let switch = match &self.cur {
                Some((k, _)) => !cmp_rows(k, &keys).is_eq(),
                None => false,
            };
            if switch {
                let (k, st) = self.cur.take().unwrap();
                let row = self.finish_row(k, st);
                self.out.rows.push_back(row);
            }
            let (k, mut st) = match self.cur.take() {
                Some(cur) => cur,
                None => (keys, init_states(&self.aggs)),
            };
            self.update_states(&mut st, &row)?;
            self.cur = Some((k, st));
        }
        Ok(())
    }

    fn pipe_finish(&mut self) -> Result<()> {
        if let Some((k, st)) = self.cur.take() {
            let row = self.finish_row(k, st);
            self.out.rows.push_back(row);
        } else if self.keys.is_empty() && !self.emitted_any {
            let row = self.finish_row(Vec::new(), init_states(&self.aggs));
            self.out.rows.push_back(row);
        }
        Ok(())
    }

    /// Flush the PREPASS table downstream and evaluate the reduction ratio.
    fn prepass_flush(&mut self, check_ratio: bool) -> Result<()> {
        let entries = self.table.drain_sorted();
        let groups = entries.len() as u64;
        for (keys, states) in entries {
            let row = self.finish_row(keys, states);
            self.out.rows.push_back(row);
        }
        if let Some(t) = &mut self.tracker {
            t.clear();
        }
        if check_ratio && groups > 0 {
            // Below 1.1 rows per group the table burns memory and CPU
            // without shrinking the stream; stop aggregating.
            if (self.rows_since_flush as f64) / (groups as f64) < 1.1 {
                self.disabled = true;
                self.ctx.stats.prepass_disables.fetch_add(1, AtomicOrder::Relaxed);
            }
        }
        self.rows_since_flush = 0;
        Ok(())
    }

    fn prepass_push(&mut self, row: &[Value]) -> Result<()> {
        if self.disabled {
            let keys = self.key_row(row);
            let mut states = init_states(&self.aggs);
            self.update_states(&mut states, row)?;
            let out = self.finish_row(keys, states);
            self.out.rows.push_back(out);
            return Ok(());
        }
        self.rows_since_flush += 1;
        let keys = self.key_row(row);
        let bound = self.growth_bound(&keys, row);
        if !self.tracker.as_ref().unwrap().fits(bound) {
            self.prepass_flush(true)?;
        }
        if self.disabled || !self.tracker.as_ref().unwrap().fits(bound) {
            let mut states = init_states(&self.aggs);
            self.update_states(&mut states, row)?;
            let out = self.finish_row(keys, states);
            self.out.rows.push_back(out);
            return Ok(());
        }
        self.insert_tracked(keys, row, bound)
    }

    /// Budget-tracked table insert. Callers have already verified `bound`
    /// fits, so the charge below cannot exceed the budget.
    fn insert_tracked(&mut self, keys: Row, row: &[Value], bound: u64) -> Result<()> {
        let h = key_hash(&keys);
        let existing = self
            .table
            .buckets
            .get(&h)
            .and_then(|b| b.iter().position(|(k, _)| cmp_rows(k, &keys).is_eq()));
        match existing {
            Some(i) => {
                let mut states = std::mem::take(&mut self.table.buckets.get_mut(&h).unwrap()[i].1);
                let before: u64 = states.iter().map(|s| s.bytes()).sum();
                self.update_states(&mut states, row)?;
                let after: u64 = states.iter().map(|s| s.bytes()).sum();
                self.table.buckets.get_mut(&h).unwrap()[i].1 = states;
                let t = self.tracker.as_mut().unwrap();
                if after >= before {
                    t.charge((after - before).min(bound));
                } else {
                    t.release(before - after);
                }
            }
            None => {
                let mut states = init_states(&self.aggs);
                self.update_states(&mut states, row)?;
                let cost =
                    64 + row_size(&keys) as u64 + states.iter().map(|s| s.bytes()).sum::<u64>();
                self.table.buckets.entry(h).or_default().push((keys, states));
                self.table.entries += 1;
                self.tracker.as_mut().unwrap().charge(cost.min(bound));
            }
        }
        Ok(())
    }
}

impl Operator for GroupByOp {
    fn width(&self) -> usize {
        self.width
    }

    fn next_block(&mut self) -> Result<Option<RowBlock>> {
        self.ctx.trace_req(self.op);
        match self.variant {
            GroupVariant::Hash => {
                if !self.built {
                    self.build_hash()?;
                    self.built = true;
                }
                self.pump_merge()?;
                let force = self.merge.is_none();
                if let Some(b) = self.out.pop_block(force) {
                    self.emitted_any = true;
                    self.ctx.trace_emit(self.op);
                    return Ok(Some(b));
                }
                Ok(None)
            }
            GroupVariant::Pipelined => loop {
                let done = matches!(self.input, Source::Done);
                if let Some(b) = self.out.pop_block(done) {
                    self.emitted_any = true;
                    self.ctx.trace_emit(self.op);
                    return Ok(Some(b));
                }
                if done {
                    return Ok(None);
                }
                let blk = match &mut self.input {
                    Source::Op(op) => op.next_block()?,
                    Source::Done => None,
                };
                match blk {
                    Some(b) => self.pipe_block(&b)?,
                    None => {
                        self.input = Source::Done;
                        self.pipe_finish()?;
                    }
                }
            },
            GroupVariant::Prepass => loop {
                let done = matches!(self.input, Source::Done);
                if let Some(b) = self.out.pop_block(done) {
                    self.emitted_any = true;
                    self.ctx.trace_emit(self.op);
                    return Ok(Some(b));
                }
                if done {
                    return Ok(None);
                }
                let blk = match &mut self.input {
                    Source::Op(op) => op.next_block()?,
                    Source::Done => None,
                };
                match blk {
                    Some(b) => {
                        for row in b.to_rows() {
                            self.prepass_push(&row)?;
                        }
                    }
                    None => {
                        self.input = Source::Done;
                        self.prepass_flush(false)?;
                        if self.keys.is_empty() && !self.emitted_any && self.out.rows.is_empty() {
                            let row = self.finish_row(Vec::new(), init_states(&self.aggs));
                            self.out.rows.push_back(row);
                        }
                    }
                }
            },
        }
    }

    fn explain(&self) -> ExplainNode {
        let aggs = self.aggs.iter().map(|a| a.label()).collect::<Vec<_>>().join(", ");
        ExplainNode::new(
            format!(
                "GroupBy({}, {}, keys={}, aggs=[{}], budget={})",
                self.variant.name(),
                self.mode.name(),
                super::fmt_cols(&self.keys),
                aggs,
                self.budget.bytes
            ),
            vec![self.child_explain.clone()],
        )
    }
}

/// K-way merge over key-sorted spill runs, combining equal keys.
struct GroupMerge {
    readers: Vec<SpillReader>,
    heads: Vec<Option<(Row, Vec<AggState>)>>,
    aggs: Vec<AggSpec>,
}

impl GroupMerge {
    fn open(runs: &[SpillRun], aggs: &[AggSpec]) -> Result<GroupMerge> {
        let mut readers = Vec::with_capacity(runs.len());
        let mut heads = Vec::with_capacity(runs.len());
        for run in runs {
            let mut r = run.reader()?;
            heads.push(Self::read_entry(&mut r, aggs)?);
            readers.push(r);
        }
        Ok(GroupMerge { readers, heads, aggs: aggs.to_vec() })
    }

    fn read_entry(r: &mut SpillReader, aggs: &[AggSpec]) -> Result<Option<(Row, Vec<AggState>)>> {
        let Some(keys) = r.next_row()? else { return Ok(None) };
        let srow = r
            .next_row()?
            .ok_or_else(|| Error::Corrupt("aggregate spill missing state row".into()))?;
        let mut it = srow.into_iter();
        let mut states = Vec::with_capacity(aggs.len());
        for spec in aggs {
            states.push(AggState::decode(spec, &mut it)?);
        }
        Ok(Some((keys, states)))
    }

    fn next_group(&mut self) -> Result<Option<(Row, Vec<AggState>)>> {
        let mut best: Option<usize> = None;
        for (i, h) in self.heads.iter().enumerate() {
            let Some((k, _)) = h else { continue };
            let better = match best {
                None => true,
                Some(b) => cmp_rows(k, &self.heads[b].as_ref().unwrap().0).is_lt(),
            };
            if better {
                best = Some(i);
            }
        }
        let Some(b) = best else { return Ok(None) };
        let (keys, mut states) = self.heads[b].take().unwrap();
        self.heads[b] = Self::read_entry(&mut self.readers[b], &self.aggs)?;
        // Absorb equal keys from every other run head.
        loop {
            let mut absorbed = false;
            for i in 0..self.heads.len() {
                let eq = matches!(&self.heads[i], Some((k, _)) if cmp_rows(k, &keys).is_eq());
                if eq {
                    let (_, other) = self.heads[i].take().unwrap();
                    for (s, o) in states.iter_mut().zip(other) {
                        s.merge(o)?;
                    }
                    self.heads[i] = Self::read_entry(&mut self.readers[i], &self.aggs)?;
                    absorbed = true;
                }
            }
            if !absorbed {
                break;
            }
        }
        Ok(Some((keys, states)))
    }
}

#[cfg(test)]
mod tests {
    use super::super::testkit::*;
    use super::super::{collect_rows, ValuesOp};
    use super::*;
    use crate::value::Value;

    fn rows_mod(n: i64, m: i64) -> Vec<Row> {
        (0..n).map(|i| vec![Value::Int((i * 48271) % m), Value::Int(i)]).collect()
    }

    fn group(
        ctx: &Arc<ExecContext>,
        rows: Vec<Row>,
        keys: Vec<usize>,
        aggs: Vec<AggSpec>,
        variant: GroupVariant,
        mode: GroupMode,
        budget: u64,
        marker: Option<Vec<SortOrder>>,
    ) -> Result<Vec<Row>> {
        let mut base = ValuesOp::new(ctx, 2, rows);
        if let Some(m) = marker {
            base = base.sorted(m);
        }
        let mut op = GroupByOp::new(
            ctx,
            Box::new(base),
            keys,
            aggs,
            variant,
            mode,
            OperatorBudget::bytes(budget),
        )?;
        collect_rows(&mut op)
    }

    fn oracle_groups(rows: &[Row], key: usize, agg_col: usize) -> Vec<(i64, i64, i64)> {
        // (key, count, sum) sorted by key
        let mut map = std::collections::BTreeMap::new();
        for r in rows {
            let k = r[key].as_i64().unwrap();
            let e = map.entry(k).or_insert((0i64, 0i64));
            e.0 += 1;
            e.1 += r[agg_col].as_i64().unwrap();
        }
        map.into_iter().map(|(k, (c, s))| (k, c, s)).collect()
    }

    #[test]
    fn hash_matches_oracle() {
        let (_dir, ctx) = ctx_only();
        let rows = rows_mod(10_000, 97);
        let oracle = oracle_groups(&rows, 0, 1);
        let got = group(
            &ctx,
            rows,
            vec![0],
            vec![AggSpec::count_star(), AggSpec::of(AggFunc::Sum, 1)],
            GroupVariant::Hash,
            GroupMode::Complete,
            1 << 20,
            None,
        )
        .unwrap();
        let got: Vec<(i64, i64, i64)> = got
            .iter()
            .map(|r| (r[0].as_i64().unwrap(), r[1].as_i64().unwrap(), r[2].as_i64().unwrap()))
            .collect();
        assert_eq!(got, oracle);
        assert_peaks(&ctx);
    }

    #[test]
    fn hash_externalizes_and_stays_correct_across_budgets() {
        let rows = rows_mod(20_000, 389);
        let mut reference: Option<Vec<Row>> = None;
        for budget in [1u64 << 20, 8 * 1024, 2 * 1024] {
            let (_dir, ctx) = ctx_only();
            let got = group(
                &ctx,
                rows.clone(),
                vec![0],
                vec![
                    AggSpec::count_star(),
                    AggSpec::of(AggFunc::Sum, 1),
                    AggSpec::of(AggFunc::Min, 1),
                    AggSpec::of(AggFunc::Max, 1),
                    AggSpec::of(AggFunc::Avg, 1),
                ],
                GroupVariant::Hash,
                GroupMode::Complete,
                budget,
                None,
            )
            .unwrap();
            if budget < 1 << 20 {
                assert!(ctx.stats.get(&ctx.stats.spill_events) > 0, "budget {budget} never spilled");
            }
            assert_eq!(
                ctx.stats.get(&ctx.stats.spill_files_created),
                ctx.stats.get(&ctx.stats.spill_files_removed)
            );
            assert_eq!(std::fs::read_dir(&ctx.spill_root).unwrap().count(), 0);
            assert_peaks(&ctx);
            match &reference {
                None => reference = Some(got),
                Some(r) => assert_eq!(&got, r, "budget {budget} changed the answer"),
            }
        }
    }

    #[test]
    fn pipelined_matches_hash_on_sorted_input() {
        let (_dir, ctx) = ctx_only();
        let mut rows = rows_mod(5000, 50);
        rows.sort_by(|a, b| cmp_rows(a, b));
        let aggs = vec![AggSpec::count_star(), AggSpec::of(AggFunc::Sum, 1)];
        let hash = group(
            &ctx,
            rows.clone(),
            vec![0],
            aggs.clone(),
            GroupVariant::Hash,
            GroupMode::Complete,
            1 << 20,
            None,
        )
        .unwrap();
        let piped = group(
            &ctx,
            rows,
            vec![0],
            aggs,
            GroupVariant::Pipelined,
            GroupMode::Complete,
            1 << 20,
            Some(vec![SortOrder::asc(0)]),
        )
        .unwrap();
        assert_eq!(hash, piped);
    }

    #[test]
    fn pipelined_rejects_unsorted_input() {
        let (_dir, ctx) = ctx_only();
        let err = group(
            &ctx,
            rows_mod(100, 7),
            vec![0],
            vec![AggSpec::count_star()],
            GroupVariant::Pipelined,
            GroupMode::Complete,
            1 << 20,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Exec(_)));
    }

    #[test]
    fn pipelined_streams_groups_without_draining_input() {
        // A sorted stream with many groups: the first block must arrive
        // after only a bounded amount of input is consumed.
        let (_dir, ctx) = ctx_only();
        let rows: Vec<Row> =
            (0..100_000).map(|i| vec![Value::Int(i / 2), Value::Int(i)]).collect();
        let base = ValuesOp::new(&ctx, 2, rows).sorted(vec![SortOrder::asc(0)]);
        let mut op = GroupByOp::new(
            &ctx,
            Box::new(base),
            vec![0],
            vec![AggSpec::count_star()],
            GroupVariant::Pipelined,
            GroupMode::Complete,
            OperatorBudget::default(),
        )
        .unwrap();
        let b = op.next_block().unwrap().unwrap();
        assert_eq!(b.rows, BLOCK_ROWS);
        assert!(marker_covers(b.sorted.as_deref(), &[0]));
    }

    #[test]
    fn partial_then_final_equals_complete() {
        let (_dir, ctx) = ctx_only();
        let rows = rows_mod(8000, 31);
        let aggs = vec![
            AggSpec::count_star(),
            AggSpec::of(AggFunc::Sum, 1),
            AggSpec::of(AggFunc::Avg, 1),
            AggSpec::of(AggFunc::Min, 1),
        ];
        let complete = group(
            &ctx,
            rows.clone(),
            vec![0],
            aggs.clone(),
            GroupVariant::Hash,
            GroupMode::Complete,
            1 << 20,
            None,
        )
        .unwrap();

        // Split the input between two partial aggregations, as two plan
        // fragments would, then feed both outputs to one FINAL.
        let (left, right) = rows.split_at(3000);
        let mut partials = group(
            &ctx,
            left.to_vec(),
            vec![0],
            aggs.clone(),
            GroupVariant::Hash,
            GroupMode::Partial,
            1 << 20,
            None,
        )
        .unwrap();
        partials.extend(
            group(
                &ctx,
                right.to_vec(),
                vec![0],
                aggs.clone(),
                GroupVariant::Hash,
                GroupMode::Partial,
                1 << 20,
                None,
            )
            .unwrap(),
        );
        let pw: usize = aggs.iter().map(|a| a.partial_width()).sum();
        let base = ValuesOp::new(&ctx, 1 + pw, partials);
        let mut fin = GroupByOp::new(
            &ctx,
            Box::new(base),
            vec![0],
            aggs,
            GroupVariant::Hash,
            GroupMode::Final,
            OperatorBudget::default(),
        )
        .unwrap();
        let final_rows = collect_rows(&mut fin).unwrap();
        assert_eq!(final_rows, complete);
    }

    #[test]
    fn prepass_disables_itself_on_distinct_keys() {
        let (_dir, ctx) = ctx_only();
        // Every key unique: the 32KiB table fills without reducing anything.
        let rows: Vec<Row> = (0..20_000).map(|i| vec![Value::Int(i), Value::Int(1)]).collect();
        let got = group(
            &ctx,
            rows.clone(),
            vec![0],
            vec![AggSpec::count_star()],
            GroupVariant::Prepass,
            GroupMode::Partial,
            1 << 20,
            None,
        )
        .unwrap();
        assert!(ctx.stats.get(&ctx.stats.prepass_disables) >= 1);
        // Partials still cover every row exactly once.
        let mut keys: Vec<i64> = got.iter().map(|r| r[0].as_i64().unwrap()).collect();
        keys.sort_unstable();
        assert_eq!(keys, (0..20_000).collect::<Vec<_>>());
        assert!(got.iter().all(|r| r[1] == Value::Int(1)));
        assert_peaks(&ctx);
    }

    #[test]
    fn prepass_keeps_reducing_on_low_cardinality() {
        let (_dir, ctx) = ctx_only();
        let rows = rows_mod(20_000, 5);
        let got = group(
            &ctx,
            rows,
            vec![0],
            vec![AggSpec::count_star()],
            GroupVariant::Prepass,
            GroupMode::Partial,
            1 << 20,
            None,
        )
        .unwrap();
        assert_eq!(ctx.stats.get(&ctx.stats.prepass_disables), 0);
        assert!(got.len() <= 10, "5 keys should stay a handful of partials, got {}", got.len());
        let total: i64 = got.iter().map(|r| r[1].as_i64().unwrap()).sum();
        assert_eq!(total, 20_000);
    }

    #[test]
    fn count_distinct_rejected_outside_complete() {
        let (_dir, ctx) = ctx_only();
        for (variant, mode) in [
            (GroupVariant::Hash, GroupMode::Partial),
            (GroupVariant::Hash, GroupMode::Final),
            (GroupVariant::Prepass, GroupMode::Partial),
        ] {
            let base = ValuesOp::new(&ctx, 2, vec![]);
            let err = GroupByOp::new(
                &ctx,
                Box::new(base),
                vec![0],
                vec![AggSpec::of(AggFunc::CountDistinct, 1)],
                variant,
                mode,
                OperatorBudget::default(),
            )
            .err()
            .expect("distinct must not decompose");
            assert!(matches!(err, Error::Exec(_)));
        }
    }

    #[test]
    fn count_distinct_spills_and_counts_exactly() {
        let (_dir, ctx) = ctx_only();
        let rows: Vec<Row> =
            (0..30_000).map(|i| vec![Value::Int(i % 10), Value::Int(i % 1500)]).collect();
        let got = group(
            &ctx,
            rows,
            vec![0],
            vec![AggSpec::of(AggFunc::CountDistinct, 1)],
            GroupVariant::Hash,
            GroupMode::Complete,
            8 * 1024,
            None,
        )
        .unwrap();
        assert!(ctx.stats.get(&ctx.stats.spill_events) > 0);
        assert_eq!(got.len(), 10);
        // i%10 fixes i mod 10; among 0..1500 every residue class mod 10 has
        // 150 members.
        for r in &got {
            assert_eq!(r[1], Value::Int(150));
        }
        assert_peaks(&ctx);
    }

    #[test]
    fn null_handling_matches_sql() {
        let (_dir, ctx) = ctx_only();
        let rows = vec![
            vec![Value::Int(1), Value::Null],
            vec![Value::Int(1), Value::Int(10)],
            vec![Value::Int(2), Value::Null],
        ];
        let got = group(
            &ctx,
            rows,
            vec![0],
            vec![
                AggSpec::count_star(),
                AggSpec::of(AggFunc::Count, 1),
                AggSpec::of(AggFunc::Sum, 1),
                AggSpec::of(AggFunc::Avg, 1),
                AggSpec::of(AggFunc::Min, 1),
            ],
            GroupVariant::Hash,
            GroupMode::Complete,
            1 << 20,
            None,
        )
        .unwrap();
        assert_eq!(
            got[0],
            vec![
                Value::Int(1),
                Value::Int(2),
                Value::Int(1),
                Value::Int(10),
                Value::Float(10.0),
                Value::Int(10)
            ]
        );
        assert_eq!(
            got[1],
            vec![Value::Int(2), Value::Int(1), Value::Int(0), Value::Null, Value::Null, Value::Null]
        );
    }

    #[test]
    fn global_aggregate_over_empty_input_is_one_row() {
        let (_dir, ctx) = ctx_only();
        for variant in [GroupVariant::Hash, GroupVariant::Pipelined] {
            let got = group(
                &ctx,
                vec![],
                vec![],
                vec![AggSpec::count_star(), AggSpec::of(AggFunc::Sum, 1)],
                variant,
                GroupMode::Complete,
                1 << 20,
                None,
            )
            .unwrap();
            assert_eq!(got, vec![vec![Value::Int(0), Value::Null]]);
        }
    }

    #[test]
    fn nulls_form_their_own_group() {
        let (_dir, ctx) = ctx_only();
        let rows = vec![
            vec![Value::Null, Value::Int(1)],
            vec![Value::Null, Value::Int(2)],
            vec![Value::Int(7), Value::Int(3)],
        ];
        let got = group(
            &ctx,
            rows,
            vec![0],
            vec![AggSpec::count_star()],
            GroupVariant::Hash,
            GroupMode::Complete,
            1 << 20,
            None,
        )
        .unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0], vec![Value::Null, Value::Int(2)]);
        assert_eq!(got[1], vec![Value::Int(7), Value::Int(1)]);
    }
}
