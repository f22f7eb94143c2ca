//! Hash and merge joins.
//!
//! The hash join builds on its right input and probes with its left. Under
//! memory pressure it degrades in two steps rather than failing: first it
//! partitions, spooling the odd hash half of both sides to disk and joining
//! that pair afterwards; if even half a partition exceeds the budget it
//! abandons hashing entirely, sorts both sides externally, and finishes as a
//! merge join. Every escalation preserves the exact result set.
//!
//! After the build side is consumed the join publishes a sideways filter the
//! probe-side scan can use to skip rows: a hash set of build key tuples, or
//! min/max ranges once the join has switched to merge. The filter is
//! conservative, it may pass a non-matching row but never drops a match.
//!
//! NULL join keys never compare equal to anything, including each other.
//! Rows carrying them fall straight through to the outer-side handling.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet, VecDeque};
use std::sync::atomic::Ordering as AtomicOrder;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::value::{row_size, Row, Value};

use super::sort::ExternalSorter;
use super::{
    fmt_cols, sip_key_hash, BoxOp, ExecContext, ExplainNode, MemTracker, OpCursor, Operator,
    OperatorBudget, RowBlock, RowSource, SipFilter, SipHandle, SipKeys, SortOrder, SpillReader,
    SpillRun, SpillWriter, BLOCK_ROWS,
};
use crate::util::StableHasher;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JoinType {
    Inner,
    Left,
    Right,
    Full,
    Semi,
    Anti,
}

impl JoinType {
    fn name(self) -> &'static str {
        match self {
            JoinType::Inner => "INNER",
            JoinType::Left => "LEFT",
            JoinType::Right => "RIGHT",
            JoinType::Full => "FULL",
            JoinType::Semi => "SEMI",
            JoinType::Anti => "ANTI",
        }
    }

    /// Joins whose output is only left columns.
    fn left_only(self) -> bool {
        matches!(self, JoinType::Semi | JoinType::Anti)
    }

    fn emits_unmatched_left(self) -> bool {
        matches!(self, JoinType::Left | JoinType::Full | JoinType::Anti)
    }

    fn emits_unmatched_right(self) -> bool {
        matches!(self, JoinType::Right | JoinType::Full)
    }
}

fn jkey_hash(row: &[Value], cols: &[usize]) -> u64 {
    let mut h = StableHasher::new();
    for &c in cols {
        row[c].hash_into(&mut h);
    }
    h.finish()
}

fn keys_null(row: &[Value], cols: &[usize]) -> bool {
    cols.iter().any(|&c| row[c].is_null())
}

fn keys_match(l: &[Value], lk: &[usize], r: &[Value], rk: &[usize]) -> bool {
    lk.iter().zip(rk).all(|(&a, &b)| {
        let (x, y) = (&l[a], &r[b]);
        !x.is_null() && !y.is_null() && x.total_eq(y)
    })
}

fn concat(l: &[Value], r: &[Value]) -> Row {
    let mut out = Vec::with_capacity(l.len() + r.len());
    out.extend_from_slice(l);
    out.extend_from_slice(r);
    out
}

fn nulls(n: usize) -> Row {
    vec![Value::Null; n]
}

fn jrow_cost(row: &[Value]) -> u64 {
    48 + row_size(row) as u64
}

/// Build-side table: stable key hash to rows, with per-row matched flags for
/// the outer tails. BTreeMap keeps iteration deterministic.
#[derive(Default)]
struct JTable {
    buckets: BTreeMap<u64, Vec<(Row, bool)>>,
}

enum Phase {
    Init,
    Probe(JTable),
    Tail(JTable),
    PairBuild,
    PairProbe { table: JTable, lrows: Option<SpillReader> },
    PairTail(JTable),
    Merge(MergeCore),
    Done,
}

pub struct HashJoinOp {
    ctx: Arc<ExecContext>,
    op: u64,
    jt: JoinType,
    lkeys: Vec<usize>,
    rkeys: Vec<usize>,
    lwidth: usize,
    rwidth: usize,
    budget: OperatorBudget,
    left: Option<BoxOp>,
    right: Option<BoxOp>,
    child_explains: Vec<ExplainNode>,
    tracker: MemTracker,
    phase: Phase,
    out: VecDeque<Row>,
    partitioned: bool,
    lspool: Option<SpillWriter>,
    rspool: Option<SpillWriter>,
    lrun: Option<SpillRun>,
    rrun: Option<SpillRun>,
    sip: Option<SipHandle>,
    sip_set: HashSet<u64>,
    sip_ranges: Vec<Option<(Value, Value)>>,
}

impl HashJoinOp {
    pub fn new(
        ctx: &Arc<ExecContext>,
        left: BoxOp,
        right: BoxOp,
        jt: JoinType,
        lkeys: Vec<usize>,
        rkeys: Vec<usize>,
        budget: OperatorBudget,
        sip: Option<SipHandle>,
    ) -> Result<HashJoinOp> {
        if lkeys.len() != rkeys.len() || lkeys.is_empty() {
            return Err(Error::Exec("join requires matching non-empty key lists".into()));
        }
        if sip.is_some() && jt.emits_unmatched_left() {
            // A probe-side filter would drop rows these joins must emit.
            return Err(Error::Exec(format!(
                "sideways filter is unsound under a {} join",
                jt.name()
            )));
        }
        let op = ctx.op_id();
        let ranges = vec![None; rkeys.len()];
        Ok(HashJoinOp {
            ctx: Arc::clone(ctx),
            op,
            jt,
            lwidth: left.width(),
            rwidth: right.width(),
            child_explains: vec![left.explain(), right.explain()],
            tracker: MemTracker::new(ctx, op, format!("HashJoin({})", jt.name()), budget),
            left: Some(left),
            right: Some(right),
            lkeys,
            rkeys,
            budget,
            phase: Phase::Init,
            out: VecDeque::new(),
            partitioned: false,
            lspool: None,
            rspool: None,
            lrun: None,
            rrun: None,
            sip,
            sip_set: HashSet::new(),
            sip_ranges: ranges,
        })
    }

    fn fold_range(&mut self, row: &[Value]) {
        for (i, &c) in self.rkeys.iter().enumerate() {
            let v = &row[c];
            if v.is_null() {
                continue;
            }
            match &mut self.sip_ranges[i] {
                Some((lo, hi)) => {
                    if v.total_cmp(lo).is_lt() {
                        *lo = v.clone();
                    }
                    if v.total_cmp(hi).is_gt() {
                        *hi = v.clone();
                    }
                }
                slot => *slot = Some((v.clone(), v.clone())),
            }
        }
    }

    /// Evict the odd hash half of the table to disk and route subsequent odd
    /// rows (both sides) the same way.
    fn partition(&mut self, table: &mut JTable) -> Result<()> {
        let mut spool = SpillWriter::create(&self.ctx)?;
        let odd: Vec<u64> = table.buckets.keys().copied().filter(|h| h & 1 == 1).collect();
        for h in odd {
            let bucket = table.buckets.remove(&h).unwrap();
            for (row, _) in bucket {
                self.tracker.release(jrow_cost(&row));
                spool.push(&row)?;
            }
        }
        self.rspool = Some(spool);
        self.partitioned = true;
        self.ctx.stats.spill_events.fetch_add(1, AtomicOrder::Relaxed);
        Ok(())
    }

    /// Abandon hashing: everything seen so far and everything still to come
    /// on both sides goes through external sorts into a merge join.
    fn switch_to_merge(
        &mut self,
        table: JTable,
        pending: Vec<Row>,
        right: &mut BoxOp,
    ) -> Result<MergeCore> {
        self.ctx.stats.join_switches.fetch_add(1, AtomicOrder::Relaxed);
        let rorder: Vec<SortOrder> = self.rkeys.iter().map(|&c| SortOrder::asc(c)).collect();
        let lorder: Vec<SortOrder> = self.lkeys.iter().map(|&c| SortOrder::asc(c)).collect();
        let mut rsort =
            ExternalSorter::new(&self.ctx, self.op, "HashJoin(right sort)", rorder, self.budget);
        for (_, bucket) in table.buckets {
            for (row, _) in bucket {
                rsort.push(row)?;
            }
        }
        self.tracker.clear();
        if let Some(spool) = self.rspool.take() {
            let run = spool.finish()?;
            let mut rd = run.reader()?;
            while let Some(row) = rd.next_row()? {
                rsort.push(row)?;
            }
        }
        for row in pending {
            self.fold_range(&row);
            rsort.push(row)?;
        }
        while let Some(b) = right.next_block()? {
            for row in b.to_rows() {
                self.fold_range(&row);
                rsort.push(row)?;
            }
        }
        let rsorted = rsort.finish()?;
        // Publish ranges before the probe side is drained so scans under it
        // can already skip.
        if let Some(h) = &self.sip {
            let _ = h.set(SipFilter {
                source: self.op,
                keys: SipKeys::Range(self.sip_ranges.clone()),
            });
        }
        let mut lsort =
            ExternalSorter::new(&self.ctx, self.op, "HashJoin(left sort)", lorder, self.budget);
        let mut left = self.left.take().expect("probe side consumed twice");
        while let Some(b) = left.next_block()? {
            for row in b.to_rows() {
                lsort.push(row)?;
            }
        }
        MergeCore::new(
            &self.ctx,
            self.op,
            self.jt,
            self.lkeys.clone(),
            self.rkeys.clone(),
            self.lwidth,
            self.rwidth,
            Box::new(lsort.finish()?),
            Box::new(rsorted),
            self.budget,
        )
    }

    /// Drain the build side into a table, partitioning then switching as the
    /// budget demands.
    fn build(&mut self) -> Result<Phase> {
        let mut right = self.right.take().expect("build side consumed twice");
        let mut table = JTable::default();
        while let Some(b) = right.next_block()? {
            let mut rows = b.to_rows().into_iter();
            while let Some(row) = rows.next() {
                self.fold_range(&row);
                if let Some(h) = sip_key_hash(&row, &self.rkeys) {
                    self.sip_set.insert(h);
                }
                let h = jkey_hash(&row, &self.rkeys);
                if self.partitioned && h & 1 == 1 {
                    self.rspool.as_mut().unwrap().push(&row)?;
                    continue;
                }
                let sz = jrow_cost(&row);
                if !self.tracker.fits(sz) && !self.partitioned {
                    self.partition(&mut table)?;
                    if h & 1 == 1 {
                        self.rspool.as_mut().unwrap().push(&row)?;
                        continue;
                    }
                }
                if !self.tracker.fits(sz) {
                    let mut pending = vec![row];
                    pending.extend(rows);
                    let core = self.switch_to_merge(table, pending, &mut right)?;
                    return Ok(Phase::Merge(core));
                }
                self.tracker.charge(sz);
                table.buckets.entry(h).or_default().push((row, false));
            }
        }
        if let Some(h) = &self.sip {
            let _ = h.set(SipFilter {
                source: self.op,
                keys: SipKeys::Set(std::mem::take(&mut self.sip_set)),
            });
        }
        Ok(Phase::Probe(table))
    }

    /// Probe one left row against a table, queueing output rows.
    fn probe_row(&mut self, table: &mut JTable, lrow: Row, allow_spool: bool) -> Result<()> {
        if keys_null(&lrow, &self.lkeys) {
            self.emit_unmatched_left(lrow);
            return Ok(());
        }
        let h = jkey_hash(&lrow, &self.lkeys);
        if allow_spool && self.partitioned && h & 1 == 1 {
            if self.lspool.is_none() {
                self.lspool = Some(SpillWriter::create(&self.ctx)?);
            }
            self.lspool.as_mut().unwrap().push(&lrow)?;
            return Ok(());
        }
        let mut matched = false;
        if let Some(bucket) = table.buckets.get_mut(&h) {
            for (rrow, m) in bucket.iter_mut() {
                if keys_match(&lrow, &self.lkeys, rrow, &self.rkeys) {
                    matched = true;
                    *m = true;
                    match self.jt {
                        JoinType::Semi => {
                            self.out.push_back(lrow.clone());
                            break;
                        }
                        JoinType::Anti => break,
                        _ => self.out.push_back(concat(&lrow, rrow)),
                    }
                }
            }
        }
        if !matched {
            self.emit_unmatched_left(lrow);
        }
        Ok(())
    }

    fn emit_unmatched_left(&mut self, lrow: Row) {
        match self.jt {
            JoinType::Left | JoinType::Full => {
                let mut row = lrow;
                row.extend(nulls(self.rwidth));
                self.out.push_back(row);
            }
            JoinType::Anti => self.out.push_back(lrow),
            _ => {}
        }
    }

    /// Emit unmatched build rows from some buckets; true when the table is
    /// exhausted.
    fn drain_tail(&mut self, table: &mut JTable) -> bool {
        for _ in 0..64 {
            let Some((_, bucket)) = table.buckets.pop_first() else { return true };
            if self.jt.emits_unmatched_right() {
                for (rrow, m) in bucket {
                    if !m {
                        let mut row = nulls(self.lwidth);
                        row.extend(rrow);
                        self.out.push_back(row);
                    }
                }
            }
        }
        table.buckets.is_empty()
    }

    /// Build a table from the spooled right half; a second overflow here
    /// sort-merges the pair instead.
    fn pair_build(&mut self) -> Result<Phase> {
        let rrun = match self.rrun.take() {
            Some(r) => r,
            None => {
                // Spooled left rows with nothing to join against.
                let lrows = match self.lrun.take() {
                    Some(l) => Some(l.reader()?),
                    None => return Ok(Phase::Done),
                };
                return Ok(Phase::PairProbe { table: JTable::default(), lrows });
            }
        };
        let mut table = JTable::default();
        let mut rd = rrun.reader()?;
        while let Some(row) = rd.next_row()? {
            let sz = jrow_cost(&row);
            if !self.tracker.fits(sz) {
                // Sort-merge the pair: remaining spool rows plus the table.
                self.ctx.stats.join_switches.fetch_add(1, AtomicOrder::Relaxed);
                let rorder: Vec<SortOrder> =
                    self.rkeys.iter().map(|&c| SortOrder::asc(c)).collect();
                let lorder: Vec<SortOrder> =
                    self.lkeys.iter().map(|&c| SortOrder::asc(c)).collect();
                let mut rsort = ExternalSorter::new(
                    &self.ctx,
                    self.op,
                    "HashJoin(pair right sort)",
                    rorder,
                    self.budget,
                );
                for (_, bucket) in std::mem::take(&mut table.buckets) {
                    for (r, _) in bucket {
                        rsort.push(r)?;
                    }
                }
                self.tracker.clear();
                rsort.push(row)?;
                while let Some(r) = rd.next_row()? {
                    rsort.push(r)?;
                }
                let mut lsort = ExternalSorter::new(
                    &self.ctx,
                    self.op,
                    "HashJoin(pair left sort)",
                    lorder,
                    self.budget,
                );
                if let Some(lrun) = self.lrun.take() {
                    let mut lrd = lrun.reader()?;
                    while let Some(r) = lrd.next_row()? {
                        lsort.push(r)?;
                    }
                }
                let core = MergeCore::new(
                    &self.ctx,
                    self.op,
                    self.jt,
                    self.lkeys.clone(),
                    self.rkeys.clone(),
                    self.lwidth,
                    self.rwidth,
                    Box::new(lsort.finish()?),
                    Box::new(rsort.finish()?),
                    self.budget,
                )?;
                return Ok(Phase::Merge(core));
            }
            self.tracker.charge(sz);
            let h = jkey_hash(&row, &self.rkeys);
            table.buckets.entry(h).or_default().push((row, false));
        }
        let lrows = match self.lrun.take() {
            Some(l) => Some(l.reader()?),
            None => None,
        };
        Ok(Phase::PairProbe { table, lrows })
    }
}

impl Operator for HashJoinOp {
    fn width(&self) -> usize {
        if self.jt.left_only() {
            self.lwidth
        } else {
            self.lwidth + self.rwidth
        }
    }

    fn next_block(&mut self) -> Result<Option<RowBlock>> {
        self.ctx.trace_req(self.op);
        loop {
            if self.out.len() >= BLOCK_ROWS {
                let rows: Vec<Row> = self.out.drain(..BLOCK_ROWS).collect();
                self.ctx.trace_emit(self.op);
                return Ok(Some(RowBlock::from_rows(self.width(), &rows)));
            }
            let phase = std::mem::replace(&mut self.phase, Phase::Done);
            match phase {
                Phase::Init => {
                    self.phase = self.build()?;
                }
                Phase::Probe(mut table) => {
                    let mut left = self.left.take().expect("probe side consumed twice");
                    match left.next_block()? {
                        Some(b) => {
                            self.left = Some(left);
                            for row in b.to_rows() {
                                self.probe_row(&mut table, row, true)?;
                            }
                            self.phase = Phase::Probe(table);
                        }
                        None => {
                            if let Some(spool) = self.lspool.take() {
                                self.lrun = Some(spool.finish()?);
                            }
                            if let Some(spool) = self.rspool.take() {
                                self.rrun = Some(spool.finish()?);
                            }
                            self.phase = Phase::Tail(table);
                        }
                    }
                }
                Phase::Tail(mut table) => {
                    if self.drain_tail(&mut table) {
                        self.tracker.clear();
                        if self.lrun.is_some() || self.rrun.is_some() {
                            self.phase = Phase::PairBuild;
                        } else {
                            self.phase = Phase::Done;
                        }
                    } else {
                        self.phase = Phase::Tail(table);
                    }
                }
                Phase::PairBuild => {
                    self.phase = self.pair_build()?;
                }
                Phase::PairProbe { mut table, mut lrows } => {
                    let mut exhausted = true;
                    if let Some(rd) = &mut lrows {
                        exhausted = false;
                        for _ in 0..BLOCK_ROWS {
                            match rd.next_row()? {
                                Some(row) => self.probe_row(&mut table, row, false)?,
                                None => {
                                    exhausted = true;
                                    break;
                                }
                            }
                        }
                    }
                    if exhausted {
                        self.phase = Phase::PairTail(table);
                    } else {
                        self.phase = Phase::PairProbe { table, lrows };
                    }
                }
                Phase::PairTail(mut table) => {
                    if self.drain_tail(&mut table) {
                        self.tracker.clear();
                        self.phase = Phase::Done;
                    } else {
                        self.phase = Phase::PairTail(table);
                    }
                }
                Phase::Merge(mut core) => {
                    let done = core.drain_into(&mut self.out, BLOCK_ROWS)?;
                    self.phase = if done { Phase::Done } else { Phase::Merge(core) };
                }
                Phase::Done => {
                    if self.out.is_empty() {
                        return Ok(None);
                    }
                    let n = self.out.len().min(BLOCK_ROWS);
                    let rows: Vec<Row> = self.out.drain(..n).collect();
                    self.ctx.trace_emit(self.op);
                    self.phase = Phase::Done;
                    return Ok(Some(RowBlock::from_rows(self.width(), &rows)));
                }
            }
        }
    }

    fn explain(&self) -> ExplainNode {
        ExplainNode::new(
            format!(
                "HashJoin({}, lkeys={}, rkeys={}, budget={})",
                self.jt.name(),
                fmt_cols(&self.lkeys),
                fmt_cols(&self.rkeys),
                self.budget.bytes
            ),
            self.child_explains.clone(),
        )
    }
}

/// Merge join over two inputs sorted ascending on their join keys.
pub struct MergeJoinOp {
    ctx: Arc<ExecContext>,
    op: u64,
    jt: JoinType,
    lkeys: Vec<usize>,
    rkeys: Vec<usize>,
    lwidth: usize,
    rwidth: usize,
    budget: OperatorBudget,
    inputs: Option<(BoxOp, BoxOp)>,
    core: Option<MergeCore>,
    done: bool,
    out: VecDeque<Row>,
    marker: Option<Vec<SortOrder>>,
    child_explains: Vec<ExplainNode>,
}

fn sorted_on(marker: Option<&[SortOrder]>, keys: &[usize]) -> bool {
    let Some(m) = marker else { return keys.is_empty() };
    keys.len() <= m.len() && keys.iter().zip(m).all(|(&k, o)| o.col == k && !o.desc)
}

impl MergeJoinOp {
    pub fn new(
        ctx: &Arc<ExecContext>,
        left: BoxOp,
        right: BoxOp,
        jt: JoinType,
        lkeys: Vec<usize>,
        rkeys: Vec<usize>,
        budget: OperatorBudget,
    ) -> Result<MergeJoinOp> {
        if lkeys.len() != rkeys.len() || lkeys.is_empty() {
            return Err(Error::Exec("join requires matching non-empty key lists".into()));
        }
        // Output stays sorted by the left keys as long as no null-extended
        // rows can interleave.
        let marker = match jt {
            JoinType::Right | JoinType::Full => None,
            _ => Some(lkeys.iter().map(|&c| SortOrder::asc(c)).collect()),
        };
        Ok(MergeJoinOp {
            ctx: Arc::clone(ctx),
            op: ctx.op_id(),
            jt,
            lwidth: left.width(),
            rwidth: right.width(),
            child_explains: vec![left.explain(), right.explain()],
            inputs: Some((left, right)),
            core: None,
            done: false,
            out: VecDeque::new(),
            marker,
            lkeys,
            rkeys,
            budget,
        })
    }
}

impl Operator for MergeJoinOp {
    fn width(&self) -> usize {
        if self.jt.left_only() {
            self.lwidth
        } else {
            self.lwidth + self.rwidth
        }
    }

    fn next_block(&mut self) -> Result<Option<RowBlock>> {
        self.ctx.trace_req(self.op);
        if self.core.is_none() && !self.done {
            let (left, right) = self.inputs.take().expect("merge join inputs consumed");
            let mut lcur = OpCursor::new(left);
            let mut rcur = OpCursor::new(right);
            if !sorted_on(lcur.peek_marker()?.as_deref(), &self.lkeys)
                || !sorted_on(rcur.peek_marker()?.as_deref(), &self.rkeys)
            {
                self.done = true;
                return Err(Error::Exec(
                    "merge join requires both inputs sorted ascending on the join keys".into(),
                ));
            }
            self.core = Some(MergeCore::new(
                &self.ctx,
                self.op,
                self.jt,
                self.lkeys.clone(),
                self.rkeys.clone(),
                self.lwidth,
                self.rwidth,
                Box::new(lcur),
                Box::new(rcur),
                self.budget,
            )?);
        }
        loop {
            if self.out.len() >= BLOCK_ROWS || (self.done && !self.out.is_empty()) {
                let n = self.out.len().min(BLOCK_ROWS);
                let rows: Vec<Row> = self.out.drain(..n).collect();
                let mut b = RowBlock::from_rows(self.width(), &rows);
                b.sorted = self.marker.clone();
                self.ctx.trace_emit(self.op);
                return Ok(Some(b));
            }
            if self.done {
                return Ok(None);
            }
            let core = self.core.as_mut().expect("merge core missing");
            if core.drain_into(&mut self.out, BLOCK_ROWS)? {
                self.done = true;
                self.core = None;
            }
        }
    }

    fn explain(&self) -> ExplainNode {
        ExplainNode::new(
            format!(
                "MergeJoin({}, lkeys={}, rkeys={}, budget={})",
                self.jt.name(),
                fmt_cols(&self.lkeys),
                fmt_cols(&self.rkeys),
                self.budget.bytes
            ),
            self.child_explains.clone(),
        )
    }
}

/// Re-iterable buffer for one right-side key group.
enum GroupBuf {
    Mem(Vec<Row>),
    Spilled(SpillRun),
}

fn for_each_group_row(
    group: &GroupBuf,
    mut f: impl FnMut(Row) -> Result<()>,
) -> Result<()> {
    match group {
        GroupBuf::Mem(rows) => {
            for r in rows {
                f(r.clone())?;
            }
        }
        GroupBuf::Spilled(run) => {
            let mut rd = run.reader()?;
            while let Some(r) = rd.next_row()? {
                f(r)?;
            }
        }
    }
    Ok(())
}

/// Group-lockstep merge join core shared by the static merge join and the
/// hash join's overflow fallback. Only the current right-side group is ever
/// buffered; an oversized group goes to disk and is re-read per match.
struct MergeCore {
    ctx: Arc<ExecContext>,
    jt: JoinType,
    lkeys: Vec<usize>,
    rkeys: Vec<usize>,
    lwidth: usize,
    rwidth: usize,
    left: Box<dyn RowSource + Send>,
    right: Box<dyn RowSource + Send>,
    lhead: Option<Row>,
    rhead: Option<Row>,
    group: Option<GroupBuf>,
    group_key: Option<Row>,
    group_matched: bool,
    tracker: MemTracker,
}

impl MergeCore {
    #[allow(clippy::too_many_arguments)]
    fn new(
        ctx: &Arc<ExecContext>,
        op: u64,
        jt: JoinType,
        lkeys: Vec<usize>,
        rkeys: Vec<usize>,
        lwidth: usize,
        rwidth: usize,
        mut left: Box<dyn RowSource + Send>,
        mut right: Box<dyn RowSource + Send>,
        budget: OperatorBudget,
    ) -> Result<MergeCore> {
        let lhead = left.next_row()?;
        let rhead = right.next_row()?;
        Ok(MergeCore {
            ctx: Arc::clone(ctx),
            jt,
            lkeys,
            rkeys,
            lwidth,
            rwidth,
            left,
            right,
            lhead,
            rhead,
            group: None,
            group_key: None,
            group_matched: false,
            tracker: MemTracker::new(ctx, op, format!("MergeJoin({})", jt.name()), budget),
        })
    }

    /// Buffer the full run of right rows sharing rhead's key.
    fn load_group(&mut self, first: Row) -> Result<()> {
        let gk: Row = self.rkeys.iter().map(|&c| first[c].clone()).collect();
        let mut mem: Vec<Row> = Vec::new();
        let mut writer: Option<SpillWriter> = None;
        let mut cur = Some(first);
        while let Some(row) = cur {
            if let Some(w) = &mut writer {
                w.push(&row)?;
            } else {
                let sz = row_size(&row) as u64 + 24;
                if self.tracker.fits(sz) {
                    self.tracker.charge(sz);
                    mem.push(row);
                } else {
                    let mut w = SpillWriter::create(&self.ctx)?;
                    for r in &mem {
                        w.push(r)?;
                    }
                    w.push(&row)?;
                    mem.clear();
                    self.tracker.clear();
                    self.ctx.stats.spill_events.fetch_add(1, AtomicOrder::Relaxed);
                    writer = Some(w);
                }
            }
            cur = match self.right.next_row()? {
                Some(r) => {
                    if self.rkeys.iter().zip(&gk).all(|(&c, g)| r[c].total_eq(g)) {
                        Some(r)
                    } else {
                        self.rhead = Some(r);
                        None
                    }
                }
                None => None,
            };
        }
        self.group = Some(match writer {
            Some(w) => GroupBuf::Spilled(w.finish()?),
            None => GroupBuf::Mem(mem),
        });
        self.group_key = Some(gk);
        self.group_matched = false;
        Ok(())
    }

    fn flush_group(&mut self, out: &mut VecDeque<Row>) -> Result<()> {
        let Some(group) = self.group.take() else { return Ok(()) };
        if self.jt.emits_unmatched_right() && !self.group_matched {
            let lw = self.lwidth;
            for_each_group_row(&group, |r| {
                let mut row = nulls(lw);
                row.extend(r);
                out.push_back(row);
                Ok(())
            })?;
        }
        self.group_key = None;
        self.group_matched = false;
        self.tracker.clear();
        Ok(())
    }

    fn emit_left_unmatched(&self, lrow: Row, out: &mut VecDeque<Row>) {
        match self.jt {
            JoinType::Left | JoinType::Full => {
                let mut row = lrow;
                row.extend(nulls(self.rwidth));
                out.push_back(row);
            }
            JoinType::Anti => out.push_back(lrow),
            _ => {}
        }
    }

    fn cmp_key(&self, l: &[Value], gk: &[Value]) -> Ordering {
        for (&c, g) in self.lkeys.iter().zip(gk) {
            let ord = l[c].total_cmp(g);
            if ord != Ordering::Equal {
                return ord;
            }
        }
        Ordering::Equal
    }

    /// Pump rows into `out` until it holds `want` rows or both sides end.
    fn drain_into(&mut self, out: &mut VecDeque<Row>, want: usize) -> Result<bool> {
        while out.len() < want {
            if self.group.is_none() {
                if let Some(r) = self.rhead.take() {
                    self.load_group(r)?;
                }
            }
            match (self.lhead.is_some(), self.group.is_some()) {
                (false, false) => return Ok(true),
                (false, true) => {
                    self.flush_group(out)?;
                }
                (true, false) => {
                    let l = self.lhead.take().unwrap();
                    self.emit_left_unmatched(l, out);
                    self.lhead = self.left.next_row()?;
                }
                (true, true) => {
                    let gk = self.group_key.as_ref().unwrap().clone();
                    let l = self.lhead.as_ref().unwrap();
                    match self.cmp_key(l, &gk) {
                        Ordering::Less => {
                            let l = self.lhead.take().unwrap();
                            self.emit_left_unmatched(l, out);
                            self.lhead = self.left.next_row()?;
                        }
                        Ordering::Greater => {
                            self.flush_group(out)?;
                        }
                        Ordering::Equal => {
                            // Total order calls NULLs equal; join equality
                            // does not.
                            if gk.iter().any(|v| v.is_null()) {
                                let l = self.lhead.take().unwrap();
                                self.emit_left_unmatched(l, out);
                                self.lhead = self.left.next_row()?;
                            } else {
                                let l = self.lhead.take().unwrap();
                                match self.jt {
                                    JoinType::Semi => out.push_back(l.clone()),
                                    JoinType::Anti => {}
                                    _ => {
                                        let group = self.group.as_ref().unwrap();
                                        for_each_group_row(group, |r| {
                                            out.push_back(concat(&l, &r));
                                            Ok(())
                                        })?;
                                    }
                                }
                                self.group_matched = true;
                                self.lhead = self.left.next_row()?;
                            }
                        }
                    }
                }
            }
        }
        Ok(false)
    }
}
