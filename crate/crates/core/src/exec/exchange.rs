//! Data movement between plan fragments.
//!
//! An exchange is a set of sender threads, one per input operator, feeding
//! bounded queues into receiver operators that downstream fragments pull
//! from. Bounded queues give backpressure; the price is that every receiver
//! of an exchange must be consumed concurrently (by fragment threads), never
//! sequentially on one thread, or a full queue deadlocks the senders.
//!
//! Three movements cover the plans here:
//!  - send_recv BROADCAST copies every block to every up node.
//!  - send_recv SEGMENT routes each row to the node owning its segment, the
//!    same ring used for storage, so a join or group-by downstream sees
//!    exactly its slice. A row whose owner is down fails the exchange; the
//!    planner replans against buddy projections.
//!  - storage_union locally resegments worker streams by key hash so a
//!    parallel final aggregation can run without talking to other nodes.
//!
//! ParallelUnion runs whole fragments on threads and concatenates their
//! output in fragment order, which keeps runs deterministic.

use std::sync::mpsc::{Receiver, SyncSender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crate::cluster::{NodeState, Topology};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::value::{Row, Value};

use super::{
    cmp_ordered, BoxOp, ExecContext, ExplainNode, Operator, RowBlock, SortOrder, BLOCK_ROWS,
};
use crate::util::StableHasher;

/// Blocks in flight per sender-receiver pair before the sender parks.
pub const EXCHANGE_QUEUE: usize = 16;

#[derive(Clone)]
pub enum SendMode {
    Broadcast,
    /// Route rows by this expression through the storage segmentation ring.
    Segment(Expr),
}

impl SendMode {
    fn name(&self) -> &'static str {
        match self {
            SendMode::Broadcast => "BROADCAST",
            SendMode::Segment(_) => "SEGMENT",
        }
    }
}

enum SendItem {
    Block(RowBlock),
    Eof,
    Fail(String),
}

/// Joins sender threads when the last receiver sharing them drops.
struct ThreadSet(Mutex<Vec<JoinHandle<()>>>);

impl Drop for ThreadSet {
    fn drop(&mut self) {
        for h in self.0.lock().unwrap().drain(..) {
            let _ = h.join();
        }
    }
}

/// Row router: None broadcasts, Some maps a row to one destination index.
type Router = Option<Arc<dyn Fn(&[Value]) -> Result<usize> + Send + Sync>>;

fn sender_loop(mut input: BoxOp, txs: &[SyncSender<SendItem>], route: &Router) -> Result<()> {
    match route {
        None => {
            while let Some(b) = input.next_block()? {
                for tx in txs {
                    // A dropped receiver is not an error; others may live on.
                    let _ = tx.send(SendItem::Block(b.clone()));
                }
            }
        }
        Some(route) => {
            let mut bufs: Vec<Vec<Row>> = vec![Vec::new(); txs.len()];
            let mut marker: Option<Vec<SortOrder>> = None;
            let mut first = true;
            let width = input.width();
            while let Some(b) = input.next_block()? {
                if first {
                    marker = b.sorted.clone();
                    first = false;
                }
                for row in b.to_rows() {
                    let d = route(&row)?;
                    bufs[d].push(row);
                    if bufs[d].len() >= BLOCK_ROWS {
                        let mut blk = RowBlock::from_rows(width, &bufs[d]);
                        blk.sorted = marker.clone();
                        bufs[d].clear();
                        let _ = txs[d].send(SendItem::Block(blk));
                    }
                }
            }
            for (d, buf) in bufs.iter_mut().enumerate() {
                if !buf.is_empty() {
                    let mut blk = RowBlock::from_rows(width, buf);
                    blk.sorted = marker.clone();
                    buf.clear();
                    let _ = txs[d].send(SendItem::Block(blk));
                }
            }
        }
    }
    Ok(())
}

fn spawn_exchange(
    ctx: &Arc<ExecContext>,
    inputs: Vec<BoxOp>,
    ndests: usize,
    route: Router,
    label: String,
    preserve_sort: bool,
) -> Result<Vec<RecvOp>> {
    if inputs.is_empty() {
        return Err(Error::Exec("exchange needs at least one input".into()));
    }
    if ndests == 0 {
        return Err(Error::Exec("exchange needs at least one destination".into()));
    }
    let width = inputs[0].width();
    if inputs.iter().any(|i| i.width() != width) {
        return Err(Error::Exec("exchange inputs disagree on width".into()));
    }
    let child_explains: Vec<ExplainNode> = inputs.iter().map(|i| i.explain()).collect();
    // rx_grid[d][s]: what destination d receives from sender s.
    let mut rx_grid: Vec<Vec<Receiver<SendItem>>> =
        (0..ndests).map(|_| Vec::with_capacity(inputs.len())).collect();
    let mut handles = Vec::with_capacity(inputs.len());
    for input in inputs {
        let mut txs = Vec::with_capacity(ndests);
        for row in rx_grid.iter_mut() {
            let (tx, rx) = std::sync::mpsc::sync_channel(EXCHANGE_QUEUE);
            txs.push(tx);
            row.push(rx);
        }
        let route = route.clone();
        handles.push(std::thread::spawn(move || match sender_loop(input, &txs, &route) {
            Ok(()) => {
                for tx in &txs {
                    let _ = tx.send(SendItem::Eof);
                }
            }
            Err(e) => {
                let msg = e.to_string();
                for tx in &txs {
                    let _ = tx.send(SendItem::Fail(msg.clone()));
                }
            }
        }));
    }
    let threads = Arc::new(ThreadSet(Mutex::new(handles)));
    Ok(rx_grid
        .into_iter()
        .enumerate()
        .map(|(d, rxs)| RecvOp {
            ctx: Arc::clone(ctx),
            op: ctx.op_id(),
            label: format!("{label}, dest={d}"),
            width,
            rxs,
            eof: Vec::new(),
            bufs: Vec::new(),
            cur: 0,
            started: false,
            preserve_sort,
            merge_marker: None,
            _threads: Arc::clone(&threads),
            child_explains: child_explains.clone(),
        })
        .collect())
}

/// Move rows between nodes. Returns one receiving operator per UP node, in
/// node id order; fragments on those nodes pull them concurrently.
pub fn send_recv(
    ctx: &Arc<ExecContext>,
    inputs: Vec<BoxOp>,
    top: &Topology,
    mode: SendMode,
    preserve_sort: bool,
) -> Result<Vec<RecvOp>> {
    let up: Vec<usize> =
        (0..top.node_count()).filter(|&n| top.states[n] == NodeState::Up).collect();
    let label = format!("Recv({}", mode.name());
    let route: Router = match &mode {
        SendMode::Broadcast => None,
        SendMode::Segment(expr) => {
            let top = top.clone();
            let expr = expr.clone();
            let ctx = Arc::clone(ctx);
            // Destination index within the up list, keyed by owner node.
            let mut dest_of = vec![None; top.node_count()];
            for (d, &n) in up.iter().enumerate() {
                dest_of[n] = Some(d);
            }
            Some(Arc::new(move |row: &[Value]| {
                let mut w = 0u64;
                let v = expr.eval_u64(row, &mut w)?;
                if w > 0 {
                    ctx.warn(w);
                }
                let owner = top.segment_owner[top.segment_of(v) as usize];
                dest_of[owner].ok_or_else(|| {
                    Error::Cluster(format!("segment owner node {owner} is down"))
                })
            }))
        }
    };
    spawn_exchange(ctx, inputs, up.len(), route, label, preserve_sort)
}

/// Locally resegment worker streams by key hash so each of `ways` downstream
/// fragments owns a disjoint key slice.
pub fn storage_union(
    ctx: &Arc<ExecContext>,
    inputs: Vec<BoxOp>,
    cols: Vec<usize>,
    ways: usize,
) -> Result<Vec<RecvOp>> {
    let route: Router = Some(Arc::new(move |row: &[Value]| {
        let mut h = StableHasher::new();
        for &c in &cols {
            row[c].hash_into(&mut h);
        }
        Ok((h.finish() % ways as u64) as usize)
    }));
    spawn_exchange(ctx, inputs, ways, route, "StorageUnion(LOCAL".into(), false)
}

/// Receiving end of an exchange. Concatenates sender streams in sender
/// order, or merges them by their shared sort marker when asked to.
pub struct RecvOp {
    ctx: Arc<ExecContext>,
    op: u64,
    label: String,
    width: usize,
    // rxs before threads: receivers must disconnect before ThreadSet joins.
    rxs: Vec<Receiver<SendItem>>,
    eof: Vec<bool>,
    bufs: Vec<std::collections::VecDeque<Row>>,
    cur: usize,
    started: bool,
    preserve_sort: bool,
    merge_marker: Option<Vec<SortOrder>>,
    _threads: Arc<ThreadSet>,
    child_explains: Vec<ExplainNode>,
}

impl RecvOp {
    fn recv(&self, s: usize) -> Result<SendItem> {
        self.rxs[s]
            .recv()
            .map_err(|_| Error::Exec("exchange sender dropped without eof".into()))
    }

    /// Top up sender `s`'s row buffer; false when that stream is finished.
    fn fill(&mut self, s: usize) -> Result<bool> {
        while self.bufs[s].is_empty() && !self.eof[s] {
            match self.recv(s)? {
                SendItem::Block(b) => self.bufs[s].extend(b.to_rows()),
                SendItem::Eof => self.eof[s] = true,
                SendItem::Fail(msg) => return Err(Error::Cluster(msg)),
            }
        }
        Ok(!self.bufs[s].is_empty())
    }

    fn start(&mut self) -> Result<()> {
        self.eof = vec![false; self.rxs.len()];
        self.bufs = (0..self.rxs.len()).map(|_| std::collections::VecDeque::new()).collect();
        self.started = true;
        if self.preserve_sort {
            // Merge only if every live stream declares the same order.
            let mut marker: Option<Vec<SortOrder>> = None;
            let mut coherent = true;
            for s in 0..self.rxs.len() {
                if self.bufs[s].is_empty() && !self.eof[s] {
                    match self.recv(s)? {
                        SendItem::Block(b) => {
                            match (&marker, &b.sorted) {
                                (None, Some(m)) => marker = Some(m.clone()),
                                (Some(a), Some(b)) if a == b => {}
                                _ => coherent = false,
                            }
                            self.bufs[s].extend(b.to_rows());
                        }
                        SendItem::Eof => self.eof[s] = true,
                        SendItem::Fail(msg) => return Err(Error::Cluster(msg)),
                    }
                }
            }
            if coherent {
                self.merge_marker = marker;
            }
        }
        Ok(())
    }

    fn next_merged(&mut self, order: &[SortOrder]) -> Result<Option<RowBlock>> {
        let mut rows = Vec::with_capacity(BLOCK_ROWS);
        while rows.len() < BLOCK_ROWS {
            let mut best: Option<usize> = None;
            for s in 0..self.rxs.len() {
                if !self.fill(s)? {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some(b) => {
                        cmp_ordered(self.bufs[s].front().unwrap(), self.bufs[b].front().unwrap(), order)
                            .is_lt()
                    }
                };
                if better {
                    best = Some(s);
                }
            }
            match best {
                Some(s) => rows.push(self.bufs[s].pop_front().unwrap()),
                None => break,
            }
        }
        if rows.is_empty() {
            return Ok(None);
        }
        let mut b = RowBlock::from_rows(self.width, &rows);
        b.sorted = Some(order.to_vec());
        Ok(Some(b))
    }
}

impl Operator for RecvOp {
    fn width(&self) -> usize {
        self.width
    }

    fn next_block(&mut self) -> Result<Option<RowBlock>> {
        self.ctx.trace_req(self.op);
        if !self.started {
            self.start()?;
        }
        if let Some(order) = self.merge_marker.clone() {
            let out = self.next_merged(&order)?;
            if out.is_some() {
                self.ctx.trace_emit(self.op);
            }
            return Ok(out);
        }
        // Concatenate sender streams in sender order.
        loop {
            if self.cur >= self.rxs.len() {
                return Ok(None);
            }
            let s = self.cur;
            if !self.fill(s)? {
                self.cur += 1;
                continue;
            }
            let n = self.bufs[s].len().min(BLOCK_ROWS);
            let rows: Vec<Row> = self.bufs[s].drain(..n).collect();
            self.ctx.trace_emit(self.op);
            return Ok(Some(RowBlock::from_rows(self.width, &rows)));
        }
    }

    fn explain(&self) -> ExplainNode {
        ExplainNode::new(
            format!("{}, senders={})", self.label, self.rxs.len()),
            self.child_explains.clone(),
        )
    }
}

/// Runs plan fragments on their own threads and concatenates their outputs
/// in fragment order.
pub struct ParallelUnion {
    ctx: Arc<ExecContext>,
    op: u64,
    width: usize,
    rxs: Vec<Receiver<SendItem>>,
    eof: Vec<bool>,
    cur: usize,
    _threads: Arc<ThreadSet>,
    child_explains: Vec<ExplainNode>,
}

impl ParallelUnion {
    pub fn new(ctx: &Arc<ExecContext>, frags: Vec<BoxOp>) -> Result<ParallelUnion> {
        if frags.is_empty() {
            return Err(Error::Exec("parallel union needs at least one fragment".into()));
        }
        let width = frags[0].width();
        if frags.iter().any(|f| f.width() != width) {
            return Err(Error::Exec("parallel union fragments disagree on width".into()));
        }
        let child_explains: Vec<ExplainNode> = frags.iter().map(|f| f.explain()).collect();
        let mut rxs = Vec::with_capacity(frags.len());
        let mut handles = Vec::with_capacity(frags.len());
        for mut frag in frags {
            let (tx, rx) = std::sync::mpsc::sync_channel(EXCHANGE_QUEUE);
            rxs.push(rx);
            handles.push(std::thread::spawn(move || {
                let mut run = || -> Result<()> {
                    while let Some(b) = frag.next_block()? {
                        if tx.send(SendItem::Block(b)).is_err() {
                            break;
                        }
                    }
                    Ok(())
                };
                match run() {
                    Ok(()) => {
                        let _ = tx.send(SendItem::Eof);
                    }
                    Err(e) => {
                        let _ = tx.send(SendItem::Fail(e.to_string()));
                    }
                }
            }));
        }
        Ok(ParallelUnion {
            ctx: Arc::clone(ctx),
            op: ctx.op_id(),
            width,
            eof: vec![false; rxs.len()],
            rxs,
            cur: 0,
            _threads: Arc::new(ThreadSet(Mutex::new(handles))),
            child_explains,
        })
    }
}

impl Operator for ParallelUnion {
    fn width(&self) -> usize {
        self.width
    }

    fn next_block(&mut self) -> Result<Option<RowBlock>> {
        self.ctx.trace_req(self.op);
        loop {
            if self.cur >= self.rxs.len() {
                return Ok(None);
            }
            let s = self.cur;
            if self.eof[s] {
                self.cur += 1;
                continue;
            }
            match self.rxs[s]
                .recv()
                .map_err(|_| Error::Exec("parallel fragment dropped without eof".into()))?
            {
                SendItem::Block(b) => {
                    self.ctx.trace_emit(self.op);
                    return Ok(Some(b));
                }
                SendItem::Eof => {
                    self.eof[s] = true;
                    self.cur += 1;
                }
                SendItem::Fail(msg) => return Err(Error::Exec(msg)),
            }
        }
    }

    fn explain(&self) -> ExplainNode {
        ExplainNode::new(
            format!("ParallelUnion(fragments={})", self.rxs.len()),
            self.child_explains.clone(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::testkit::*;
    use super::super::{
        collect_rows, AggFunc, AggSpec, GroupByOp, GroupMode, GroupVariant, OperatorBudget,
        ValuesOp,
    };
    use super::*;
    use crate::expr::Func;
    use crate::value::cmp_rows;

    fn int_rows(n: i64, stride: i64) -> Vec<Row> {
        (0..n).map(|i| vec![Value::Int((i * stride) % 23), Value::Int(i)]).collect()
    }

    /// Drain a set of receivers concurrently, as fragments would.
    fn drain_all(recvs: Vec<RecvOp>) -> Vec<Result<Vec<Row>>> {
        let mut joins = Vec::new();
        for mut r in recvs {
            joins.push(std::thread::spawn(move || collect_rows(&mut r)));
        }
        joins.into_iter().map(|j| j.join().unwrap()).collect()
    }

    #[test]
    fn broadcast_copies_every_row_to_every_up_node() {
        let (_dir, ctx) = ctx_only();
        let top = Topology::new(3, 1).unwrap();
        let rows = int_rows(10, 3);
        let inputs: Vec<super::super::BoxOp> =
            vec![Box::new(ValuesOp::new(&ctx, 2, rows.clone()))];
        let recvs = send_recv(&ctx, inputs, &top, SendMode::Broadcast, false).unwrap();
        assert_eq!(recvs.len(), 3);
        for got in drain_all(recvs) {
            let mut got = got.unwrap();
            got.sort_by(|a, b| cmp_rows(a, b));
            let mut want = rows.clone();
            want.sort_by(|a, b| cmp_rows(a, b));
            assert_eq!(got, want);
        }
    }

    #[test]
    fn segment_routing_is_complete_and_disjoint_by_key() {
        let (_dir, ctx) = ctx_only();
        let top = Topology::new(3, 1).unwrap();
        let a = int_rows(500, 3);
        let b = int_rows(400, 7);
        let inputs: Vec<super::super::BoxOp> = vec![
            Box::new(ValuesOp::new(&ctx, 2, a.clone())),
            Box::new(ValuesOp::new(&ctx, 2, b.clone())),
        ];
        let expr = Expr::Func { func: Func::Hash, args: vec![Expr::col_at("k", 0)] };
        let recvs = send_recv(&ctx, inputs, &top, SendMode::Segment(expr), false).unwrap();
        let per_node: Vec<Vec<Row>> = drain_all(recvs).into_iter().map(|r| r.unwrap()).collect();

        let mut all: Vec<Row> = per_node.iter().flatten().cloned().collect();
        all.sort_by(|a, b| cmp_rows(a, b));
        let mut want: Vec<Row> = a.into_iter().chain(b).collect();
        want.sort_by(|a, b| cmp_rows(a, b));
        assert_eq!(all, want, "every row lands exactly once");

        // A key never appears on two nodes.
        let mut home: std::collections::HashMap<i64, usize> = std::collections::HashMap::new();
        for (n, rows) in per_node.iter().enumerate() {
            for r in rows {
                let k = r[0].as_i64().unwrap();
                if let Some(prev) = home.insert(k, n) {
                    assert_eq!(prev, n, "key {k} split across nodes {prev} and {n}");
                }
            }
        }
    }

    #[test]
    fn segment_exchange_fails_when_an_owner_is_down() {
        let (_dir, ctx) = ctx_only();
        let mut top = Topology::new(3, 1).unwrap();
        top.states[1] = NodeState::Down;
        let rows = int_rows(300, 1);
        let inputs: Vec<super::super::BoxOp> = vec![Box::new(ValuesOp::new(&ctx, 2, rows))];
        let expr = Expr::Func { func: Func::Hash, args: vec![Expr::col_at("k", 0)] };
        let recvs = send_recv(&ctx, inputs, &top, SendMode::Segment(expr), false).unwrap();
        assert_eq!(recvs.len(), 2, "one receiver per up node");
        let outcomes = drain_all(recvs);
        assert!(
            outcomes
                .iter()
                .any(|r| matches!(r, Err(Error::Cluster(m)) if m.contains("down"))),
            "routing to a down owner must surface a cluster error"
        );
    }

    #[test]
    fn preserve_sort_merges_sorted_sender_streams() {
        let (_dir, ctx) = ctx_only();
        let top = Topology::new(1, 0).unwrap();
        let order = vec![SortOrder::asc(0)];
        let evens: Vec<Row> = (0..6000).map(|i| vec![Value::Int(i * 2), Value::Int(0)]).collect();
        let odds: Vec<Row> =
            (0..6000).map(|i| vec![Value::Int(i * 2 + 1), Value::Int(1)]).collect();
        let inputs: Vec<super::super::BoxOp> = vec![
            Box::new(ValuesOp::new(&ctx, 2, evens).sorted(order.clone())),
            Box::new(ValuesOp::new(&ctx, 2, odds).sorted(order.clone())),
        ];
        let mut recvs = send_recv(&ctx, inputs, &top, SendMode::Broadcast, true).unwrap();
        let mut recv = recvs.pop().unwrap();
        let first = recv.next_block().unwrap().unwrap();
        assert_eq!(first.sorted, Some(order.clone()));
        let mut rows = first.to_rows();
        rows.extend(collect_rows(&mut recv).unwrap());
        assert_eq!(rows.len(), 12_000);
        let keys: Vec<i64> = rows.iter().map(|r| r[0].as_i64().unwrap()).collect();
        assert_eq!(keys, (0..12_000).collect::<Vec<_>>(), "streams interleave in order");
    }

    #[test]
    fn storage_union_covers_all_rows_with_keys_kept_together() {
        let (_dir, ctx) = ctx_only();
        let rows = int_rows(2000, 5);
        let inputs: Vec<super::super::BoxOp> = vec![
            Box::new(ValuesOp::new(&ctx, 2, rows[..700].to_vec())),
            Box::new(ValuesOp::new(&ctx, 2, rows[700..1200].to_vec())),
            Box::new(ValuesOp::new(&ctx, 2, rows[1200..].to_vec())),
        ];
        let recvs = storage_union(&ctx, inputs, vec![0], 4).unwrap();
        assert_eq!(recvs.len(), 4);
        let per_way: Vec<Vec<Row>> = drain_all(recvs).into_iter().map(|r| r.unwrap()).collect();
        let mut all: Vec<Row> = per_way.iter().flatten().cloned().collect();
        all.sort_by(|a, b| cmp_rows(a, b));
        let mut want = rows;
        want.sort_by(|a, b| cmp_rows(a, b));
        assert_eq!(all, want);
        let mut home = std::collections::HashMap::new();
        for (w, rows) in per_way.iter().enumerate() {
            for r in rows {
                let k = r[0].as_i64().unwrap();
                if let Some(prev) = home.insert(k, w) {
                    assert_eq!(prev, w, "key {k} split across ways");
                }
            }
        }
    }

    #[test]
    fn parallel_union_keeps_fragment_order_and_content() {
        let (_dir, ctx) = ctx_only();
        let frags: Vec<super::super::BoxOp> = (0..4)
            .map(|f| {
                let rows: Vec<Row> =
                    (0..100).map(|i| vec![Value::Int(f), Value::Int(i)]).collect();
                Box::new(ValuesOp::new(&ctx, 2, rows)) as super::super::BoxOp
            })
            .collect();
        let mut u = ParallelUnion::new(&ctx, frags).unwrap();
        let rows = collect_rows(&mut u).unwrap();
        assert_eq!(rows.len(), 400);
        let tags: Vec<i64> = rows.iter().map(|r| r[0].as_i64().unwrap()).collect();
        let mut sorted = tags.clone();
        sorted.sort_unstable();
        assert_eq!(tags, sorted, "fragment outputs concatenate in order");
    }

    #[test]
    fn fragment_errors_propagate_through_parallel_union() {
        let (_dir, ctx) = ctx_only();
        struct FailOp;
        impl Operator for FailOp {
            fn width(&self) -> usize {
                1
            }
            fn next_block(&mut self) -> Result<Option<RowBlock>> {
                Err(Error::Exec("fragment exploded".into()))
            }
            fn explain(&self) -> ExplainNode {
                ExplainNode::leaf("Fail")
            }
        }
        let mut u = ParallelUnion::new(&ctx, vec![Box::new(FailOp)]).unwrap();
        let err = collect_rows(&mut u).unwrap_err();
        assert!(matches!(err, Error::Exec(m) if m.contains("exploded")));
    }

    /// The distributed aggregation shape: per-worker partial group-bys feed a
    /// local resegmentation, each slice finishes independently, and a union
    /// stitches the slices back together. Must equal the single-threaded
    /// answer exactly.
    #[test]
    fn distributed_group_by_equals_single_node_answer() {
        let (_dir, ctx) = ctx_only();
        let rows = int_rows(30_000, 7);
        let aggs = vec![AggSpec::count_star(), AggSpec::of(AggFunc::Sum, 1)];

        let mut direct = GroupByOp::new(
            &ctx,
            Box::new(ValuesOp::new(&ctx, 2, rows.clone())),
            vec![0],
            aggs.clone(),
            GroupVariant::Hash,
            GroupMode::Complete,
            OperatorBudget::default(),
        )
        .unwrap();
        let mut want = collect_rows(&mut direct).unwrap();
        want.sort_by(|a, b| cmp_rows(a, b));

        let workers: Vec<super::super::BoxOp> = rows
            .chunks(10_000)
            .map(|chunk| {
                let scan = Box::new(ValuesOp::new(&ctx, 2, chunk.to_vec()));
                Box::new(
                    GroupByOp::new(
                        &ctx,
                        scan,
                        vec![0],
                        aggs.clone(),
                        GroupVariant::Prepass,
                        GroupMode::Partial,
                        OperatorBudget::default(),
                    )
                    .unwrap(),
                ) as super::super::BoxOp
            })
            .collect();
        let slices = storage_union(&ctx, workers, vec![0], 3).unwrap();
        let finals: Vec<super::super::BoxOp> = slices
            .into_iter()
            .map(|slice| {
                Box::new(
                    GroupByOp::new(
                        &ctx,
                        Box::new(slice),
                        vec![0],
                        aggs.clone(),
                        GroupVariant::Hash,
                        GroupMode::Final,
                        OperatorBudget::default(),
                    )
                    .unwrap(),
                ) as super::super::BoxOp
            })
            .collect();
        let mut u = ParallelUnion::new(&ctx, finals).unwrap();
        let mut got = collect_rows(&mut u).unwrap();
        got.sort_by(|a, b| cmp_rows(a, b));
        assert_eq!(got, want);
    }
}
