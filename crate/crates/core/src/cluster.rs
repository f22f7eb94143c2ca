//! Simulated shared-nothing cluster: ring segmentation, replicated and
//! segmented routing with buddy copies, quorum commit with node ejection,
//! K-safety evaluation, and node recovery / projection refresh / rebalance,
//! all over a deterministic in-process message bus.
//!
//! The whole cluster lives in one process; node "work" interleaves through
//! explicit method calls, and every random choice comes from a seeded RNG,
//! so any fault schedule replays identically from its seed.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicU64;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::catalog::{DesignCatalog, Epoch, ProjectionDef, Segmentation, TableSchema};
use crate::error::{Error, Result};
use crate::storage::{
    deletion_map, write_atomically, write_dvros, ContainerMeta, DeleteVector, DvTarget,
    NodeStorage, RoutedRow, WriteShape,
};
use crate::value::{Row, Value};

pub type NodeId = usize;

/// Every node keeps its hash range physically split this many ways, so
/// cluster growth can hand off whole sub-ranges without re-splitting rows.
pub const LOCAL_SEGMENTS_PER_NODE: usize = 3;

/// A historical recovery round hands over to the locked current phase when
/// fewer rows than this remain to copy.
pub const CURRENT_PHASE_THRESHOLD: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeState {
    Up,
    Down,
    Recovering,
}

/// Maps the unsigned 64-bit ring onto node `i` of `n` such that
/// `i*C_MAX/n <= value < (i+1)*C_MAX/n` (zero-indexed).
pub fn segment_for(value: u64, n: usize) -> usize {
    ((value as u128 * n as u128) >> 64) as usize
}

#[derive(Debug, Clone)]
pub struct Topology {
    pub states: Vec<NodeState>,
    pub k: u32,
    /// Owner of each global local segment; segment `s` spans
    /// `[s*C_MAX/S, (s+1)*C_MAX/S)` where `S = segment_owner.len()`.
    /// Boundaries are fixed at bootstrap; only ownership ever changes.
    pub segment_owner: Vec<NodeId>,
}

impl Topology {
    pub fn new(nodes: usize, k: u32) -> Result<Topology> {
        if nodes == 0 {
            return Err(Error::Cluster("cluster needs at least one node".into()));
        }
        if k as usize + 1 > nodes {
            return Err(Error::Cluster(format!(
                "k-safety {k} needs at least {} nodes, have {nodes}",
                k as usize + 1
            )));
        }
        let segment_owner = (0..nodes * LOCAL_SEGMENTS_PER_NODE)
            .map(|s| s / LOCAL_SEGMENTS_PER_NODE)
            .collect();
        Ok(Topology { states: vec![NodeState::Up; nodes], k, segment_owner })
    }

    pub fn node_count(&self) -> usize {
        self.states.len()
    }

    pub fn segment_count(&self) -> usize {
        self.segment_owner.len()
    }

    pub fn quorum(&self) -> usize {
        self.node_count() / 2 + 1
    }

    pub fn segment_of(&self, value: u64) -> u32 {
        segment_for(value, self.segment_count()) as u32
    }

    /// Node holding replica `j` (0 = primary) of a segment, for a projection
    /// with the given buddy rotation.
    pub fn replica_node(&self, segment: u32, j: u32, buddy_offset: u32) -> NodeId {
        (self.segment_owner[segment as usize] + (j * buddy_offset) as usize) % self.node_count()
    }

    /// First UP replica of a segment, preferring the primary.
    pub fn readable_replica(&self, segment: u32, buddy_offset: u32) -> Option<(NodeId, u32)> {
        (0..=self.k).find_map(|j| {
            let node = self.replica_node(segment, j, buddy_offset);
            (self.states[node] == NodeState::Up).then_some((node, j))
        })
    }

    pub fn up_count(&self) -> usize {
        self.states.iter().filter(|s| **s == NodeState::Up).count()
    }

    /// Nodes participating in cluster agreement: everything not Down.
    pub fn member_count(&self) -> usize {
        self.states.iter().filter(|s| **s != NodeState::Down).count()
    }

    pub fn first_up(&self) -> Option<NodeId> {
        self.states.iter().position(|s| *s == NodeState::Up)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Safety {
    Continue,
    Shutdown(String),
}

/// SHUTDOWN iff agreement membership falls below quorum, or any segment of
/// any projection has no UP replica left to serve it.
pub fn evaluate_safety<'a>(
    top: &Topology,
    projections: impl IntoIterator<Item = &'a ProjectionDef>,
) -> Safety {
    if top.member_count() < top.quorum() {
        return Safety::Shutdown(format!(
            "{} of {} nodes down, quorum is {}",
            top.node_count() - top.member_count(),
            top.node_count(),
            top.quorum()
        ));
    }
    for proj in projections {
        match proj.segmentation {
            Segmentation::Replicated => {
                if top.up_count() == 0 {
                    return Safety::Shutdown(format!("no node can serve {}", proj.name));
                }
            }
            Segmentation::SegmentedBy(_) => {
                for s in 0..top.segment_count() as u32 {
                    if top.readable_replica(s, proj.buddy_offset).is_none() {
                        return Safety::Shutdown(format!(
                            "segment {s} of {} has no live replica",
                            proj.name
                        ));
                    }
                }
            }
        }
    }
    Safety::Continue
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Commit { epoch: Epoch },
    /// Membership view change: the current state of every node.
    View { states: Vec<NodeState> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    Delivered,
    Dropped,
    Delayed,
}

/// Deterministic in-process message bus. Partitions and one-shot drop or
/// delay rules model injected faults; `chaos` adds seeded random drops.
#[derive(Debug)]
pub struct SimNet {
    rng: ChaCha8Rng,
    /// When set, nodes in different groups cannot exchange messages.
    partition: Option<Vec<BTreeSet<NodeId>>>,
    drop_once: Vec<(NodeId, NodeId)>,
    delay_once: Vec<(NodeId, NodeId)>,
    in_flight: VecDeque<(NodeId, NodeId, Message)>,
    /// Probability that any message is dropped, for randomized schedules.
    pub chaos: f64,
    pub delivered: u64,
    pub dropped: u64,
}

impl SimNet {
    pub fn new(seed: u64) -> SimNet {
        SimNet {
            rng: ChaCha8Rng::seed_from_u64(seed),
            partition: None,
            drop_once: Vec::new(),
            delay_once: Vec::new(),
            in_flight: VecDeque::new(),
            chaos: 0.0,
            delivered: 0,
            dropped: 0,
        }
    }

    pub fn reachable(&self, a: NodeId, b: NodeId) -> bool {
        match &self.partition {
            None => true,
            Some(groups) => groups.iter().any(|g| g.contains(&a) && g.contains(&b)),
        }
    }

    pub fn partition(&mut self, groups: Vec<Vec<NodeId>>) {
        self.partition = Some(groups.into_iter().map(|g| g.into_iter().collect()).collect());
    }

    pub fn heal(&mut self) {
        self.partition = None;
    }

    /// Arranges for the next message from `from` to `to` to be lost.
    pub fn drop_next(&mut self, from: NodeId, to: NodeId) {
        self.drop_once.push((from, to));
    }

    /// Arranges for the next message from `from` to `to` to sit in flight
    /// until the following `tick`.
    pub fn delay_next(&mut self, from: NodeId, to: NodeId) {
        self.delay_once.push((from, to));
    }

    pub fn send(&mut self, from: NodeId, to: NodeId, msg: Message) -> Delivery {
        if !self.reachable(from, to) {
            self.dropped += 1;
            return Delivery::Dropped;
        }
        if let Some(i) = self.drop_once.iter().position(|r| *r == (from, to)) {
            self.drop_once.remove(i);
            self.dropped += 1;
            return Delivery::Dropped;
        }
        if let Some(i) = self.delay_once.iter().position(|r| *r == (from, to)) {
            self.delay_once.remove(i);
            self.in_flight.push_back((from, to, msg));
            return Delivery::Delayed;
        }
        if self.chaos > 0.0 && self.rng.gen_bool(self.chaos) {
            self.dropped += 1;
            return Delivery::Dropped;
        }
        self.delivered += 1;
        Delivery::Delivered
    }

    /// Flushes delayed messages; they deliver now or drop if still
    /// unreachable. Late deliveries return to the caller because a node that
    /// missed its window was already ejected and must not apply them.
    pub fn tick(&mut self) -> Vec<(NodeId, NodeId, Message)> {
        let mut late = Vec::new();
        while let Some((from, to, msg)) = self.in_flight.pop_front() {
            if self.reachable(from, to) {
                self.delivered += 1;
                late.push((from, to, msg));
            } else {
                self.dropped += 1;
            }
        }
        late
    }
}

/// One target's share of a routed insert.
#[derive(Debug, Clone)]
pub struct RoutedBatch {
    pub node: NodeId,
    pub replica: u32,
    pub rows: Vec<RoutedRow>,
}

/// Places table rows for one projection: replicated projections copy every
/// row to every node; segmented projections place each row on exactly one
/// primary node plus K buddies, all holding the same global segment id.
pub fn route_tuples(
    top: &Topology,
    proj: &ProjectionDef,
    table: &TableSchema,
    rows: &[Row],
) -> Result<Vec<RoutedBatch>> {
    let indexes = proj.table_indexes(table);
    let mut batches: BTreeMap<(NodeId, u32), Vec<RoutedRow>> = BTreeMap::new();
    let mut warnings = 0u64;
    for row in rows {
        let pk = table.partition_key(row)?;
        let projected: Row = indexes.iter().map(|&i| row[i].clone()).collect();
        match &proj.segmentation {
            Segmentation::Replicated => {
                for node in 0..top.node_count() {
                    batches
                        .entry((node, 0))
                        .or_default()
                        .push((pk.clone(), 0, projected.clone()));
                }
            }
            Segmentation::SegmentedBy(expr) => {
                let v = expr.eval_u64(&projected, &mut warnings)?;
                let s = top.segment_of(v);
                for j in 0..=top.k {
                    let node = top.replica_node(s, j, proj.buddy_offset);
                    batches.entry((node, j)).or_default().push((pk.clone(), s, projected.clone()));
                }
            }
        }
    }
    Ok(batches
        .into_iter()
        .map(|((node, replica), rows)| RoutedBatch { node, replica, rows })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommitOutcome {
    pub committed: bool,
    pub applied: Vec<NodeId>,
    pub ejected: Vec<NodeId>,
}

/// One physical row with its full history, independent of where it sits
/// (container or WOS). The unit recovery, refresh, and rebalance reason in.
#[derive(Debug, Clone)]
pub struct RowRecord {
    pub row: Row,
    pub pk: Value,
    pub segment: u32,
    pub insert_epoch: Epoch,
    pub delete_epoch: Option<Epoch>,
}

impl RowRecord {
    pub fn visible_at(&self, epoch: Epoch) -> bool {
        self.insert_epoch <= epoch && !self.delete_epoch.is_some_and(|d| d <= epoch)
    }
}

/// Every row of one projection replica on one node, optionally restricted
/// to a segment, with insert and delete epochs attached.
pub fn collect_rows(
    ns: &NodeStorage,
    projection: &str,
    replica: u32,
    segment: Option<u32>,
) -> Result<Vec<RowRecord>> {
    let mut out = Vec::new();
    for c in ns.containers_of(projection, replica) {
        if segment.is_some_and(|s| c.meta.segment != s) {
            continue;
        }
        let dvs = ns.deletes_for(c.meta.id)?;
        let refs: Vec<&DeleteVector> = dvs.iter().collect();
        let map = deletion_map(&refs);
        let (rows, epochs) = c.read_all_rows()?;
        for (pos, (row, insert_epoch)) in rows.into_iter().zip(epochs).enumerate() {
            let delete_epoch =
                map.binary_search_by(|e| e.0.cmp(&(pos as u64))).ok().map(|i| map[i].1);
            out.push(RowRecord {
                row,
                pk: c.meta.partition_key.clone(),
                segment: c.meta.segment,
                insert_epoch,
                delete_epoch,
            });
        }
    }
    if let Some(wos) = ns.wos.get(&(projection.to_string(), replica)) {
        let map = deletion_map(&ns.wos_deletes_for(projection, replica));
        for (pos, wr) in wos.rows.iter().enumerate() {
            if segment.is_some_and(|s| wr.segment != s) {
                continue;
            }
            let delete_epoch =
                map.binary_search_by(|e| e.0.cmp(&(pos as u64))).ok().map(|i| map[i].1);
            out.push(RowRecord {
                row: wr.row.clone(),
                pk: wr.partition_key.clone(),
                segment: wr.segment,
                insert_epoch: wr.epoch,
                delete_epoch,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecoveryPhase {
    Historical,
    Current,
    Done,
}

/// Progress of one node's recovery. Historical rounds run without locks;
/// the caller takes a Shared lock on affected tables for the Current round.
#[derive(Debug)]
pub struct Recovery {
    pub node: NodeId,
    pub phase: RecoveryPhase,
    pub rounds: u32,
    /// Containers dropped or rewritten by the initial truncation.
    pub truncated_containers: usize,
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct RecoveryReport {
    pub wholesale_containers: usize,
    pub rows_copied: u64,
    pub deletes_replayed: u64,
}

impl RecoveryReport {
    fn absorb(&mut self, other: RecoveryReport) {
        self.wholesale_containers += other.wholesale_containers;
        self.rows_copied += other.rows_copied;
        self.deletes_replayed += other.deletes_replayed;
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct RefreshReport {
    pub rows_copied: u64,
    pub deletes_copied: u64,
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct RebalanceReport {
    pub segments_moved: usize,
    pub containers_moved: usize,
    pub rows_replicated: u64,
}

/// A container whose epoch range fits entirely inside a copy window: its
/// column files transfer verbatim, tombstones riding along.
struct WholesaleCopy {
    src_root: PathBuf,
    meta: ContainerMeta,
    tombstones: Vec<(u64, Epoch)>,
}

/// A planned copy of history in `(lo, hi]` from a source replica to one
/// (node, replica) destination. Built read-only, then applied.
struct CopyPlan {
    wholesale: Vec<WholesaleCopy>,
    /// Individual rows from straddling containers or the source WOS.
    rows: Vec<(RoutedRow, Epoch)>,
    /// Tombstones for rows in `rows`, replayed by value after the load.
    row_deletes: Vec<(Row, Epoch)>,
    /// In-window tombstones on rows the destination already has.
    old_row_deletes: Vec<(Row, Epoch)>,
}

pub struct Cluster {
    pub topology: Topology,
    pub net: SimNet,
    pub storage: Vec<NodeStorage>,
    pub data_dir: PathBuf,
    ids: Arc<AtomicU64>,
}

impl Cluster {
    pub fn open(data_dir: &Path, nodes: usize, k: u32, seed: u64) -> Result<Cluster> {
        let topology = Topology::new(nodes, k)?;
        let ids = Arc::new(AtomicU64::new(1));
        let mut storage = Vec::with_capacity(nodes);
        for n in 0..nodes {
            storage.push(NodeStorage::open(data_dir, n, ids.clone())?);
        }
        Ok(Cluster {
            topology,
            net: SimNet::new(seed),
            storage,
            data_dir: data_dir.to_path_buf(),
            ids,
        })
    }

    /// Kills a node: everything memory-resident (WOS, unspilled tombstones)
    /// dies with it. Sealed files survive for the eventual recovery.
    pub fn kill(&mut self, node: NodeId) {
        self.topology.states[node] = NodeState::Down;
        let ns = &mut self.storage[node];
        ns.wos.clear();
        ns.dvwos.clear();
    }

    /// Routes and applies one table insert everywhere reachable. Nodes that
    /// are down or unreachable simply miss the data; the commit decides
    /// their fate. Returns the nodes that stored something.
    pub fn apply_insert(
        &mut self,
        catalog: &DesignCatalog,
        table: &str,
        rows: &[Row],
        epoch: Epoch,
    ) -> Result<Vec<NodeId>> {
        let schema = catalog.table(table)?;
        let coordinator = self
            .topology
            .first_up()
            .ok_or_else(|| Error::Shutdown("no node up to coordinate".into()))?;
        let mut touched = BTreeSet::new();
        for proj in catalog.table_projections(table) {
            let shape = WriteShape::of(proj, schema);
            for batch in route_tuples(&self.topology, proj, schema, rows)? {
                if self.topology.states[batch.node] == NodeState::Down
                    || !self.net.reachable(coordinator, batch.node)
                {
                    continue;
                }
                let ns = &mut self.storage[batch.node];
                let taken = ns.wos_insert(&proj.name, batch.replica, &batch.rows, epoch);
                if taken < batch.rows.len() {
                    // WOS full: the remainder bypasses it straight to ROS.
                    let spill = batch.rows[taken..].to_vec();
                    for meta in ns.direct_load(&shape, batch.replica, spill, epoch)? {
                        ns.register(meta);
                    }
                }
                touched.insert(batch.node);
            }
        }
        Ok(touched.into_iter().collect())
    }

    /// Broadcasts the commit decision. There is no prepare round: each node
    /// either applies the commit or leaves the cluster, and the commit
    /// stands iff a quorum applied it.
    pub fn quorum_commit(&mut self, epoch: Epoch) -> Result<CommitOutcome> {
        let coordinator = self
            .topology
            .first_up()
            .ok_or_else(|| Error::Shutdown("no node up to coordinate".into()))?;
        let mut applied = Vec::new();
        let mut ejected = Vec::new();
        for node in 0..self.topology.node_count() {
            if self.topology.states[node] == NodeState::Down {
                continue;
            }
            if node == coordinator
                || self.net.send(coordinator, node, Message::Commit { epoch })
                    == Delivery::Delivered
            {
                applied.push(node);
            } else {
                ejected.push(node);
            }
        }
        for &node in &ejected {
            self.kill(node);
        }
        if !ejected.is_empty() {
            // Survivors learn the new membership view.
            let view = Message::View { states: self.topology.states.clone() };
            for node in 0..self.topology.node_count() {
                if self.topology.states[node] != NodeState::Down && node != coordinator {
                    self.net.send(coordinator, node, view.clone());
                }
            }
        }
        Ok(CommitOutcome { committed: applied.len() >= self.topology.quorum(), applied, ejected })
    }

    /// Multiset of a projection's rows visible at an epoch, reading each
    /// segment from its first UP replica.
    pub fn scan_cluster(
        &self,
        catalog: &DesignCatalog,
        projection: &str,
        epoch: Epoch,
    ) -> Result<Vec<Row>> {
        let proj = catalog.projection(projection)?;
        match proj.segmentation {
            Segmentation::Replicated => {
                let node = self
                    .topology
                    .first_up()
                    .ok_or_else(|| Error::Shutdown("no node up".into()))?;
                self.storage[node].scan_projection(projection, 0, epoch)
            }
            Segmentation::SegmentedBy(_) => {
                let mut out = Vec::new();
                for s in 0..self.topology.segment_count() as u32 {
                    let (node, replica) =
                        self.topology.readable_replica(s, proj.buddy_offset).ok_or_else(|| {
                            Error::Shutdown(format!("segment {s} of {projection} unavailable"))
                        })?;
                    for rec in collect_rows(&self.storage[node], projection, replica, Some(s))? {
                        if rec.visible_at(epoch) {
                            out.push(rec.row);
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// All (segment, replica) assignments a node holds for a projection.
    fn assignments(&self, proj: &ProjectionDef, node: NodeId) -> Vec<(u32, u32)> {
        match proj.segmentation {
            Segmentation::Replicated => vec![(0, 0)],
            Segmentation::SegmentedBy(_) => {
                let mut out = Vec::new();
                for s in 0..self.topology.segment_count() as u32 {
                    for j in 0..=self.topology.k {
                        if self.topology.replica_node(s, j, proj.buddy_offset) == node {
                            out.push((s, j));
                        }
                    }
                }
                out
            }
        }
    }

    /// A live node other than `exclude` holding some replica of `segment`
    /// (or, for replicated projections, a full copy).
    fn source_for(
        &self,
        proj: &ProjectionDef,
        segment: u32,
        exclude: NodeId,
    ) -> Result<(NodeId, u32)> {
        match proj.segmentation {
            Segmentation::Replicated => (0..self.topology.node_count())
                .find(|&n| n != exclude && self.topology.states[n] == NodeState::Up)
                .map(|n| (n, 0))
                .ok_or_else(|| Error::Cluster(format!("no live copy of {}", proj.name))),
            Segmentation::SegmentedBy(_) => (0..=self.topology.k)
                .find_map(|j| {
                    let n = self.topology.replica_node(segment, j, proj.buddy_offset);
                    (n != exclude && self.topology.states[n] == NodeState::Up).then_some((n, j))
                })
                .ok_or_else(|| {
                    Error::Cluster(format!("no live buddy for segment {segment} of {}", proj.name))
                }),
        }
    }

    /// Builds the copy plan for epochs in `(lo, hi]` of one segment from a
    /// source replica. Pure read: the borrow of the source ends before the
    /// destination is touched.
    fn plan_copy(
        &self,
        proj: &ProjectionDef,
        src: (NodeId, u32),
        segment: Option<u32>,
        lo: Epoch,
        hi: Epoch,
    ) -> Result<CopyPlan> {
        let ns = &self.storage[src.0];
        let mut plan = CopyPlan {
            wholesale: Vec::new(),
            rows: Vec::new(),
            row_deletes: Vec::new(),
            old_row_deletes: Vec::new(),
        };
        for c in ns.containers_of(&proj.name, src.1) {
            if segment.is_some_and(|s| c.meta.segment != s) {
                continue;
            }
            let dvs = ns.deletes_for(c.meta.id)?;
            let refs: Vec<&DeleteVector> = dvs.iter().collect();
            let map = deletion_map(&refs);
            if c.meta.epoch_min > lo && c.meta.epoch_max <= hi {
                // The whole container is inside the window: ship the files.
                plan.wholesale.push(WholesaleCopy {
                    src_root: ns.root.clone(),
                    meta: c.meta.clone(),
                    tombstones: map.into_iter().filter(|(_, d)| *d <= hi).collect(),
                });
                continue;
            }
            if c.meta.epoch_max <= lo {
                // Old container: only its in-window tombstones matter.
                if map.iter().any(|(_, d)| *d > lo && *d <= hi) {
                    let (rows, _) = c.read_all_rows()?;
                    for (pos, d) in map {
                        if d > lo && d <= hi {
                            plan.old_row_deletes.push((rows[pos as usize].clone(), d));
                        }
                    }
                }
                continue;
            }
            // Straddles the window edge: pick rows one by one.
            let (rows, epochs) = c.read_all_rows()?;
            for (pos, (row, e)) in rows.into_iter().zip(epochs).enumerate() {
                let del = map.binary_search_by(|x| x.0.cmp(&(pos as u64))).ok().map(|i| map[i].1);
                if e > lo && e <= hi {
                    if let Some(d) = del.filter(|d| *d <= hi) {
                        plan.row_deletes.push((row.clone(), d));
                    }
                    plan.rows.push(((c.meta.partition_key.clone(), c.meta.segment, row), e));
                } else if e <= lo {
                    if let Some(d) = del.filter(|d| *d > lo && *d <= hi) {
                        plan.old_row_deletes.push((row, d));
                    }
                }
            }
        }
        if let Some(wos) = ns.wos.get(&(proj.name.clone(), src.1)) {
            let map = deletion_map(&ns.wos_deletes_for(&proj.name, src.1));
            for (pos, wr) in wos.rows.iter().enumerate() {
                if segment.is_some_and(|s| wr.segment != s) {
                    continue;
                }
                let del = map.binary_search_by(|x| x.0.cmp(&(pos as u64))).ok().map(|i| map[i].1);
                if wr.epoch > lo && wr.epoch <= hi {
                    if let Some(d) = del.filter(|d| *d <= hi) {
                        plan.row_deletes.push((wr.row.clone(), d));
                    }
                    plan.rows
                        .push(((wr.partition_key.clone(), wr.segment, wr.row.clone()), wr.epoch));
                } else if wr.epoch <= lo {
                    if let Some(d) = del.filter(|d| *d > lo && *d <= hi) {
                        plan.old_row_deletes.push((wr.row.clone(), d));
                    }
                }
            }
        }
        Ok(plan)
    }

    fn copy_container_verbatim(
        ns: &NodeStorage,
        src_root: &Path,
        meta: &ContainerMeta,
        replica: u32,
    ) -> Result<ContainerMeta> {
        let id = ns.alloc_id();
        let mut new = meta.clone();
        new.id = id;
        new.replica = replica;
        let tmp = ns.root.join("tmp");
        for col in new.columns.iter_mut().chain(new.epoch_column.iter_mut()) {
            let data = fs::read(src_root.join(&col.data_file))?;
            let index = fs::read(src_root.join(&col.index_file))?;
            col.data_file = format!("ros/c{id}_{}.dat", col.name);
            col.index_file = format!("ros/c{id}_{}.idx", col.name);
            write_atomically(&ns.root, &tmp, &col.data_file, &data)?;
            write_atomically(&ns.root, &tmp, &col.index_file, &index)?;
        }
        Ok(new)
    }

    /// Marks one value-equal, not-yet-deleted row of the projection replica
    /// as deleted. Which physical occurrence gets the tombstone is
    /// unspecified; all choices are query-equivalent.
    fn mark_deleted_by_value(
        ns: &mut NodeStorage,
        projection: &str,
        replica: u32,
        row: &Row,
        epoch: Epoch,
    ) -> Result<()> {
        let row_eq =
            |a: &Row| a.len() == row.len() && a.iter().zip(row).all(|(x, y)| x.total_eq(y));
        let mut target = None;
        for c in ns.containers_of(projection, replica) {
            let dvs = ns.deletes_for(c.meta.id)?;
            let refs: Vec<&DeleteVector> = dvs.iter().collect();
            let map = deletion_map(&refs);
            let (rows, _) = c.read_all_rows()?;
            if let Some(pos) = (0..rows.len()).find(|&pos| {
                row_eq(&rows[pos]) && map.binary_search_by(|e| e.0.cmp(&(pos as u64))).is_err()
            }) {
                target = Some((DvTarget::Ros(c.meta.id), pos as u64));
                break;
            }
        }
        if target.is_none() {
            if let Some(wos) = ns.wos.get(&(projection.to_string(), replica)) {
                let map = deletion_map(&ns.wos_deletes_for(projection, replica));
                if let Some(pos) = (0..wos.rows.len()).find(|&pos| {
                    row_eq(&wos.rows[pos].row)
                        && map.binary_search_by(|e| e.0.cmp(&(pos as u64))).is_err()
                }) {
                    target = Some((
                        DvTarget::Wos { projection: projection.to_string(), replica },
                        pos as u64,
                    ));
                }
            }
        }
        let (tgt, pos) = target.ok_or_else(|| {
            Error::Cluster(format!("delete replay found no live row in {projection}"))
        })?;
        ns.mark_deleted(tgt, &[pos], epoch)?;
        Ok(())
    }

    fn apply_copy(
        &mut self,
        proj: &ProjectionDef,
        shape: &WriteShape,
        dst: (NodeId, u32),
        plan: CopyPlan,
        report: &mut RecoveryReport,
    ) -> Result<()> {
        let ns = &mut self.storage[dst.0];
        for copy in plan.wholesale {
            report.rows_copied += copy.meta.row_count;
            let new = Self::copy_container_verbatim(ns, &copy.src_root, &copy.meta, dst.1)?;
            let new_id = new.id;
            ns.register(new);
            if !copy.tombstones.is_empty() {
                report.deletes_replayed += copy.tombstones.len() as u64;
                let dv = DeleteVector {
                    id: ns.alloc_id(),
                    target: DvTarget::Ros(new_id),
                    entries: copy.tombstones,
                };
                let dv_meta = write_dvros(&ns.root, &ns.root.join("tmp"), &dv)?;
                ns.register_dv(dv_meta);
            }
            report.wholesale_containers += 1;
        }
        if !plan.rows.is_empty() {
            report.rows_copied += plan.rows.len() as u64;
            for meta in ns.load_rows(shape, dst.1, plan.rows)? {
                ns.register(meta);
            }
        }
        for (row, epoch) in plan.row_deletes.into_iter().chain(plan.old_row_deletes) {
            report.deletes_replayed += 1;
            Self::mark_deleted_by_value(ns, &proj.name, dst.1, &row, epoch)?;
        }
        Ok(())
    }

    /// Starts recovery of a down node: everything after the node's last
    /// good epoch is dropped (whole containers where possible, row by row
    /// where a merged container mixes history from both sides), so the node
    /// resumes from a consistent prefix. Copy rounds follow.
    pub fn begin_recovery(&mut self, catalog: &DesignCatalog, node: NodeId) -> Result<Recovery> {
        if self.topology.states[node] != NodeState::Down {
            return Err(Error::Cluster(format!("node {node} is not down")));
        }
        let mut truncated = 0usize;
        // A down node has no memory-resident state by definition.
        self.storage[node].wos.clear();
        self.storage[node].dvwos.clear();
        for proj in catalog.projections.values() {
            let table = catalog.table(&proj.anchor_table)?;
            let shape = WriteShape::of(proj, table);
            let lge = catalog.lge.get(&(proj.name.clone(), node)).copied().unwrap_or(0);
            let ns = &mut self.storage[node];
            let metas: Vec<ContainerMeta> = ns
                .containers
                .values()
                .filter(|c| c.meta.projection == proj.name)
                .map(|c| c.meta.clone())
                .collect();
            for meta in metas {
                if meta.epoch_min > lge {
                    ns.retire(meta.id)?;
                    truncated += 1;
                } else if meta.epoch_max > lge {
                    // Mixed container: keep the prefix at or below the LGE,
                    // re-seal it, and let the copy rounds restore the rest.
                    let container = ns.containers[&meta.id].clone();
                    let dvs = ns.deletes_for(meta.id)?;
                    let refs: Vec<&DeleteVector> = dvs.iter().collect();
                    let map = deletion_map(&refs);
                    let (rows, epochs) = container.read_all_rows()?;
                    let mut keep: Vec<(RoutedRow, Epoch)> = Vec::new();
                    let mut keep_deletes: Vec<(Row, Epoch)> = Vec::new();
                    for (pos, (row, e)) in rows.into_iter().zip(epochs).enumerate() {
                        if e > lge {
                            continue;
                        }
                        if let Ok(i) = map.binary_search_by(|x| x.0.cmp(&(pos as u64))) {
                            if map[i].1 <= lge {
                                keep_deletes.push((row.clone(), map[i].1));
                            }
                        }
                        keep.push(((meta.partition_key.clone(), meta.segment, row), e));
                    }
                    ns.retire(meta.id)?;
                    truncated += 1;
                    for m in ns.load_rows(&shape, meta.replica, keep)? {
                        ns.register(m);
                    }
                    for (row, epoch) in keep_deletes {
                        Self::mark_deleted_by_value(ns, &proj.name, meta.replica, &row, epoch)?;
                    }
                }
            }
            // Tombstones after the LGE are replayed from the buddy; local
            // leftovers must go so the replay cannot double-delete.
            let dv_metas: Vec<(u64, u64, Epoch, Epoch)> = ns
                .dvros
                .values()
                .map(|d| (d.meta.id, d.meta.container, d.meta.epoch_min, d.meta.epoch_max))
                .collect();
            for (id, target, emin, emax) in dv_metas {
                let of_this_proj =
                    ns.containers.get(&target).is_some_and(|c| c.meta.projection == proj.name);
                let orphaned = !ns.containers.contains_key(&target);
                if !(of_this_proj || orphaned) {
                    continue;
                }
                if orphaned || emin > lge {
                    ns.retire_dv(id)?;
                } else if emax > lge {
                    let dv = ns.dvros[&id].load()?;
                    let kept: Vec<(u64, Epoch)> =
                        dv.entries.into_iter().filter(|(_, e)| *e <= lge).collect();
                    ns.retire_dv(id)?;
                    if !kept.is_empty() {
                        let nv = DeleteVector {
                            id: ns.alloc_id(),
                            target: DvTarget::Ros(target),
                            entries: kept,
                        };
                        let dv_meta = write_dvros(&ns.root, &ns.root.join("tmp"), &nv)?;
                        ns.register_dv(dv_meta);
                    }
                }
            }
        }
        self.topology.states[node] = NodeState::Recovering;
        Ok(Recovery {
            node,
            phase: RecoveryPhase::Historical,
            rounds: 0,
            truncated_containers: truncated,
        })
    }

    /// Runs one recovery round, copying committed history in
    /// `(LGE, current_epoch]` from buddies and advancing the LGE. Historical
    /// rounds repeat while fresh commits keep arriving; once the remainder
    /// is small the next round is the Current one (the caller holds the
    /// Shared lock for it), after which the node is UP.
    pub fn recovery_round(
        &mut self,
        catalog: &mut DesignCatalog,
        rec: &mut Recovery,
    ) -> Result<RecoveryReport> {
        if rec.phase == RecoveryPhase::Done {
            return Ok(RecoveryReport::default());
        }
        if self.topology.states[rec.node] != NodeState::Recovering {
            return Err(Error::Cluster(format!("node {} is not recovering", rec.node)));
        }
        let e_h = catalog.current_epoch;
        let mut report = RecoveryReport::default();
        let projections: Vec<ProjectionDef> = catalog.projections.values().cloned().collect();
        for proj in &projections {
            let table = catalog.table(&proj.anchor_table)?;
            let shape = WriteShape::of(proj, table);
            let lge = catalog.lge.get(&(proj.name.clone(), rec.node)).copied().unwrap_or(0);
            if lge >= e_h {
                continue;
            }
            for (segment, replica) in self.assignments(proj, rec.node) {
                let seg_filter = proj.is_segmented().then_some(segment);
                let src = self.source_for(proj, segment, rec.node)?;
                let plan = self.plan_copy(proj, src, seg_filter, lge, e_h)?;
                self.apply_copy(proj, &shape, (rec.node, replica), plan, &mut report)?;
            }
            catalog.lge.insert((proj.name.clone(), rec.node), e_h);
        }
        rec.rounds += 1;
        match rec.phase {
            RecoveryPhase::Historical => {
                // Everything committed before this round is now local; what
                // remains is whatever committed during it. Once that tail is
                // small, the next (locked) round finishes the job.
                if self.rows_committed_after(catalog, e_h)? < CURRENT_PHASE_THRESHOLD {
                    rec.phase = RecoveryPhase::Current;
                }
            }
            RecoveryPhase::Current => {
                rec.phase = RecoveryPhase::Done;
                self.topology.states[rec.node] = NodeState::Up;
            }
            RecoveryPhase::Done => unreachable!(),
        }
        Ok(report)
    }

    /// Upper bound on rows committed after `epoch`, estimated from live
    /// replicas. Decides when recovery switches to the locked phase.
    fn rows_committed_after(&self, catalog: &DesignCatalog, epoch: Epoch) -> Result<u64> {
        let mut total = 0u64;
        for proj in catalog.projections.values() {
            if !proj.is_super {
                continue;
            }
            match proj.segmentation {
                Segmentation::Replicated => {
                    let Some(node) = self.topology.first_up() else { continue };
                    for rec in collect_rows(&self.storage[node], &proj.name, 0, None)? {
                        total += u64::from(rec.insert_epoch > epoch);
                    }
                }
                Segmentation::SegmentedBy(_) => {
                    for s in 0..self.topology.segment_count() as u32 {
                        let Some((node, replica)) =
                            self.topology.readable_replica(s, proj.buddy_offset)
                        else {
                            continue;
                        };
                        for rec in collect_rows(&self.storage[node], &proj.name, replica, Some(s))?
                        {
                            total += u64::from(rec.insert_epoch > epoch);
                        }
                    }
                }
            }
        }
        Ok(total)
    }

    /// Full recovery to completion; the per-round API exists so a driver
    /// can interleave loads and queries between rounds.
    pub fn recover_node(
        &mut self,
        catalog: &mut DesignCatalog,
        node: NodeId,
    ) -> Result<RecoveryReport> {
        let mut rec = self.begin_recovery(catalog, node)?;
        let mut total = RecoveryReport::default();
        while rec.phase != RecoveryPhase::Done {
            total.absorb(self.recovery_round(catalog, &mut rec)?);
        }
        Ok(total)
    }

    /// Populates a projection created after its table already had data, by
    /// replaying a super projection's full history (deleted rows included)
    /// through the new projection's own routing.
    pub fn refresh_projection(
        &mut self,
        catalog: &mut DesignCatalog,
        projection: &str,
    ) -> Result<RefreshReport> {
        let proj = catalog.projection(projection)?.clone();
        let table = catalog.table(&proj.anchor_table)?.clone();
        let source = catalog
            .table_projections(&proj.anchor_table)
            .into_iter()
            .find(|p| p.is_super && !p.needs_refresh && p.name != projection)
            .cloned()
            .ok_or_else(|| {
                Error::Cluster(format!("no populated super projection for {}", proj.anchor_table))
            })?;
        let e_h = catalog.current_epoch;
        let src_indexes = source.table_indexes(&table);

        // Pull each row of the table exactly once, from whichever replica
        // of the source projection is up, rebuilding full table rows.
        let mut records: Vec<(Row, Epoch, Option<Epoch>)> = Vec::new();
        let mut pull = |recs: Vec<RowRecord>| {
            for rec in recs {
                if rec.insert_epoch > e_h {
                    continue;
                }
                let mut full = vec![Value::Null; table.columns.len()];
                for (i, &t) in src_indexes.iter().enumerate() {
                    full[t] = rec.row[i].clone();
                }
                records.push((full, rec.insert_epoch, rec.delete_epoch.filter(|d| *d <= e_h)));
            }
        };
        match source.segmentation {
            Segmentation::Replicated => {
                let node = self
                    .topology
                    .first_up()
                    .ok_or_else(|| Error::Shutdown("no node up".into()))?;
                pull(collect_rows(&self.storage[node], &source.name, 0, None)?);
            }
            Segmentation::SegmentedBy(_) => {
                for s in 0..self.topology.segment_count() as u32 {
                    let (node, replica) = self
                        .topology
                        .readable_replica(s, source.buddy_offset)
                        .ok_or_else(|| {
                            Error::Shutdown(format!("segment {s} of {} unavailable", source.name))
                        })?;
                    pull(collect_rows(&self.storage[node], &source.name, replica, Some(s))?);
                }
            }
        }

        // Route inserts through the new projection, then replay tombstones
        // so historical queries agree with the source at every epoch.
        let mut report = RefreshReport::default();
        let shape = WriteShape::of(&proj, &table);
        let mut by_target: BTreeMap<(NodeId, u32), Vec<(RoutedRow, Epoch)>> = BTreeMap::new();
        let mut deletes: Vec<(NodeId, u32, Row, Epoch)> = Vec::new();
        for (full, insert_epoch, delete_epoch) in &records {
            for b in route_tuples(&self.topology, &proj, &table, std::slice::from_ref(full))? {
                if self.topology.states[b.node] == NodeState::Down {
                    continue;
                }
                for routed in b.rows {
                    if let Some(d) = delete_epoch {
                        deletes.push((b.node, b.replica, routed.2.clone(), *d));
                    }
                    by_target.entry((b.node, b.replica)).or_default().push((routed, *insert_epoch));
                }
            }
        }
        for ((node, replica), rows) in by_target {
            report.rows_copied += rows.len() as u64;
            let ns = &mut self.storage[node];
            for meta in ns.load_rows(&shape, replica, rows)? {
                ns.register(meta);
            }
        }
        for (node, replica, row, epoch) in deletes {
            report.deletes_copied += 1;
            Self::mark_deleted_by_value(&mut self.storage[node], &proj.name, replica, &row, epoch)?;
        }
        if let Some(p) = catalog.projections.get_mut(projection) {
            p.needs_refresh = false;
        }
        for node in 0..self.topology.node_count() {
            catalog.lge.insert((projection.to_string(), node), e_h);
        }
        Ok(report)
    }

    /// Changes the cluster size, handing whole local segments to their new
    /// owners without re-splitting rows. A no-change topology moves nothing.
    pub fn rebalance(
        &mut self,
        catalog: &mut DesignCatalog,
        new_nodes: usize,
    ) -> Result<RebalanceReport> {
        if new_nodes == 0 {
            return Err(Error::Cluster("cannot rebalance to zero nodes".into()));
        }
        if self.topology.k as usize + 1 > new_nodes {
            return Err(Error::Cluster(format!(
                "k-safety {} needs at least {} nodes",
                self.topology.k,
                self.topology.k as usize + 1
            )));
        }
        if self.topology.states.iter().any(|s| *s != NodeState::Up) {
            return Err(Error::Cluster("rebalance requires every node up".into()));
        }
        let old_n = self.topology.node_count();
        for n in old_n..new_nodes {
            self.storage.push(NodeStorage::open(&self.data_dir, n, self.ids.clone())?);
            self.topology.states.push(NodeState::Up);
        }

        // New ownership: keep surviving owners where possible, then balance
        // counts by draining overfull nodes into underfull ones, segments
        // from removed nodes first.
        let seg_count = self.topology.segment_count();
        let old_owner = self.topology.segment_owner.clone();
        let mut new_owner = old_owner.clone();
        let base = seg_count / new_nodes;
        let extra = seg_count % new_nodes;
        let target = |n: NodeId| base + usize::from(n < extra);
        let mut counts = vec![0usize; new_nodes];
        for &o in &new_owner {
            if o < new_nodes {
                counts[o] += 1;
            }
        }
        let mut pool: Vec<usize> = (0..seg_count)
            .filter(|&s| new_owner[s] >= new_nodes || counts[new_owner[s]] > target(new_owner[s]))
            .collect();
        pool.sort_by_key(|&s| (usize::from(new_owner[s] < new_nodes), s));
        for s in pool {
            let from = new_owner[s];
            if from < new_nodes && counts[from] <= target(from) {
                continue;
            }
            let Some(to) = (0..new_nodes).find(|&n| counts[n] < target(n)) else { break };
            if from < new_nodes {
                counts[from] -= 1;
            }
            counts[to] += 1;
            new_owner[s] = to;
        }

        // Move every (projection, segment, replica) whose node changed.
        // Replica placement depends on the node count, so even segments
        // that kept their owner can relocate buddies.
        let mut report = RebalanceReport::default();
        let projections: Vec<ProjectionDef> = catalog.projections.values().cloned().collect();
        let mut moved_segments = BTreeSet::new();
        for proj in &projections {
            let table = catalog.table(&proj.anchor_table)?.clone();
            let shape = WriteShape::of(proj, &table);
            if !proj.is_segmented() {
                // Replicated: new nodes need their own full copy.
                for node in old_n..new_nodes {
                    let plan = {
                        let src = self.source_for(proj, 0, node)?;
                        self.plan_copy(proj, src, None, 0, Epoch::MAX)?
                    };
                    let mut rep = RecoveryReport::default();
                    self.apply_copy(proj, &shape, (node, 0), plan, &mut rep)?;
                    report.rows_replicated += rep.rows_copied;
                }
                continue;
            }
            // Drain WOS first so sealed containers are the whole story.
            for node in 0..old_n {
                for replica in 0..=self.topology.k {
                    let ns = &mut self.storage[node];
                    if ns.wos.get(&(proj.name.clone(), replica)).is_some_and(|w| !w.is_empty()) {
                        if let Some(out) = crate::mover::moveout(ns, &shape, replica)? {
                            crate::mover::apply_moveout(ns, out)?;
                        }
                    }
                }
            }
            for s in 0..seg_count as u32 {
                for j in 0..=self.topology.k {
                    let from = (old_owner[s as usize] + (j * proj.buddy_offset) as usize) % old_n;
                    let to =
                        (new_owner[s as usize] + (j * proj.buddy_offset) as usize) % new_nodes;
                    if from == to {
                        continue;
                    }
                    let moves: Vec<ContainerMeta> = self.storage[from]
                        .containers_of(&proj.name, j)
                        .iter()
                        .filter(|c| c.meta.segment == s)
                        .map(|c| c.meta.clone())
                        .collect();
                    if moves.is_empty() {
                        continue;
                    }
                    moved_segments.insert((proj.name.clone(), s));
                    for meta in moves {
                        let entries = {
                            let src = &self.storage[from];
                            let dvs = src.deletes_for(meta.id)?;
                            let refs: Vec<&DeleteVector> = dvs.iter().collect();
                            deletion_map(&refs)
                        };
                        let src_root = self.storage[from].root.clone();
                        let dst = &mut self.storage[to];
                        let new = Self::copy_container_verbatim(dst, &src_root, &meta, j)?;
                        let new_id = new.id;
                        dst.register(new);
                        if !entries.is_empty() {
                            let dv = DeleteVector {
                                id: dst.alloc_id(),
                                target: DvTarget::Ros(new_id),
                                entries,
                            };
                            let dv_meta = write_dvros(&dst.root, &dst.root.join("tmp"), &dv)?;
                            dst.register_dv(dv_meta);
                        }
                        let src = &mut self.storage[from];
                        let dv_ids: Vec<u64> = src
                            .dvros
                            .values()
                            .filter(|d| d.meta.container == meta.id)
                            .map(|d| d.meta.id)
                            .collect();
                        for id in dv_ids {
                            src.retire_dv(id)?;
                        }
                        src.dvwos.retain(|dv| dv.target != DvTarget::Ros(meta.id));
                        src.retire(meta.id)?;
                        report.containers_moved += 1;
                    }
                }
            }
        }
        report.segments_moved = moved_segments.len();

        if new_nodes < old_n {
            self.storage.truncate(new_nodes);
            self.topology.states.truncate(new_nodes);
            catalog.lge.retain(|(_, node), _| *node < new_nodes);
        }
        self.topology.segment_owner = new_owner;
        let e = catalog.current_epoch;
        for proj in &projections {
            for node in old_n.min(new_nodes)..new_nodes {
                catalog.lge.insert((proj.name.clone(), node), e);
            }
        }
        Ok(report)
    }
}

/// One step of a fault-injection scenario, as read by the CLI's `simulate`.
#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioEvent {
    Load { rows: u64 },
    Commit,
    Kill { node: NodeId },
    Partition { groups: Vec<Vec<NodeId>> },
    Heal,
    Recover { node: NodeId },
    Query { sql: String },
}

/// Parses the scenario grammar: one event per line, `#` comments.
pub fn parse_scenario(text: &str) -> Result<Vec<ScenarioEvent>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            line: (lineno + 1) as u32,
            col: 1,
            msg: format!("{msg}: {line}"),
        };
        let (word, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let rest = rest.trim();
        let event = match word {
            "load" => {
                let n = rest
                    .strip_suffix("rows")
                    .unwrap_or(rest)
                    .trim()
                    .parse::<u64>()
                    .map_err(|_| bad("load expects a row count"))?;
                ScenarioEvent::Load { rows: n }
            }
            "commit" => ScenarioEvent::Commit,
            "kill" => ScenarioEvent::Kill {
                node: rest.parse().map_err(|_| bad("kill expects a node id"))?,
            },
            "recover" => ScenarioEvent::Recover {
                node: rest.parse().map_err(|_| bad("recover expects a node id"))?,
            },
            "heal" => ScenarioEvent::Heal,
            "partition" => {
                let mut groups = Vec::new();
                for part in rest.split('|') {
                    let mut group = Vec::new();
                    for id in part.split(',') {
                        let id = id.trim();
                        if id.is_empty() {
                            continue;
                        }
                        group.push(id.parse().map_err(|_| bad("bad node id in partition"))?);
                    }
                    if !group.is_empty() {
                        groups.push(group);
                    }
                }
                if groups.len() < 2 {
                    return Err(bad("partition expects at least two groups"));
                }
                ScenarioEvent::Partition { groups }
            }
            "query" => {
                if rest.is_empty() {
                    return Err(bad("query expects sql"));
                }
                ScenarioEvent::Query { sql: rest.to_string() }
            }
            _ => return Err(bad("unknown scenario event")),
        };
        out.push(event);
    }
    Ok(out)
}
