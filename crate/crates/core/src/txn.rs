//! Epoch clock, snapshot resolution, table locks, and AHM bookkeeping.
//!
//! Logical time is a 64-bit epoch. A committing transaction that wrote data
//! stamps its rows with the current epoch and then advances the clock, so a
//! READ COMMITTED statement (snapshot = current - 1) started afterwards sees
//! it immediately. Reads at recent epochs take no locks at all; writers and
//! DDL use a seven-mode table lock manager. Deadlocks are detected on the
//! wait-for graph and resolved by aborting the youngest transaction in the
//! cycle.

use std::collections::{BTreeMap, BTreeSet};

use crate::catalog::Epoch;
use crate::error::{Error, Result};

pub type TxnId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Isolation {
    ReadCommitted,
    Serializable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LockMode {
    Shared,
    Insert,
    SharedInsert,
    Exclusive,
    TupleMover,
    Usage,
    Owner,
}

pub const LOCK_MODES: [LockMode; 7] = [
    LockMode::Shared,
    LockMode::Insert,
    LockMode::SharedInsert,
    LockMode::Exclusive,
    LockMode::TupleMover,
    LockMode::Usage,
    LockMode::Owner,
];

impl LockMode {
    fn idx(self) -> usize {
        match self {
            LockMode::Shared => 0,
            LockMode::Insert => 1,
            LockMode::SharedInsert => 2,
            LockMode::Exclusive => 3,
            LockMode::TupleMover => 4,
            LockMode::Usage => 5,
            LockMode::Owner => 6,
        }
    }

    pub fn name(self) -> &'static str {
        ["S", "I", "SI", "X", "T", "U", "O"][self.idx()]
    }
}

impl std::fmt::Display for LockMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

// Rows are the requested mode, columns the granted mode, in S I SI X T U O
// order. Note the table is authoritative over the prose description of T:
// T is also incompatible with O.
const COMPAT: [[bool; 7]; 7] = [
    [true, false, false, false, true, true, false],
    [false, true, false, false, true, true, false],
    [false, false, false, false, true, true, false],
    [false, false, false, false, false, true, false],
    [true, true, true, false, true, true, false],
    [true, true, true, true, true, true, false],
    [false, false, false, false, false, false, false],
];

// Rows are the requested mode, columns the held mode. The result is the
// mode the holder ends up with.
const CONVERT: [[usize; 7]; 7] = [
    [0, 2, 2, 3, 0, 0, 6],
    [2, 1, 2, 3, 1, 1, 6],
    [2, 2, 2, 3, 2, 2, 6],
    [3, 3, 3, 3, 3, 3, 6],
    [0, 1, 2, 3, 4, 4, 6],
    [0, 1, 2, 3, 4, 5, 6],
    [6, 6, 6, 6, 6, 6, 6],
];

pub fn lock_compatible(granted: LockMode, requested: LockMode) -> bool {
    COMPAT[requested.idx()][granted.idx()]
}

pub fn lock_convert(held: LockMode, requested: LockMode) -> LockMode {
    LOCK_MODES[CONVERT[requested.idx()][held.idx()]]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Acquired {
    Granted,
    Blocked,
}

#[derive(Debug, Default)]
struct TableLocks {
    holders: BTreeMap<TxnId, LockMode>,
    /// FIFO wait queue; an entry for a current holder is a pending
    /// conversion to the stored mode.
    queue: Vec<(TxnId, LockMode)>,
}

impl TableLocks {
    fn is_empty(&self) -> bool {
        self.holders.is_empty() && self.queue.is_empty()
    }

    /// The mode `txn` needs granted: a conversion target if it already
    /// holds something, else the raw request.
    fn target_mode(&self, txn: TxnId, mode: LockMode) -> LockMode {
        match self.holders.get(&txn) {
            Some(&held) => lock_convert(held, mode),
            None => mode,
        }
    }

    fn grantable(&self, txn: TxnId, target: LockMode, ahead: &[(TxnId, LockMode)]) -> bool {
        let vs_holders = self
            .holders
            .iter()
            .all(|(&h, &m)| h == txn || lock_compatible(m, target));
        // Conversions have priority over the queue; fresh requests must not
        // barge past incompatible waiters.
        let vs_queue = self.holders.contains_key(&txn)
            || ahead
                .iter()
                .all(|&(w, m)| w == txn || lock_compatible(m, target));
        vs_holders && vs_queue
    }
}

/// Cluster-global table lock manager.
#[derive(Debug, Default)]
pub struct LockManager {
    tables: BTreeMap<String, TableLocks>,
    /// Deadlock victims aborted on behalf of some other requester; their
    /// next operation observes the abort.
    poisoned: BTreeSet<TxnId>,
}

impl LockManager {
    pub fn new() -> LockManager {
        LockManager::default()
    }

    /// True when no transaction holds or awaits any lock. Pure readers never
    /// show up here.
    pub fn is_idle(&self) -> bool {
        self.tables.values().all(|t| t.is_empty())
    }

    pub fn held(&self, txn: TxnId, table: &str) -> Option<LockMode> {
        self.tables.get(table).and_then(|t| t.holders.get(&txn).copied())
    }

    pub fn is_poisoned(&self, txn: TxnId) -> bool {
        self.poisoned.contains(&txn)
    }

    /// Tries to take (or convert to) `mode` on `table`. Returns `Blocked`
    /// when queued; polling again later re-attempts the grant. A deadlock
    /// aborts the youngest transaction in the cycle: if that is the caller,
    /// this errors; otherwise the victim is released and poisoned and the
    /// caller's request is re-evaluated.
    pub fn acquire(&mut self, txn: TxnId, table: &str, mode: LockMode) -> Result<Acquired> {
        if self.poisoned.contains(&txn) {
            return Err(Error::Deadlock(txn));
        }
        let t = self.tables.entry(table.to_string()).or_default();
        let target = t.target_mode(txn, mode);
        if t.holders.get(&txn) == Some(&target) {
            t.queue.retain(|&(w, _)| w != txn);
            return Ok(Acquired::Granted);
        }
        let ahead: Vec<(TxnId, LockMode)> = t.queue.clone();
        if t.grantable(txn, target, &ahead) {
            t.queue.retain(|&(w, _)| w != txn);
            t.holders.insert(txn, target);
            return Ok(Acquired::Granted);
        }
        if !t.queue.iter().any(|&(w, _)| w == txn) {
            t.queue.push((txn, mode));
        } else if let Some(entry) = t.queue.iter_mut().find(|(w, _)| *w == txn) {
            entry.1 = mode;
        }

        if let Some(cycle) = self.find_cycle(txn) {
            let victim = *cycle.iter().max().unwrap();
            if victim == txn {
                self.release_all(txn);
                return Err(Error::Deadlock(txn));
            }
            self.poisoned.insert(victim);
            self.release_all(victim);
            // Retry now that the victim's locks are gone.
            return self.acquire(txn, table, mode);
        }
        Ok(Acquired::Blocked)
    }

    /// Releases everything `txn` holds or awaits and promotes waiters.
    pub fn release_all(&mut self, txn: TxnId) {
        for t in self.tables.values_mut() {
            t.holders.remove(&txn);
            t.queue.retain(|&(w, _)| w != txn);
            // Promote in FIFO order.
            let mut i = 0;
            while i < t.queue.len() {
                let (w, m) = t.queue[i];
                let target = t.target_mode(w, m);
                let ahead = t.queue[..i].to_vec();
                if t.grantable(w, target, &ahead) {
                    t.holders.insert(w, target);
                    t.queue.remove(i);
                } else {
                    i += 1;
                }
            }
        }
        self.tables.retain(|_, t| !t.is_empty());
    }

    /// Clears a deadlock-victim mark once the transaction is torn down.
    pub fn clear_poison(&mut self, txn: TxnId) {
        self.poisoned.remove(&txn);
    }

    /// Wait-for edges: each waiter depends on incompatible holders and on
    /// incompatible earlier waiters. Returns a cycle through `start` if one
    /// exists.
    fn find_cycle(&self, start: TxnId) -> Option<Vec<TxnId>> {
        let mut edges: BTreeMap<TxnId, BTreeSet<TxnId>> = BTreeMap::new();
        for t in self.tables.values() {
            for (i, &(w, m)) in t.queue.iter().enumerate() {
                let target = t.target_mode(w, m);
                let deps = edges.entry(w).or_default();
                for (&h, &hm) in &t.holders {
                    if h != w && !lock_compatible(hm, target) {
                        deps.insert(h);
                    }
                }
                for &(e, em) in &t.queue[..i] {
                    if e != w && !lock_compatible(em, target) {
                        deps.insert(e);
                    }
                }
            }
        }
        // DFS from `start` looking for a path back to `start`.
        let mut stack = vec![(start, vec![start])];
        let mut seen = BTreeSet::new();
        while let Some((node, path)) = stack.pop() {
            for &next in edges.get(&node).into_iter().flatten() {
                if next == start {
                    return Some(path);
                }
                if seen.insert(next) {
                    let mut p = path.clone();
                    p.push(next);
                    stack.push((next, p));
                }
            }
        }
        None
    }
}

#[derive(Debug, Clone)]
pub struct Txn {
    pub id: TxnId,
    pub isolation: Isolation,
    pub snapshot: Epoch,
    pub wrote: bool,
}

/// Policy for advancing the ancient history mark.
#[derive(Debug, Clone, Copy)]
pub struct AhmPolicy {
    /// Keep at least this many epochs of history behind the clock.
    pub lag: Epoch,
}

impl Default for AhmPolicy {
    fn default() -> Self {
        AhmPolicy { lag: 10 }
    }
}

/// Shared transaction service: epoch clock, snapshots, locks, AHM.
#[derive(Debug)]
pub struct TxnManager {
    pub locks: LockManager,
    next_id: TxnId,
    pub current_epoch: Epoch,
    pub ahm: Epoch,
    active: BTreeMap<TxnId, Txn>,
}

impl TxnManager {
    pub fn new(current_epoch: Epoch, ahm: Epoch) -> TxnManager {
        TxnManager {
            locks: LockManager::new(),
            next_id: 1,
            current_epoch: current_epoch.max(1),
            ahm,
            active: BTreeMap::new(),
        }
    }

    /// The epoch a fresh READ COMMITTED statement reads at.
    pub fn latest_epoch(&self) -> Epoch {
        self.current_epoch - 1
    }

    pub fn begin(&mut self, isolation: Isolation) -> TxnId {
        let id = self.next_id;
        self.next_id += 1;
        let snapshot = self.latest_epoch();
        self.active.insert(id, Txn { id, isolation, snapshot, wrote: false });
        id
    }

    pub fn txn(&self, id: TxnId) -> Result<&Txn> {
        self.active
            .get(&id)
            .ok_or_else(|| Error::Txn(format!("no active transaction {id}")))
    }

    pub fn is_active(&self, id: TxnId) -> bool {
        self.active.contains_key(&id)
    }

    /// Resolves the snapshot for a new statement: READ COMMITTED re-reads
    /// the clock; SERIALIZABLE keeps working at the latest epoch too, its
    /// stability coming from the S locks it holds.
    pub fn statement_snapshot(&mut self, id: TxnId) -> Result<Epoch> {
        if self.locks.is_poisoned(id) {
            return Err(Error::Deadlock(id));
        }
        let latest = self.latest_epoch();
        let txn = self
            .active
            .get_mut(&id)
            .ok_or_else(|| Error::Txn(format!("no active transaction {id}")))?;
        txn.snapshot = latest;
        Ok(txn.snapshot)
    }

    pub fn mark_write(&mut self, id: TxnId) -> Result<()> {
        self.active
            .get_mut(&id)
            .ok_or_else(|| Error::Txn(format!("no active transaction {id}")))?
            .wrote = true;
        Ok(())
    }

    pub fn acquire(&mut self, id: TxnId, table: &str, mode: LockMode) -> Result<Acquired> {
        if !self.active.contains_key(&id) {
            return Err(Error::Txn(format!("no active transaction {id}")));
        }
        self.locks.acquire(id, table, mode)
    }

    /// Commits: returns the epoch the transaction's data is stamped with
    /// (advancing the clock), or None for read-only commits.
    pub fn commit(&mut self, id: TxnId) -> Result<Option<Epoch>> {
        if self.locks.is_poisoned(id) {
            self.rollback(id)?;
            return Err(Error::Deadlock(id));
        }
        let txn = self
            .active
            .remove(&id)
            .ok_or_else(|| Error::Txn(format!("no active transaction {id}")))?;
        self.locks.release_all(id);
        if txn.wrote {
            let stamp = self.current_epoch;
            self.current_epoch += 1;
            Ok(Some(stamp))
        } else {
            Ok(None)
        }
    }

    pub fn rollback(&mut self, id: TxnId) -> Result<()> {
        self.active
            .remove(&id)
            .ok_or_else(|| Error::Txn(format!("no active transaction {id}")))?;
        self.locks.release_all(id);
        self.locks.clear_poison(id);
        Ok(())
    }

    /// Advances the AHM per policy, clamped to the minimum LGE and frozen
    /// while any node is down. Never moves backwards.
    pub fn advance_ahm(&mut self, policy: AhmPolicy, min_lge: Epoch, any_node_down: bool) -> Epoch {
        if !any_node_down {
            let target = self.latest_epoch().saturating_sub(policy.lag).min(min_lge);
            self.ahm = self.ahm.max(target);
        }
        self.ahm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent transcriptions of the two matrices, in S I SI X T U O
    // order with rows = requested, columns = granted/held.
    const COMPAT_ORACLE: [&str; 7] = [
        "Yes No  No  No  Yes Yes No",
        "No  Yes No  No  Yes Yes No",
        "No  No  No  No  Yes Yes No",
        "No  No  No  No  No  Yes No",
        "Yes Yes Yes No  Yes Yes No",
        "Yes Yes Yes Yes Yes Yes No",
        "No  No  No  No  No  No  No",
    ];
    const CONVERT_ORACLE: [&str; 7] = [
        "S  SI SI X S  S  O",
        "SI I  SI X I  I  O",
        "SI SI SI X SI SI O",
        "X  X  X  X X  X  O",
        "S  I  SI X T  T  O",
        "S  I  SI X T  U  O",
        "O  O  O  O O  O  O",
    ];

    fn mode_by_name(s: &str) -> LockMode {
        *LOCK_MODES.iter().find(|m| m.name() == s).unwrap()
    }

    #[test]
    fn compatibility_matches_all_49_cells() {
        for (ri, row) in COMPAT_ORACLE.iter().enumerate() {
            for (ci, cell) in row.split_whitespace().enumerate() {
                let requested = LOCK_MODES[ri];
                let granted = LOCK_MODES[ci];
                assert_eq!(
                    lock_compatible(granted, requested),
                    cell == "Yes",
                    "requested {requested} vs granted {granted}"
                );
            }
        }
    }

    #[test]
    fn conversion_matches_all_49_cells() {
        for (ri, row) in CONVERT_ORACLE.iter().enumerate() {
            for (ci, cell) in row.split_whitespace().enumerate() {
                let requested = LOCK_MODES[ri];
                let held = LOCK_MODES[ci];
                assert_eq!(
                    lock_convert(held, requested),
                    mode_by_name(cell),
                    "held {held} requesting {requested}"
                );
            }
        }
    }

    #[test]
    fn documented_examples() {
        use LockMode::*;
        assert!(lock_compatible(Insert, Insert));
        assert!(!lock_compatible(Exclusive, Shared));
        assert!(lock_compatible(Usage, Exclusive));
        assert_eq!(lock_convert(Shared, Insert), SharedInsert);
        assert_eq!(lock_convert(TupleMover, Exclusive), Exclusive);
        assert_eq!(lock_convert(Usage, TupleMover), TupleMover);
    }

    #[test]
    fn concurrent_loads_share_insert_lock() {
        let mut tm = TxnManager::new(1, 0);
        let a = tm.begin(Isolation::ReadCommitted);
        let b = tm.begin(Isolation::ReadCommitted);
        assert_eq!(tm.acquire(a, "t", LockMode::Insert).unwrap(), Acquired::Granted);
        assert_eq!(tm.acquire(b, "t", LockMode::Insert).unwrap(), Acquired::Granted);
        // Mover usage lock coexists with loads.
        let m = tm.begin(Isolation::ReadCommitted);
        assert_eq!(tm.acquire(m, "t", LockMode::Usage).unwrap(), Acquired::Granted);
    }

    #[test]
    fn second_delete_blocks_until_release() {
        let mut tm = TxnManager::new(1, 0);
        let a = tm.begin(Isolation::ReadCommitted);
        let b = tm.begin(Isolation::ReadCommitted);
        assert_eq!(tm.acquire(a, "t", LockMode::Exclusive).unwrap(), Acquired::Granted);
        assert_eq!(tm.acquire(b, "t", LockMode::Exclusive).unwrap(), Acquired::Blocked);
        tm.mark_write(a).unwrap();
        tm.commit(a).unwrap();
        assert_eq!(tm.acquire(b, "t", LockMode::Exclusive).unwrap(), Acquired::Granted);
    }

    #[test]
    fn fifo_no_barging() {
        let mut tm = TxnManager::new(1, 0);
        let a = tm.begin(Isolation::ReadCommitted);
        let b = tm.begin(Isolation::ReadCommitted);
        let c = tm.begin(Isolation::ReadCommitted);
        assert_eq!(tm.acquire(a, "t", LockMode::Exclusive).unwrap(), Acquired::Granted);
        assert_eq!(tm.acquire(b, "t", LockMode::Exclusive).unwrap(), Acquired::Blocked);
        // c's S is compatible with nothing ahead of it being granted; it
        // must queue behind b's X rather than barge.
        assert_eq!(tm.acquire(c, "t", LockMode::Shared).unwrap(), Acquired::Blocked);
        tm.rollback(a).unwrap();
        // b was promoted on release.
        assert_eq!(tm.acquire(b, "t", LockMode::Exclusive).unwrap(), Acquired::Granted);
    }

    #[test]
    fn upgrade_deadlock_aborts_youngest() {
        let mut tm = TxnManager::new(1, 0);
        let old = tm.begin(Isolation::ReadCommitted);
        let young = tm.begin(Isolation::ReadCommitted);
        assert_eq!(tm.acquire(old, "t", LockMode::Shared).unwrap(), Acquired::Granted);
        assert_eq!(tm.acquire(young, "t", LockMode::Shared).unwrap(), Acquired::Granted);
        // Both try to convert S -> X.
        assert_eq!(tm.acquire(old, "t", LockMode::Exclusive).unwrap(), Acquired::Blocked);
        let err = tm.acquire(young, "t", LockMode::Exclusive).unwrap_err();
        match err {
            Error::Deadlock(victim) => assert_eq!(victim, young),
            other => panic!("expected deadlock, got {other}"),
        }
        // Young's locks are gone; old's conversion proceeds on next poll.
        assert_eq!(tm.acquire(old, "t", LockMode::Exclusive).unwrap(), Acquired::Granted);
    }

    #[test]
    fn cross_table_deadlock_poisons_younger_holder() {
        let mut tm = TxnManager::new(1, 0);
        let old = tm.begin(Isolation::ReadCommitted);
        let young = tm.begin(Isolation::ReadCommitted);
        assert_eq!(tm.acquire(old, "a", LockMode::Exclusive).unwrap(), Acquired::Granted);
        assert_eq!(tm.acquire(young, "b", LockMode::Exclusive).unwrap(), Acquired::Granted);
        assert_eq!(tm.acquire(young, "a", LockMode::Exclusive).unwrap(), Acquired::Blocked);
        // old -> b completes the cycle; young (larger id) is the victim,
        // poisoned and released, so old gets b immediately.
        assert_eq!(tm.acquire(old, "b", LockMode::Exclusive).unwrap(), Acquired::Granted);
        assert!(tm.locks.is_poisoned(young));
        let err = tm.commit(young).unwrap_err();
        assert!(matches!(err, Error::Deadlock(v) if v == young));
        // Rollback inside the failed commit cleaned up.
        assert!(!tm.is_active(young));
    }

    #[test]
    fn epoch_advances_only_on_writing_commit() {
        let mut tm = TxnManager::new(1, 0);
        let r = tm.begin(Isolation::ReadCommitted);
        assert_eq!(tm.commit(r).unwrap(), None);
        assert_eq!(tm.current_epoch, 1);

        let w = tm.begin(Isolation::ReadCommitted);
        tm.mark_write(w).unwrap();
        let stamp = tm.commit(w).unwrap();
        assert_eq!(stamp, Some(1));
        assert_eq!(tm.current_epoch, 2);
        // A statement starting now reads at the stamped epoch: the write is
        // immediately visible.
        let r2 = tm.begin(Isolation::ReadCommitted);
        assert_eq!(tm.statement_snapshot(r2).unwrap(), 1);
    }

    #[test]
    fn read_committed_snapshot_refreshes_per_statement() {
        let mut tm = TxnManager::new(1, 0);
        let reader = tm.begin(Isolation::ReadCommitted);
        assert_eq!(tm.statement_snapshot(reader).unwrap(), 0);
        let w = tm.begin(Isolation::ReadCommitted);
        tm.mark_write(w).unwrap();
        tm.commit(w).unwrap();
        assert_eq!(tm.statement_snapshot(reader).unwrap(), 1);
    }

    #[test]
    fn pure_readers_leave_lock_table_empty() {
        let mut tm = TxnManager::new(5, 0);
        let r = tm.begin(Isolation::ReadCommitted);
        tm.statement_snapshot(r).unwrap();
        assert!(tm.locks.is_idle());
        tm.commit(r).unwrap();
    }

    #[test]
    fn ahm_policy_arithmetic() {
        let mut tm = TxnManager::new(50, 0);
        // lag 10, clamped by LGE.
        assert_eq!(tm.advance_ahm(AhmPolicy { lag: 10 }, 45, false), 39);
        assert_eq!(tm.advance_ahm(AhmPolicy { lag: 10 }, 20, false), 39); // monotone
        tm.current_epoch = 100;
        // Frozen while a node is down.
        assert_eq!(tm.advance_ahm(AhmPolicy { lag: 10 }, 99, true), 39);
        assert_eq!(tm.advance_ahm(AhmPolicy { lag: 10 }, 80, false), 80);
    }

    #[test]
    fn fresh_database_ahm_zero() {
        let tm = TxnManager::new(1, 0);
        assert_eq!(tm.ahm, 0);
    }

    #[test]
    fn rollback_releases_locks() {
        let mut tm = TxnManager::new(1, 0);
        let a = tm.begin(Isolation::ReadCommitted);
        tm.acquire(a, "t", LockMode::Owner).unwrap();
        assert!(!tm.locks.is_idle());
        tm.rollback(a).unwrap();
        assert!(tm.locks.is_idle());
        assert!(tm.commit(a).is_err());
    }
}
