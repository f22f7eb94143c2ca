//! Write-optimized store: per-projection in-memory row buffers.
//!
//! Rows live here unencoded and unsorted, tagged with their commit epoch and
//! precomputed partition key and segment, until the tuple mover drains them
//! into ROS. Positions are the insertion ordinals; a moveout swaps in a
//! fresh buffer, so WOS positions are only meaningful between moveouts.
//! Contents are lost on a crash; recovery replays from a buddy instead.

use crate::catalog::Epoch;
use crate::storage::RoutedRow;
use crate::value::{row_size, Row};

#[derive(Debug, Clone)]
pub struct WosRow {
    pub epoch: Epoch,
    pub partition_key: crate::value::Value,
    pub segment: u32,
    pub row: Row,
}

#[derive(Debug)]
pub struct WosBuffer {
    pub rows: Vec<WosRow>,
    pub bytes: usize,
    pub budget: usize,
    /// Epoch of the first insert since the last moveout; drives moveout
    /// urgency ordering.
    pub oldest_epoch: Option<Epoch>,
}

impl WosBuffer {
    pub fn new(budget: usize) -> Self {
        WosBuffer { rows: Vec::new(), bytes: 0, budget, oldest_epoch: None }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    /// Accepts rows until the byte budget is hit; returns how many were
    /// taken. The caller seals the remainder directly to ROS.
    pub fn insert(&mut self, rows: &[RoutedRow], epoch: Epoch) -> usize {
        let mut taken = 0;
        for (partition_key, segment, row) in rows {
            if self.bytes >= self.budget && !self.rows.is_empty() {
                break;
            }
            self.bytes += row_size(row);
            self.oldest_epoch.get_or_insert(epoch);
            self.rows.push(WosRow {
                epoch,
                partition_key: partition_key.clone(),
                segment: *segment,
                row: row.clone(),
            });
            taken += 1;
        }
        taken
    }

    /// Removes and returns everything, resetting positions.
    pub fn drain(&mut self) -> Vec<WosRow> {
        self.bytes = 0;
        self.oldest_epoch = None;
        std::mem::take(&mut self.rows)
    }
}
