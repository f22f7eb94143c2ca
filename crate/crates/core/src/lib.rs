//! Embedded columnar analytic database engine.
//!
//! Data is stored in sorted, compressed *projections*: per-column files grouped
//! into immutable ROS containers, fronted by a small in-memory WOS for trickle
//! loads. A background tuple mover migrates WOS data to ROS and merges small
//! containers into larger ones. Visibility is epoch-based MVCC with delete
//! vectors; deletes never rewrite data files in place.
//!
//! The engine runs a whole multi-node cluster inside one process: nodes are
//! directories, the network is a deterministic in-memory message layer with
//! scripted fault injection, and segmentation/buddy placement work exactly as
//! they would across real machines. This makes distribution, quorum commit,
//! node failure, recovery, and rebalance fully testable with seeded RNG.

pub mod catalog;
pub mod cluster;
pub mod encoding;
pub mod engine;
pub mod error;
pub mod exec;
pub mod expr;
pub mod mover;
pub mod planner;
pub mod sql;
pub mod storage;
pub mod txn;
pub mod util;
pub mod value;

pub use engine::{Database, DbConfig, ExecOptions, StatementResult};
pub use error::{Error, Result};
pub use value::{DataType, Value};
