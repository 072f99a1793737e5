//! Work accounting and the deterministic virtual cost clock.
//!
//! Engines report the work a write performed as [`Work`] tallies split by
//! where it ran: on the caller's thread, on parallel workers, or on a
//! background actor. A [`CostModel`] turns those tallies into virtual time, so
//! benchmark assertions do not depend on the machine.

use std::ops::{Add, AddAssign};
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Counts of the three operations that dominate a page write.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Work {
    pub slot_reads: u64,
    pub slot_writes: u64,
    /// Seals plus unseals, one per page.
    pub crypto_ops: u64,
}

impl Work {
    pub const ZERO: Work = Work {
        slot_reads: 0,
        slot_writes: 0,
        crypto_ops: 0,
    };

    pub const fn new(slot_reads: u64, slot_writes: u64, crypto_ops: u64) -> Self {
        Self {
            slot_reads,
            slot_writes,
            crypto_ops,
        }
    }

    /// Fetching one page: a slot read and an unseal.
    pub const fn page_load() -> Self {
        Self::new(1, 0, 1)
    }

    /// Sealing one page and writing it out.
    pub const fn page_store() -> Self {
        Self::new(0, 1, 1)
    }

    /// `n` refresh iterations: read, unseal, reseal, write.
    pub const fn refresh(n: u64) -> Self {
        Self::new(n, n, 2 * n)
    }

    pub fn cost(&self, model: &CostModel) -> f64 {
        (self.slot_reads + self.slot_writes) as f64 * model.slot_io + self.crypto_ops as f64 * model.crypto
    }
}

impl Add for Work {
    type Output = Work;

    fn add(self, rhs: Work) -> Work {
        Work::new(
            self.slot_reads + rhs.slot_reads,
            self.slot_writes + rhs.slot_writes,
            self.crypto_ops + rhs.crypto_ops,
        )
    }
}

impl AddAssign for Work {
    fn add_assign(&mut self, rhs: Work) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for Work {
    fn sum<I: Iterator<Item = Work>>(iter: I) -> Work {
        iter.fold(Work::ZERO, Add::add)
    }
}

/// Virtual cost of each unit of work.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    /// One slot read or write.
    pub slot_io: f64,
    /// One page seal or unseal.
    pub crypto: f64,
    /// Creating one worker thread.
    pub thread_spawn: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            slot_io: 1.0,
            crypto: 1.0,
            thread_spawn: 0.0,
        }
    }
}

/// What one logical write cost, and where.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WriteStats {
    /// Main slots refreshed by this write.
    pub refresh_count: usize,
    /// Work on the caller's thread.
    pub serial: Work,
    /// Work of each concurrently running worker. Empty for serial engines.
    pub workers: Vec<Work>,
    /// Work handed to a background actor, off the caller's critical path.
    pub background: Work,
    pub threads_spawned: usize,
    /// Wall time spent creating worker threads.
    pub spawn_time: Duration,
    /// Wall time the caller spent inside the write.
    pub wall_time: Duration,
    /// Wall time the caller spent blocked on a background actor.
    pub blocked_time: Duration,
}

impl WriteStats {
    /// All work performed, wherever it ran.
    pub fn total(&self) -> Work {
        self.serial + self.workers.iter().copied().sum::<Work>() + self.background
    }

    /// Virtual time the caller waits for, excluding background work.
    pub fn critical_path(&self, model: &CostModel) -> f64 {
        let slowest = self.workers.iter().map(|w| w.cost(model)).fold(0.0, f64::max);
        self.serial.cost(model) + slowest + self.threads_spawned as f64 * model.thread_spawn
    }
}
