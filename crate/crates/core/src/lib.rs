//! Deterministic, stash-free write-only ORAM for oblivious demand paging.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`] holds the pure arithmetic of the construction: the main and
//!   holding areas, the per-write refresh window and the position map.
//! * [`sealer`] encrypts pages with ChaCha20 and authenticates them with
//!   HMAC-SHA256, binding every ciphertext to the slot it lives in.
//! * [`store`] is the untrusted backing store, with a full access trace and
//!   snapshot/diff support.
//! * [`engine`], [`eager`] and [`parallel`] are the three ORAM engines.
//! * [`pager`] drives the engines from a FIFO demand-paging simulator, and
//!   [`adversary`] renders obliviousness verdicts from what a malicious OS
//!   could see.
//! * [`cost`] and [`methodology`] support the benchmark harness: a
//!   deterministic virtual cost clock and the closed-form time projections.

pub mod adversary;
pub mod cost;
pub mod eager;
pub mod engine;
mod error;
pub mod geometry;
pub mod methodology;
pub mod pager;
pub mod par;
pub mod parallel;
pub mod sealer;
pub mod store;

pub use error::{Error, Result};
pub use geometry::{OramConfig, PositionMap, RefreshRange};
pub use sealer::{SealKeys, SealedSlot};
pub use store::BackingStore;

/// Anything that behaves as a logical block device of `block_count()` pages.
///
/// All three ORAM engines implement it, which lets the pager and the audit
/// harness treat them interchangeably.
pub trait ObliviousRam {
    fn config(&self) -> &OramConfig;

    fn block_count(&self) -> usize {
        self.config().main_count()
    }

    fn write(&mut self, addr: usize, data: &[u8]) -> Result<cost::WriteStats>;

    fn read(&mut self, addr: usize) -> Result<Vec<u8>>;

    /// Number of logical writes completed so far.
    fn write_counter(&self) -> u64;

    fn position_map(&self) -> &PositionMap;

    fn store(&self) -> &std::sync::Arc<BackingStore>;
}
