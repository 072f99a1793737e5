//! Geometry of the main/holding layout.
//!
//! Slots `[0, N)` form the main area, where logical block `a` has its home at
//! slot `a`. Slots `[N, N + M)` form the holding area, which receives every
//! fresh write in round-robin order. The ratio `K = N / M` is kept as an exact
//! rational; every floor in the refresh window is evaluated as `p * N / M` in
//! integer arithmetic.

use std::collections::BTreeSet;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::sealer::{MAC_LEN, NONCE_LEN};
use crate::{Error, Result};

/// Validated ORAM geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OramConfig {
    main_count: usize,
    holding_count: usize,
    page_size: usize,
}

impl OramConfig {
    pub fn new(main_count: usize, holding_count: usize, page_size: usize) -> Result<Self> {
        if holding_count == 0 {
            return Err(Error::Geometry("holding area must have at least one slot".into()));
        }
        if main_count < holding_count {
            return Err(Error::Geometry(format!(
                "main area ({main_count}) smaller than holding area ({holding_count})"
            )));
        }
        if page_size < 16 || !page_size.is_multiple_of(16) {
            return Err(Error::Geometry(format!(
                "page size {page_size} must be a positive multiple of 16"
            )));
        }
        Ok(Self {
            main_count,
            holding_count,
            page_size,
        })
    }

    /// Smallest geometry with integer ratio `k` whose main area holds at least
    /// `pages` blocks.
    pub fn for_ratio(k: usize, pages: usize, page_size: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Geometry("ratio must be at least 1".into()));
        }
        let holding = pages.max(1).div_ceil(k);
        Self::new(holding * k, holding, page_size)
    }

    /// `N`, the number of main-area slots (and logical blocks).
    pub fn main_count(&self) -> usize {
        self.main_count
    }

    /// `M`, the number of holding-area slots.
    pub fn holding_count(&self) -> usize {
        self.holding_count
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    /// Total number of physical slots, `N + M`.
    pub fn slot_count(&self) -> usize {
        self.main_count + self.holding_count
    }

    /// Serialized size of one sealed slot.
    pub fn slot_size(&self) -> usize {
        NONCE_LEN + self.page_size + MAC_LEN
    }

    /// The exact ratio `K = N / M`, reduced.
    pub fn ratio(&self) -> Ratio<u64> {
        Ratio::new(self.main_count as u64, self.holding_count as u64)
    }

    /// `ceil(K)`: the most main slots a single write can refresh.
    pub fn max_refresh_count(&self) -> usize {
        self.main_count.div_ceil(self.holding_count)
    }

    /// `floor(p * K)` without rounding error.
    fn scaled_floor(&self, p: u64) -> u128 {
        p as u128 * self.main_count as u128 / self.holding_count as u128
    }

    /// Holding slot written by the `p`-th write: `N + (p mod M)`.
    pub fn holding_slot(&self, p: u64) -> usize {
        self.main_count + (p % self.holding_count as u64) as usize
    }

    /// Main-area window refreshed by the `p`-th write.
    pub fn refresh_range(&self, p: u64) -> RefreshRange {
        let lo = self.scaled_floor(p);
        let hi = self.scaled_floor(p + 1);
        RefreshRange {
            start: (lo % self.main_count as u128) as usize,
            count: (hi - lo) as usize,
            modulus: self.main_count,
        }
    }

    /// Physical slots written by the `p`-th write, in canonical order:
    /// the holding slot first, then the refresh window ascending mod `N`.
    pub fn expected_writes(&self, p: u64) -> Vec<usize> {
        let range = self.refresh_range(p);
        let mut out = Vec::with_capacity(range.count + 1);
        out.push(self.holding_slot(p));
        out.extend(range.iter());
        out
    }

    /// The same slots as [`expected_writes`](Self::expected_writes), as a set.
    pub fn expected_write_set(&self, p: u64) -> BTreeSet<usize> {
        self.expected_writes(p).into_iter().collect()
    }

    pub(crate) fn check_addr(&self, addr: usize) -> Result<()> {
        if addr >= self.main_count {
            return Err(Error::AddressOutOfRange {
                addr,
                capacity: self.main_count,
            });
        }
        Ok(())
    }

    pub(crate) fn check_page(&self, data: &[u8]) -> Result<()> {
        if data.len() != self.page_size {
            return Err(Error::Seal {
                expected: self.page_size,
                got: data.len(),
            });
        }
        Ok(())
    }
}

/// A run of `count` consecutive main indices starting at `start`, wrapping
/// modulo `N`.
///
/// Iterating `[s, e)` literally is wrong when the window ends exactly at `N`
/// (then `e = 0`), so the window is carried as a start and a length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefreshRange {
    pub start: usize,
    pub count: usize,
    modulus: usize,
}

impl RefreshRange {
    /// Main index handled by refresh iteration `ordinal`.
    pub fn index(&self, ordinal: usize) -> usize {
        debug_assert!(ordinal < self.count);
        (self.start + ordinal) % self.modulus
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.count).map(move |q| self.index(q))
    }

    pub fn contains(&self, index: usize) -> bool {
        index < self.modulus && (index + self.modulus - self.start) % self.modulus < self.count
    }
}

/// Trusted-side map from logical block to the slot holding its latest copy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionMap {
    entries: Vec<usize>,
    main_count: usize,
    slot_count: usize,
}

impl PositionMap {
    /// Identity map: every block lives at its home slot.
    pub fn identity(cfg: &OramConfig) -> Self {
        Self {
            entries: (0..cfg.main_count()).collect(),
            main_count: cfg.main_count(),
            slot_count: cfg.slot_count(),
        }
    }

    pub fn get(&self, addr: usize) -> usize {
        self.entries[addr]
    }

    /// Points `addr` at `slot`, which must be its home or a holding slot.
    pub fn set(&mut self, addr: usize, slot: usize) {
        assert!(
            slot == addr || (self.main_count..self.slot_count).contains(&slot),
            "block {addr} cannot live at slot {slot}"
        );
        self.entries[addr] = slot;
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Blocks whose latest copy currently lives at `slot`.
    pub fn residents_of(&self, slot: usize) -> impl Iterator<Item = usize> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, &s)| s == slot)
            .map(|(a, _)| a)
    }
}
