//! The base write-only ORAM engine.
//!
//! Each logical write seals the new page into the next holding slot, then
//! refreshes a fixed window of main slots by re-sealing each block's latest
//! copy into its home. Which slots are written depends only on the write
//! counter, never on the address being written.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use crate::cost::{Work, WriteStats};
use crate::sealer::{NonceCounter, SealKeys, Sealer};
use crate::{BackingStore, Error, ObliviousRam, OramConfig, PositionMap, Result};

/// Trusted-side metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OramState {
    /// Completed logical writes.
    pub p: u64,
    pub pos: PositionMap,
    pub nonces: NonceCounter,
}

impl OramState {
    pub fn new(cfg: &OramConfig) -> Self {
        Self {
            p: 0,
            pos: PositionMap::identity(cfg),
            nonces: NonceCounter::new(),
        }
    }
}

/// Fills every slot with a fresh seal of the zero page.
pub(crate) fn seal_zero_pages(
    cfg: &OramConfig,
    sealer: &Sealer,
    nonces: &mut NonceCounter,
    store: &BackingStore,
) -> Result<()> {
    if store.slot_count() != cfg.slot_count() || store.page_size() != cfg.page_size() {
        return Err(Error::Geometry(format!(
            "store has {} slots of {} bytes, geometry needs {} of {}",
            store.slot_count(),
            store.page_size(),
            cfg.slot_count(),
            cfg.page_size()
        )));
    }
    let zero = vec![0u8; cfg.page_size()];
    for slot in 0..cfg.slot_count() {
        store.write(slot, &sealer.seal(&zero, slot, nonces.next_nonce()?)?)?;
    }
    Ok(())
}

/// Marks `poisoned` when `result` carries an integrity failure.
pub(crate) fn poison_on_integrity<T>(poisoned: &mut bool, result: Result<T>) -> Result<T> {
    if matches!(result, Err(Error::Integrity { .. })) {
        *poisoned = true;
    }
    result
}

/// Blocks whose latest copy sits in the holding slot that round `p` is about
/// to overwrite, and that the round's refresh window will not rescue.
pub fn holding_conflicts(cfg: &OramConfig, pos: &PositionMap, p: u64) -> Vec<usize> {
    let slot = cfg.holding_slot(p);
    let range = cfg.refresh_range(p);
    pos.residents_of(slot).filter(|&a| !range.contains(a)).collect()
}

#[derive(Debug)]
pub struct WoramInstance {
    cfg: OramConfig,
    state: OramState,
    sealer: Sealer,
    store: Arc<BackingStore>,
    poisoned: bool,
    check_holding: bool,
}

impl WoramInstance {
    /// Fresh instance over an in-memory store.
    pub fn init(cfg: OramConfig, keys: SealKeys) -> Result<Self> {
        Self::with_store(cfg, keys, Arc::new(BackingStore::for_config(&cfg)))
    }

    /// Fresh instance over `store`, which is overwritten with sealed zero pages.
    pub fn with_store(cfg: OramConfig, keys: SealKeys, store: Arc<BackingStore>) -> Result<Self> {
        let sealer = Sealer::new(keys, cfg.page_size());
        let mut state = OramState::new(&cfg);
        seal_zero_pages(&cfg, &sealer, &mut state.nonces, &store)?;
        Ok(Self {
            cfg,
            state,
            sealer,
            store,
            poisoned: false,
            check_holding: false,
        })
    }

    /// Verifies before every write that no live block is about to lose its
    /// holding slot. Costs `O(N)` per write.
    pub fn with_holding_check(mut self, enabled: bool) -> Self {
        self.check_holding = enabled;
        self
    }

    pub fn state(&self) -> &OramState {
        &self.state
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    pub fn oram_write(&mut self, addr: usize, data: &[u8]) -> Result<WriteStats> {
        if self.poisoned {
            return Err(Error::Poisoned);
        }
        self.cfg.check_addr(addr)?;
        self.cfg.check_page(data)?;
        let result = self.write_inner(addr, data);
        poison_on_integrity(&mut self.poisoned, result)
    }

    fn write_inner(&mut self, addr: usize, data: &[u8]) -> Result<WriteStats> {
        let started = Instant::now();
        let p = self.state.p;
        if self.check_holding {
            let live = holding_conflicts(&self.cfg, &self.state.pos, p);
            if !live.is_empty() {
                return Err(Error::Domain(format!(
                    "round {p} would overwrite holding slot {} still holding blocks {live:?}",
                    self.cfg.holding_slot(p)
                )));
            }
        }

        let holding = self.cfg.holding_slot(p);
        let nonce = self.state.nonces.next_nonce()?;
        self.store.write(holding, &self.sealer.seal(data, holding, nonce)?)?;
        self.state.pos.set(addr, holding);

        let range = self.cfg.refresh_range(p);
        for i in range.iter() {
            let src = self.state.pos.get(i);
            let plain = self.sealer.unseal(&self.store.read(src)?, src)?;
            let nonce = self.state.nonces.next_nonce()?;
            self.store.write(i, &self.sealer.seal(&plain, i, nonce)?)?;
            self.state.pos.set(i, i);
        }
        self.state.p += 1;

        Ok(WriteStats {
            refresh_count: range.count,
            serial: Work::page_store() + Work::refresh(range.count as u64),
            wall_time: started.elapsed(),
            ..Default::default()
        })
    }

    pub fn oram_read(&mut self, addr: usize) -> Result<Vec<u8>> {
        if self.poisoned {
            return Err(Error::Poisoned);
        }
        self.cfg.check_addr(addr)?;
        let slot = self.state.pos.get(addr);
        let result = self
            .store
            .read(slot)
            .and_then(|sealed| self.sealer.unseal(&sealed, slot));
        poison_on_integrity(&mut self.poisoned, result)
    }
}

impl ObliviousRam for WoramInstance {
    fn config(&self) -> &OramConfig {
        &self.cfg
    }

    fn write(&mut self, addr: usize, data: &[u8]) -> Result<WriteStats> {
        self.oram_write(addr, data)
    }

    fn read(&mut self, addr: usize) -> Result<Vec<u8>> {
        self.oram_read(addr)
    }

    fn write_counter(&self) -> u64 {
        self.state.p
    }

    fn position_map(&self) -> &PositionMap {
        &self.state.pos
    }

    fn store(&self) -> &Arc<BackingStore> {
        &self.store
    }
}

/// Blocks whose ORAM contents disagree with a reference map.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub mismatches: Vec<usize>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Reads every block of `ram` and compares it with `shadow`; blocks missing
/// from `shadow` are expected to hold the zero page. Integrity failures are
/// returned as errors, not mismatches.
pub fn state_audit<R: ObliviousRam + ?Sized>(ram: &mut R, shadow: &HashMap<usize, Vec<u8>>) -> Result<AuditReport> {
    let zero = vec![0u8; ram.config().page_size()];
    let mut report = AuditReport::default();
    for addr in 0..ram.block_count() {
        let expected = shadow.get(&addr).unwrap_or(&zero);
        if &ram.read(addr)? != expected {
            report.mismatches.push(addr);
        }
    }
    Ok(report)
}
