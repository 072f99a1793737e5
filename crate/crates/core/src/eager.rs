//! Eager preloading.
//!
//! The slots a write will touch depend only on the write counter, so the next
//! round's refresh work can be done before the write arrives. A background
//! worker reads and re-seals the round's refresh targets into a
//! [`PreloadBuffer`]; the write then only seals its own page into the buffer
//! and hands it back to the worker, which flushes the buffer to the store in
//! the same slot order as the base engine and starts preloading the next
//! round.
//!
//! Buffer lifecycle: `Empty -> Loading -> Ready -> Unloading -> Empty`. A
//! write that arrives while the buffer is `Loading` or `Unloading` blocks
//! until it is `Ready`. Reads never block: slots written by the latest round
//! are served from a retained copy of that round, everything else from the
//! store, so the read traffic does not depend on how far the flush has got.

use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cost::{Work, WriteStats};
use crate::engine::{poison_on_integrity, seal_zero_pages, OramState};
use crate::sealer::{Nonce, NonceCounter, SealKeys, SealedSlot, Sealer};
use crate::{BackingStore, Error, ObliviousRam, OramConfig, PositionMap, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Lifecycle {
    Empty,
    Loading,
    Ready,
    Unloading,
}

/// One main slot to refresh: re-seal the copy at `source` for `slot`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefreshTarget {
    pub slot: usize,
    pub source: usize,
    pub nonce: Nonce,
}

/// Everything the background worker needs to preload one round, captured on
/// the foreground so the worker never touches the position map or the nonce
/// counter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreloadJob {
    pub round: u64,
    pub holding_slot: usize,
    pub targets: Vec<RefreshTarget>,
    pub placeholder_nonce: Nonce,
}

impl PreloadJob {
    pub fn plan(cfg: &OramConfig, pos: &PositionMap, round: u64, nonces: &mut NonceCounter) -> Result<Self> {
        let targets = cfg
            .refresh_range(round)
            .iter()
            .map(|slot| {
                Ok(RefreshTarget {
                    slot,
                    source: pos.get(slot),
                    nonce: nonces.next_nonce()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            round,
            holding_slot: cfg.holding_slot(round),
            targets,
            placeholder_nonce: nonces.next_nonce()?,
        })
    }

    /// Background work of preloading this job.
    pub fn work(&self) -> Work {
        let n = self.targets.len() as u64;
        Work::new(n, 0, 2 * n + 1)
    }
}

/// Trusted staging area for one round: a holding entry plus the round's
/// refreshed main entries.
#[derive(Debug, Clone)]
pub struct PreloadBuffer {
    round: u64,
    holding_slot: usize,
    holding_entry: Option<SealedSlot>,
    main_entries: Vec<(usize, SealedSlot)>,
    lifecycle: Lifecycle,
    staged: bool,
    capacity: usize,
    transitions: u64,
}

impl PreloadBuffer {
    /// Empty buffer sized for `ceil(K) + 1` pages.
    pub fn new(cfg: &OramConfig) -> Self {
        Self {
            round: 0,
            holding_slot: cfg.holding_slot(0),
            holding_entry: None,
            main_entries: Vec::new(),
            lifecycle: Lifecycle::Empty,
            staged: false,
            capacity: cfg.max_refresh_count() + 1,
            transitions: 0,
        }
    }

    pub fn lifecycle(&self) -> Lifecycle {
        self.lifecycle
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn transitions(&self) -> u64 {
        self.transitions
    }

    pub fn holding_slot(&self) -> usize {
        self.holding_slot
    }

    pub fn holding_entry(&self) -> Option<&SealedSlot> {
        self.holding_entry.as_ref()
    }

    pub fn main_entries(&self) -> &[(usize, SealedSlot)] {
        &self.main_entries
    }

    fn transition(&mut self, from: Lifecycle, to: Lifecycle) -> Result<()> {
        if self.lifecycle != from {
            return Err(Error::Lifecycle(format!(
                "cannot move to {to:?} from {:?} (expected {from:?})",
                self.lifecycle
            )));
        }
        self.lifecycle = to;
        self.transitions += 1;
        Ok(())
    }

    pub fn begin_load(&mut self, job: &PreloadJob) -> Result<()> {
        self.transition(Lifecycle::Empty, Lifecycle::Loading)?;
        self.round = job.round;
        self.holding_slot = job.holding_slot;
        Ok(())
    }

    pub fn finish_load(&mut self, main_entries: Vec<(usize, SealedSlot)>, placeholder: SealedSlot) -> Result<()> {
        if main_entries.len() + 1 > self.capacity {
            return Err(Error::Lifecycle(format!(
                "{} pages exceed buffer capacity {}",
                main_entries.len() + 1,
                self.capacity
            )));
        }
        self.transition(Lifecycle::Loading, Lifecycle::Ready)?;
        self.main_entries = main_entries;
        self.holding_entry = Some(placeholder);
        self.staged = false;
        Ok(())
    }

    /// Places the round's write: always into the holding entry, and into the
    /// main entry for `main.0` when that block is refreshed this round.
    pub fn stage_write(&mut self, holding: SealedSlot, main: Option<(usize, SealedSlot)>) -> Result<()> {
        if self.lifecycle != Lifecycle::Ready {
            return Err(Error::Lifecycle(format!(
                "write staged while buffer is {:?}",
                self.lifecycle
            )));
        }
        if let Some((slot, sealed)) = main {
            let entry = self
                .main_entries
                .iter_mut()
                .find(|(s, _)| *s == slot)
                .ok_or_else(|| Error::Lifecycle(format!("slot {slot} is not refreshed this round")))?;
            entry.1 = sealed;
        }
        self.holding_entry = Some(holding);
        self.staged = true;
        Ok(())
    }

    pub fn begin_unload(&mut self) -> Result<()> {
        if self.lifecycle == Lifecycle::Ready && !self.staged {
            return Err(Error::Lifecycle("unload requested before a write was staged".into()));
        }
        self.transition(Lifecycle::Ready, Lifecycle::Unloading)
    }

    /// Slots to flush, holding entry first, then main entries in refresh order.
    pub fn unload_plan(&self) -> Result<Vec<(usize, SealedSlot)>> {
        if self.lifecycle != Lifecycle::Unloading {
            return Err(Error::Lifecycle(format!("unload while buffer is {:?}", self.lifecycle)));
        }
        let holding = self.holding_entry.clone().expect("staged buffer has a holding entry");
        Ok(std::iter::once((self.holding_slot, holding))
            .chain(self.main_entries.iter().cloned())
            .collect())
    }

    pub fn finish_unload(&mut self) -> Result<()> {
        self.transition(Lifecycle::Unloading, Lifecycle::Empty)?;
        self.holding_entry = None;
        self.main_entries.clear();
        self.staged = false;
        Ok(())
    }

    /// The buffered copy destined for `slot`, if the buffer holds one.
    pub fn entry_for(&self, slot: usize) -> Option<&SealedSlot> {
        if slot == self.holding_slot {
            return self.holding_entry.as_ref();
        }
        self.main_entries
            .iter()
            .find(|(s, _)| *s == slot)
            .map(|(_, sealed)| sealed)
    }
}

/// Reads and re-seals every target of `job`. Also seals the zero-page
/// placeholder for the holding entry.
pub fn refresh_entries(
    job: &PreloadJob,
    store: &BackingStore,
    sealer: &Sealer,
) -> Result<(Vec<(usize, SealedSlot)>, SealedSlot)> {
    let entries = job
        .targets
        .iter()
        .map(|t| {
            let plain = sealer.unseal(&store.read(t.source)?, t.source)?;
            Ok((t.slot, sealer.seal(&plain, t.slot, t.nonce)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let zero = vec![0u8; sealer.page_size()];
    let placeholder = sealer.seal(&zero, job.holding_slot, job.placeholder_nonce)?;
    Ok((entries, placeholder))
}

/// Fills an empty buffer with the refreshed pages of `job`.
pub fn preload(buffer: &mut PreloadBuffer, job: &PreloadJob, store: &BackingStore, sealer: &Sealer) -> Result<()> {
    buffer.begin_load(job)?;
    let (entries, placeholder) = refresh_entries(job, store, sealer)?;
    buffer.finish_load(entries, placeholder)
}

/// Flushes an unloading buffer to the store and empties it.
pub fn unload(buffer: &mut PreloadBuffer, store: &BackingStore) -> Result<()> {
    for (slot, sealed) in buffer.unload_plan()? {
        store.write(slot, &sealed)?;
    }
    buffer.finish_unload()
}

/// Where preload and unload run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EagerMode {
    /// On a dedicated background thread.
    #[default]
    Background,
    /// Synchronously on the caller's thread, at the same lifecycle points.
    Inline,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EagerOptions {
    pub mode: EagerMode,
    /// Hold the worker in `Loading` until [`EagerInstance::resume_background`].
    pub start_paused: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LifecycleStats {
    pub transitions: u64,
    /// Foreground mutations attempted while the buffer was not `Ready`.
    pub violations: u64,
}

#[derive(Debug)]
struct Task {
    unload: bool,
    preload: PreloadJob,
}

#[derive(Debug, Clone)]
struct Failure {
    integrity_slot: Option<usize>,
    message: String,
}

impl Failure {
    fn from_error(e: &Error) -> Self {
        Self {
            integrity_slot: match e {
                Error::Integrity { slot } => Some(*slot),
                _ => None,
            },
            message: e.to_string(),
        }
    }

    fn to_error(&self) -> Error {
        match self.integrity_slot {
            Some(slot) => Error::Integrity { slot },
            None => Error::Worker(self.message.clone()),
        }
    }
}

#[derive(Debug)]
struct Shared {
    buffer: PreloadBuffer,
    task: Option<Task>,
    failure: Option<Failure>,
    paused: bool,
    shutdown: bool,
    violations: u64,
    /// Slots written by the latest round, kept until the next round is
    /// staged so reads of them never depend on unload progress.
    last_round: Vec<(usize, SealedSlot)>,
}

#[derive(Debug)]
struct Inner {
    shared: Mutex<Shared>,
    changed: Condvar,
    store: Arc<BackingStore>,
    sealer: Sealer,
}

impl Inner {
    fn lock(&self) -> MutexGuard<'_, Shared> {
        self.shared.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn run_task(&self, task: Task) -> Result<()> {
        if task.unload {
            let plan = self.lock().buffer.unload_plan()?;
            for (slot, sealed) in plan {
                self.store.write(slot, &sealed)?;
            }
        }
        {
            let mut shared = self.lock();
            if task.unload {
                shared.buffer.finish_unload()?;
            }
            shared.buffer.begin_load(&task.preload)?;
            self.changed.notify_all();
            while shared.paused && !shared.shutdown {
                shared = self.changed.wait(shared).unwrap_or_else(|e| e.into_inner());
            }
        }
        let (entries, placeholder) = refresh_entries(&task.preload, &self.store, &self.sealer)?;
        self.lock().buffer.finish_load(entries, placeholder)?;
        self.changed.notify_all();
        Ok(())
    }

    fn worker_loop(&self) {
        loop {
            let task = {
                let mut shared = self.lock();
                while shared.task.is_none() && !shared.shutdown {
                    shared = self.changed.wait(shared).unwrap_or_else(|e| e.into_inner());
                }
                if shared.shutdown {
                    return;
                }
                shared.task.take().unwrap()
            };
            if let Err(e) = self.run_task(task) {
                let mut shared = self.lock();
                shared.failure = Some(Failure::from_error(&e));
                self.changed.notify_all();
            }
        }
    }
}

#[derive(Debug)]
pub struct EagerInstance {
    cfg: OramConfig,
    state: OramState,
    inner: Arc<Inner>,
    mode: EagerMode,
    worker: Option<JoinHandle<()>>,
    poisoned: bool,
}

impl EagerInstance {
    pub fn init(cfg: OramConfig, keys: SealKeys, mode: EagerMode) -> Result<Self> {
        Self::with_options(
            cfg,
            keys,
            EagerOptions {
                mode,
                ..Default::default()
            },
            Arc::new(BackingStore::for_config(&cfg)),
        )
    }

    pub fn with_options(
        cfg: OramConfig,
        keys: SealKeys,
        options: EagerOptions,
        store: Arc<BackingStore>,
    ) -> Result<Self> {
        let sealer = Sealer::new(keys, cfg.page_size());
        let mut state = OramState::new(&cfg);
        seal_zero_pages(&cfg, &sealer, &mut state.nonces, &store)?;
        let first = PreloadJob::plan(&cfg, &state.pos, 0, &mut state.nonces)?;
        let inner = Arc::new(Inner {
            shared: Mutex::new(Shared {
                buffer: PreloadBuffer::new(&cfg),
                task: Some(Task {
                    unload: false,
                    preload: first,
                }),
                failure: None,
                paused: options.start_paused,
                shutdown: false,
                last_round: Vec::new(),
                violations: 0,
            }),
            changed: Condvar::new(),
            store,
            sealer,
        });
        let mut instance = Self {
            cfg,
            state,
            inner,
            mode: options.mode,
            worker: None,
            poisoned: false,
        };
        match options.mode {
            EagerMode::Background => {
                let inner = Arc::clone(&instance.inner);
                let handle = std::thread::Builder::new()
                    .name("eager-preload".into())
                    .spawn(move || inner.worker_loop())?;
                instance.worker = Some(handle);
            }
            EagerMode::Inline => instance.run_inline()?,
        }
        Ok(instance)
    }

    fn run_inline(&mut self) -> Result<()> {
        let task = self.inner.lock().task.take();
        match task {
            Some(task) => self.inner.run_task(task),
            None => Ok(()),
        }
    }

    pub fn mode(&self) -> EagerMode {
        self.mode
    }

    pub fn state(&self) -> &OramState {
        &self.state
    }

    pub fn lifecycle(&self) -> Lifecycle {
        self.inner.lock().buffer.lifecycle()
    }

    pub fn lifecycle_stats(&self) -> LifecycleStats {
        let shared = self.inner.lock();
        LifecycleStats {
            transitions: shared.buffer.transitions(),
            violations: shared.violations,
        }
    }

    pub fn pause_background(&self) {
        self.inner.lock().paused = true;
    }

    pub fn resume_background(&self) {
        self.inner.lock().paused = false;
        self.inner.changed.notify_all();
    }

    /// Blocks until the buffer is `Ready`, returning the guard.
    fn wait_ready(&self) -> Result<MutexGuard<'_, Shared>> {
        wait_ready(&self.inner)
    }
}

fn wait_ready(inner: &Inner) -> Result<MutexGuard<'_, Shared>> {
    {
        let mut shared = inner.lock();
        loop {
            if let Some(f) = &shared.failure {
                return Err(f.to_error());
            }
            if shared.buffer.lifecycle() == Lifecycle::Ready && shared.task.is_none() {
                return Ok(shared);
            }
            shared = inner.changed.wait(shared).unwrap_or_else(|e| e.into_inner());
        }
    }
}

impl EagerInstance {
    /// Waits for any pending unload and preload to finish.
    pub fn quiesce(&mut self) -> Result<()> {
        let result = self.wait_ready().map(drop);
        poison_on_integrity(&mut self.poisoned, result)
    }

    pub fn eager_write(&mut self, addr: usize, data: &[u8]) -> Result<WriteStats> {
        if self.poisoned {
            return Err(Error::Poisoned);
        }
        self.cfg.check_addr(addr)?;
        self.cfg.check_page(data)?;
        let result = self.write_inner(addr, data);
        if result.is_err() {
            self.poisoned = true;
        }
        result
    }

    fn write_inner(&mut self, addr: usize, data: &[u8]) -> Result<WriteStats> {
        let started = Instant::now();
        let inner = Arc::clone(&self.inner);
        let mut shared = wait_ready(&inner)?;
        let blocked_time = started.elapsed();

        let p = self.state.p;
        if shared.buffer.lifecycle() != Lifecycle::Ready || shared.buffer.round() != p {
            shared.violations += 1;
            return Err(Error::Lifecycle(format!(
                "foreground write for round {p} found buffer {:?} for round {}",
                shared.buffer.lifecycle(),
                shared.buffer.round()
            )));
        }

        let holding = self.cfg.holding_slot(p);
        let range = self.cfg.refresh_range(p);
        let sealed_holding = inner.sealer.seal(data, holding, self.state.nonces.next_nonce()?)?;
        let mut seals = 1;
        let main = if range.contains(addr) {
            seals += 1;
            Some((addr, inner.sealer.seal(data, addr, self.state.nonces.next_nonce()?)?))
        } else {
            None
        };
        shared.buffer.stage_write(sealed_holding, main)?;

        self.state.pos.set(addr, holding);
        for i in range.iter() {
            self.state.pos.set(i, i);
        }
        self.state.p += 1;

        let next = PreloadJob::plan(&self.cfg, &self.state.pos, self.state.p, &mut self.state.nonces)?;
        let background = Work::new(0, range.count as u64 + 1, 0) + next.work();
        shared.buffer.begin_unload()?;
        shared.last_round = shared.buffer.unload_plan()?;
        shared.task = Some(Task {
            unload: true,
            preload: next,
        });
        drop(shared);
        inner.changed.notify_all();

        if self.mode == EagerMode::Inline {
            self.run_inline()?;
        }

        Ok(WriteStats {
            refresh_count: range.count,
            serial: Work::new(0, 0, seals),
            background,
            wall_time: started.elapsed(),
            blocked_time,
            ..Default::default()
        })
    }

    pub fn eager_read(&mut self, addr: usize) -> Result<Vec<u8>> {
        if self.poisoned {
            return Err(Error::Poisoned);
        }
        self.cfg.check_addr(addr)?;
        let slot = self.state.pos.get(addr);
        let buffered = self
            .inner
            .lock()
            .last_round
            .iter()
            .find(|(s, _)| *s == slot)
            .map(|(_, sealed)| sealed.clone());
        let result = match buffered {
            Some(sealed) => self.inner.sealer.unseal(&sealed, slot),
            None => self
                .inner
                .store
                .read(slot)
                .and_then(|sealed| self.inner.sealer.unseal(&sealed, slot)),
        };
        poison_on_integrity(&mut self.poisoned, result)
    }
}

impl Drop for EagerInstance {
    fn drop(&mut self) {
        self.inner.lock().shutdown = true;
        self.inner.changed.notify_all();
        if let Some(handle) = self.worker.take() {
            let _ = handle.join();
        }
    }
}

impl ObliviousRam for EagerInstance {
    fn config(&self) -> &OramConfig {
        &self.cfg
    }

    fn write(&mut self, addr: usize, data: &[u8]) -> Result<WriteStats> {
        self.eager_write(addr, data)
    }

    fn read(&mut self, addr: usize) -> Result<Vec<u8>> {
        self.eager_read(addr)
    }

    fn write_counter(&self) -> u64 {
        self.state.p
    }

    fn position_map(&self) -> &PositionMap {
        &self.state.pos
    }

    fn store(&self) -> &Arc<BackingStore> {
        &self.inner.store
    }
}
