//! Demand-paging simulator.
//!
//! A bounded resident set of page frames sits in front of an ORAM engine (or
//! a plain sealed store for the no-ORAM baseline). On a fault the FIFO head is
//! evicted through the engine, then the faulting page is loaded with an
//! ordinary engine read. Every eviction writes, whether the page is dirty or
//! not. Virtual page `v` is logical block `v`.

pub mod workload;

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cost::{CostModel, Work, WriteStats};
use crate::eager::{EagerInstance, EagerMode, EagerOptions, PreloadJob};
use crate::engine::WoramInstance;
use crate::parallel::{Dispatch, ParallelInstance};
use crate::sealer::{NonceCounter, SealKeys, Sealer};
use crate::store::{AccessTrace, Snapshot};
use crate::{BackingStore, Error, ObliviousRam, OramConfig, PositionMap, Result};

pub use workload::{branch_secret, Access, PageOp, WorkloadSpec};

/// Untrusted memory available for the backing store.
pub const DEFAULT_UTM_BYTES: u64 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    /// Seal and write the evicted page at its own slot.
    NoOram,
    DetWoOram,
    Eager,
    Parallel {
        threads: usize,
    },
}

impl BackendKind {
    pub fn label(&self) -> &'static str {
        match self {
            Self::NoOram => "no_oram",
            Self::DetWoOram => "det",
            Self::Eager => "eager",
            Self::Parallel { .. } => "parallel",
        }
    }

    pub fn threads(&self) -> usize {
        match self {
            Self::Parallel { threads } => *threads,
            _ => 1,
        }
    }

    pub fn is_oram(&self) -> bool {
        !matches!(self, Self::NoOram)
    }

    /// Parses `no_oram`, `det`, `eager`, `parallel` or `parallel:T`.
    /// Plain `parallel` uses `default_threads`.
    pub fn parse(text: &str, default_threads: usize) -> Result<Self> {
        let (name, threads) = match text.split_once(':') {
            Some((n, t)) => (
                n,
                t.parse::<usize>()
                    .map_err(|_| Error::Domain(format!("bad thread count in {text:?}")))?,
            ),
            None => (text, default_threads),
        };
        match name {
            "no_oram" | "noram" | "none" => Ok(Self::NoOram),
            "det" | "detworam" | "base" => Ok(Self::DetWoOram),
            "eager" => Ok(Self::Eager),
            "parallel" => Ok(Self::Parallel { threads }),
            _ => Err(Error::Domain(format!("unknown backend {text:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PagerConfig {
    pub resident_limit: usize,
    pub backend: BackendKind,
    pub geometry: OramConfig,
    pub utm_bytes: u64,
    pub cost: CostModel,
    /// Virtual time the application spends per access, hit or miss.
    pub compute_per_access: f64,
    pub key_seed: u64,
    pub dispatch: Dispatch,
    pub eager_mode: EagerMode,
    /// Snapshot the store around every eviction and keep the diffs.
    pub snapshot_rounds: bool,
}

impl PagerConfig {
    /// 15 resident frames, FIFO, 4 KiB pages, 64 MiB of backing memory.
    pub fn new(backend: BackendKind, geometry: OramConfig) -> Self {
        Self {
            resident_limit: 15,
            backend,
            geometry,
            utm_bytes: DEFAULT_UTM_BYTES,
            cost: CostModel::default(),
            compute_per_access: 0.0,
            key_seed: 0,
            dispatch: Dispatch::default(),
            eager_mode: EagerMode::default(),
            snapshot_rounds: false,
        }
    }

    pub fn with_resident_limit(mut self, limit: usize) -> Self {
        self.resident_limit = limit;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub accesses: u64,
    pub hits: u64,
    pub faults: u64,
    pub evictions: u64,
    pub slot_reads: u64,
    pub slot_writes: u64,
    /// All engine work, including background work.
    pub work: Work,
    /// Virtual time spent servicing faults.
    pub virtual_service: f64,
    /// Virtual time of the whole run, application compute included.
    pub virtual_time: f64,
    pub service_wall: Duration,
    pub wall_time: Duration,
    /// Wall time spent inside engine writes.
    pub oram_wall: Duration,
    pub spawn_wall: Duration,
    pub blocked_wall: Duration,
    pub threads_spawned: u64,
}

impl Metrics {
    pub fn per_fault_virtual(&self) -> f64 {
        ratio(self.virtual_service, self.faults)
    }

    pub fn per_fault_wall(&self) -> f64 {
        ratio(self.service_wall.as_secs_f64(), self.faults)
    }
}

fn ratio(total: f64, n: u64) -> f64 {
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub metrics: Metrics,
    /// Store accesses made by the workload (initialization excluded).
    pub trace: AccessTrace,
    /// Changed-slot sets, one per eviction, when snapshotting was enabled.
    pub epochs: Option<Vec<BTreeSet<usize>>>,
}

struct NoOram {
    store: Arc<BackingStore>,
    sealer: Sealer,
    nonces: NonceCounter,
}

enum Engine {
    NoOram(NoOram),
    Det(WoramInstance),
    Eager(EagerInstance),
    Parallel(ParallelInstance),
}

impl Engine {
    fn build(cfg: &PagerConfig) -> Result<Self> {
        let geo = cfg.geometry;
        let keys = SealKeys::from_seed(cfg.key_seed);
        let slots = match cfg.backend {
            BackendKind::NoOram => geo.main_count(),
            _ => geo.slot_count(),
        };
        let needed = (slots * geo.slot_size()) as u64;
        if needed > cfg.utm_bytes {
            return Err(Error::OutOfMemory {
                page: geo.main_count(),
                capacity: (cfg.utm_bytes / geo.slot_size() as u64) as usize,
            });
        }
        Ok(match cfg.backend {
            BackendKind::NoOram => {
                let store = Arc::new(BackingStore::in_memory(slots, geo.page_size()));
                let sealer = Sealer::new(keys, geo.page_size());
                let mut nonces = NonceCounter::new();
                let zero = vec![0u8; geo.page_size()];
                for slot in 0..slots {
                    store.write(slot, &sealer.seal(&zero, slot, nonces.next_nonce()?)?)?;
                }
                Engine::NoOram(NoOram { store, sealer, nonces })
            }
            BackendKind::DetWoOram => Engine::Det(WoramInstance::init(geo, keys)?),
            BackendKind::Eager => Engine::Eager(EagerInstance::with_options(
                geo,
                keys,
                EagerOptions {
                    mode: cfg.eager_mode,
                    start_paused: false,
                },
                Arc::new(BackingStore::for_config(&geo)),
            )?),
            BackendKind::Parallel { threads } => {
                Engine::Parallel(ParallelInstance::init(geo, keys, threads, cfg.dispatch)?)
            }
        })
    }

    fn store(&self) -> &Arc<BackingStore> {
        match self {
            Engine::NoOram(e) => &e.store,
            Engine::Det(e) => e.store(),
            Engine::Eager(e) => e.store(),
            Engine::Parallel(e) => e.store(),
        }
    }

    fn evict(&mut self, page: usize, data: &[u8]) -> Result<WriteStats> {
        match self {
            Engine::NoOram(e) => {
                let started = Instant::now();
                let sealed = e.sealer.seal(data, page, e.nonces.next_nonce()?)?;
                e.store.write(page, &sealed)?;
                Ok(WriteStats {
                    serial: Work::page_store(),
                    wall_time: started.elapsed(),
                    ..Default::default()
                })
            }
            Engine::Det(e) => e.oram_write(page, data),
            Engine::Eager(e) => e.eager_write(page, data),
            Engine::Parallel(e) => e.parallel_write(page, data),
        }
    }

    fn load(&mut self, page: usize) -> Result<Vec<u8>> {
        match self {
            Engine::NoOram(e) => e.sealer.unseal(&e.store.read(page)?, page),
            Engine::Det(e) => e.oram_read(page),
            Engine::Eager(e) => e.eager_read(page),
            Engine::Parallel(e) => e.read_block(page),
        }
    }

    /// Waits for background work so the store reflects every eviction.
    fn settle(&mut self) -> Result<()> {
        match self {
            Engine::Eager(e) => e.quiesce(),
            _ => Ok(()),
        }
    }

    fn oram(&self) -> Option<&dyn ObliviousRam> {
        match self {
            Engine::NoOram(_) => None,
            Engine::Det(e) => Some(e),
            Engine::Eager(e) => Some(e),
            Engine::Parallel(e) => Some(e),
        }
    }
}

/// FIFO demand pager over one backend.
pub struct Pager {
    cfg: PagerConfig,
    engine: Engine,
    frames: HashMap<usize, Vec<u8>>,
    fifo: VecDeque<usize>,
    metrics: Metrics,
    now: f64,
    background_free_at: f64,
    trace_mark: usize,
    base_reads: u64,
    base_writes: u64,
    last_snapshot: Option<Snapshot>,
    epochs: Vec<BTreeSet<usize>>,
    started: Instant,
}

impl Pager {
    pub fn new(cfg: PagerConfig) -> Result<Self> {
        if cfg.resident_limit == 0 {
            return Err(Error::Domain("resident limit must be at least 1".into()));
        }
        let mut engine = Engine::build(&cfg)?;
        // the initial preload must not race the trace mark
        engine.settle()?;
        let store = Arc::clone(engine.store());
        let background_free_at = match cfg.backend {
            BackendKind::Eager => {
                let mut scratch = NonceCounter::new();
                let pos = PositionMap::identity(&cfg.geometry);
                PreloadJob::plan(&cfg.geometry, &pos, 0, &mut scratch)?
                    .work()
                    .cost(&cfg.cost)
            }
            _ => 0.0,
        };
        let last_snapshot = if cfg.snapshot_rounds {
            Some(store.snapshot()?)
        } else {
            None
        };
        Ok(Self {
            trace_mark: store.trace_len(),
            base_reads: store.read_count(),
            base_writes: store.write_count(),
            cfg,
            engine,
            frames: HashMap::new(),
            fifo: VecDeque::new(),
            metrics: Metrics::default(),
            now: 0.0,
            background_free_at,
            last_snapshot,
            epochs: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &PagerConfig {
        &self.cfg
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn store(&self) -> &Arc<BackingStore> {
        self.engine.store()
    }

    /// The ORAM engine behind the pager, if any.
    pub fn oram(&self) -> Option<&dyn ObliviousRam> {
        self.engine.oram()
    }

    pub fn is_resident(&self, page: usize) -> bool {
        self.frames.contains_key(&page)
    }

    /// Resident pages, oldest first.
    pub fn resident_pages(&self) -> impl Iterator<Item = usize> + '_ {
        self.fifo.iter().copied()
    }

    pub fn capacity(&self) -> usize {
        self.cfg.geometry.main_count()
    }

    pub fn read(&mut self, page: usize) -> Result<Vec<u8>> {
        Ok(self.touch(page)?.clone())
    }

    pub fn write(&mut self, page: usize, data: &[u8]) -> Result<()> {
        self.cfg.geometry.check_page(data)?;
        self.touch(page)?.copy_from_slice(data);
        Ok(())
    }

    fn touch(&mut self, page: usize) -> Result<&mut Vec<u8>> {
        if page >= self.capacity() {
            return Err(Error::OutOfMemory {
                page,
                capacity: self.capacity(),
            });
        }
        self.metrics.accesses += 1;
        self.now += self.cfg.compute_per_access;
        if self.frames.contains_key(&page) {
            self.metrics.hits += 1;
        } else {
            self.fault(page)?;
        }
        Ok(self.frames.get_mut(&page).expect("page is resident"))
    }

    fn fault(&mut self, page: usize) -> Result<()> {
        let wall = Instant::now();
        let start = self.now;
        self.metrics.faults += 1;

        if self.frames.len() >= self.cfg.resident_limit {
            let victim = self.fifo.pop_front().expect("full resident set has a head");
            let data = self.frames.remove(&victim).expect("queued page is resident");
            let stats = self.engine.evict(victim, &data)?;
            self.metrics.evictions += 1;
            self.account_eviction(&stats);
            if let Some(before) = self.last_snapshot.take() {
                self.engine.settle()?;
                let after = self.store().snapshot()?;
                self.epochs.push(before.diff(&after)?);
                self.last_snapshot = Some(after);
            }
        }

        let data = self.engine.load(page)?;
        self.metrics.work += Work::page_load();
        self.now += Work::page_load().cost(&self.cfg.cost);
        self.frames.insert(page, data);
        self.fifo.push_back(page);

        self.metrics.virtual_service += self.now - start;
        self.metrics.service_wall += wall.elapsed();
        Ok(())
    }

    fn account_eviction(&mut self, stats: &WriteStats) {
        let cost = &self.cfg.cost;
        match self.cfg.backend {
            BackendKind::Eager => {
                let wait = (self.background_free_at - self.now).max(0.0);
                self.now += wait + stats.critical_path(cost);
                self.background_free_at = self.now + stats.background.cost(cost);
            }
            _ => self.now += stats.critical_path(cost),
        }
        self.metrics.work += stats.total();
        self.metrics.oram_wall += stats.wall_time;
        self.metrics.spawn_wall += stats.spawn_time;
        self.metrics.blocked_wall += stats.blocked_time;
        self.metrics.threads_spawned += stats.threads_spawned as u64;
    }

    /// Waits for background work and returns the run's metrics and trace.
    pub fn finish(mut self) -> Result<RunResult> {
        self.engine.settle()?;
        let store = Arc::clone(self.engine.store());
        let mut metrics = self.metrics;
        metrics.slot_reads = store.read_count() - self.base_reads;
        metrics.slot_writes = store.write_count() - self.base_writes;
        metrics.virtual_time = self.now;
        metrics.wall_time = self.started.elapsed();
        Ok(RunResult {
            metrics,
            trace: store.trace_since(self.trace_mark),
            epochs: self.last_snapshot.map(|_| self.epochs),
        })
    }
}

/// Replays `spec` through a fresh pager. Stops at the end of the stream or
/// before the access that would cause fault number `fault_budget + 1`.
pub fn run_workload(spec: &WorkloadSpec, cfg: &PagerConfig, seed: u64, fault_budget: Option<u64>) -> Result<RunResult> {
    let accesses = spec.accesses(seed)?;
    let mut pager = Pager::new(cfg.clone())?;
    let page_size = cfg.geometry.page_size();
    for (index, access) in accesses.iter().enumerate() {
        if let Some(budget) = fault_budget {
            if pager.metrics.faults >= budget && !pager.is_resident(access.page) {
                break;
            }
        }
        match access.op {
            PageOp::Read => {
                pager.read(access.page)?;
            }
            PageOp::Write => pager.write(access.page, &spec.payload(index, access.page, page_size))?,
        }
    }
    pager.finish()
}
