//! Parallel refresh: the per-write refresh loop fanned out over `T` workers.
//!
//! Iteration `q` of the loop touches main index `start + q` (mod `N`) and the
//! slot that block's latest copy lives in. Distinct iterations own distinct
//! main indices, so they can run in any order. Worker `j` takes the
//! iterations with `q mod T = j`.
//!
//! A round runs in three phases: the holding write and nonce reservation on
//! the caller's thread, the refresh iterations on the workers, and after the
//! barrier the position-map updates and the counter increment.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cost::{Work, WriteStats};
use crate::engine::{poison_on_integrity, seal_zero_pages, OramState};
use crate::geometry::RefreshRange;
use crate::sealer::{Nonce, SealKeys, Sealer};
use crate::{BackingStore, Error, ObliviousRam, OramConfig, PositionMap, Result};

/// How refresh workers are run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dispatch {
    /// Workers' iterations run one after another on the caller's thread.
    Sequential,
    /// A persistent rayon pool of `T` threads. Falls back to sequential
    /// without the `rayon` feature.
    #[default]
    Pool,
    /// Fresh OS threads spawned for every round and joined at the barrier.
    SpawnPerRound,
}

/// Assignment of refresh iterations to workers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefreshPartition {
    pub worker_count: usize,
    pub assignments: Vec<Vec<usize>>,
}

impl RefreshPartition {
    pub fn loads(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }
}

/// Worker `j` of `threads` receives ordinals `{q < count : q mod threads = j}`.
pub fn partition(count: usize, threads: usize) -> RefreshPartition {
    let threads = threads.max(1);
    let mut assignments = vec![Vec::new(); threads];
    for q in 0..count {
        assignments[q % threads].push(q);
    }
    RefreshPartition {
        worker_count: threads,
        assignments,
    }
}

/// Slots one worker touched during one round.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WorkerAccess {
    pub worker: usize,
    pub reads: Vec<usize>,
    pub writes: Vec<usize>,
}

/// Per-round access record of all workers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoundAccess {
    pub round: u64,
    pub workers: Vec<WorkerAccess>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RaceViolation {
    /// Two workers wrote the same slot.
    WriteWrite { slot: usize, first: usize, second: usize },
    /// A slot written by one worker was read by another.
    ReadWrite { slot: usize, writer: usize, reader: usize },
}

impl RoundAccess {
    /// Checks that worker write sets are pairwise disjoint and that no worker
    /// reads a slot another worker writes.
    pub fn audit(&self) -> std::result::Result<(), RaceViolation> {
        let mut writer_of = std::collections::HashMap::new();
        for w in &self.workers {
            for &slot in &w.writes {
                if let Some(&first) = writer_of.get(&slot) {
                    if first != w.worker {
                        return Err(RaceViolation::WriteWrite {
                            slot,
                            first,
                            second: w.worker,
                        });
                    }
                }
                writer_of.insert(slot, w.worker);
            }
        }
        for w in &self.workers {
            for slot in &w.reads {
                if let Some(&writer) = writer_of.get(slot) {
                    if writer != w.worker {
                        return Err(RaceViolation::ReadWrite {
                            slot: *slot,
                            writer,
                            reader: w.worker,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

struct RoundCtx<'a> {
    range: RefreshRange,
    pos: &'a PositionMap,
    nonces: &'a [Nonce],
    sealer: &'a Sealer,
    store: &'a BackingStore,
}

struct WorkerOutcome {
    access: WorkerAccess,
    work: Work,
}

fn run_worker(ctx: &RoundCtx<'_>, worker: usize, ordinals: &[usize]) -> Result<WorkerOutcome> {
    let mut access = WorkerAccess {
        worker,
        ..Default::default()
    };
    for &q in ordinals {
        let i = ctx.range.index(q);
        let src = ctx.pos.get(i);
        let plain = ctx.sealer.unseal(&ctx.store.read(src)?, src)?;
        ctx.store.write(i, &ctx.sealer.seal(&plain, i, ctx.nonces[q])?)?;
        access.reads.push(src);
        access.writes.push(i);
    }
    Ok(WorkerOutcome {
        access,
        work: Work::refresh(ordinals.len() as u64),
    })
}

#[derive(Debug)]
pub struct ParallelInstance {
    cfg: OramConfig,
    state: OramState,
    sealer: Sealer,
    store: Arc<BackingStore>,
    threads: usize,
    dispatch: Dispatch,
    #[cfg(feature = "rayon")]
    pool: Option<rayon::ThreadPool>,
    poisoned: bool,
    record_access: bool,
    access_log: Vec<RoundAccess>,
    spawn_time: Duration,
    oram_time: Duration,
}

impl ParallelInstance {
    pub fn init(cfg: OramConfig, keys: SealKeys, threads: usize, dispatch: Dispatch) -> Result<Self> {
        Self::with_store(cfg, keys, threads, dispatch, Arc::new(BackingStore::for_config(&cfg)))
    }

    pub fn with_store(
        cfg: OramConfig,
        keys: SealKeys,
        threads: usize,
        dispatch: Dispatch,
        store: Arc<BackingStore>,
    ) -> Result<Self> {
        if threads == 0 {
            return Err(Error::Domain("thread count must be at least 1".into()));
        }
        let sealer = Sealer::new(keys, cfg.page_size());
        let mut state = OramState::new(&cfg);
        seal_zero_pages(&cfg, &sealer, &mut state.nonces, &store)?;
        #[cfg(feature = "rayon")]
        let pool = match dispatch {
            Dispatch::Pool => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .thread_name(|i| format!("refresh-{i}"))
                    .build()
                    .map_err(|e| Error::Worker(e.to_string()))?,
            ),
            _ => None,
        };
        Ok(Self {
            cfg,
            state,
            sealer,
            store,
            threads,
            dispatch,
            #[cfg(feature = "rayon")]
            pool,
            poisoned: false,
            record_access: false,
            access_log: Vec::new(),
            spawn_time: Duration::ZERO,
            oram_time: Duration::ZERO,
        })
    }

    /// Keeps a [`RoundAccess`] for every round and rejects any round whose
    /// audit fails.
    pub fn with_access_recorder(mut self, enabled: bool) -> Self {
        self.record_access = enabled;
        self
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn dispatch(&self) -> Dispatch {
        self.dispatch
    }

    pub fn state(&self) -> &OramState {
        &self.state
    }

    pub fn take_access_log(&mut self) -> Vec<RoundAccess> {
        std::mem::take(&mut self.access_log)
    }

    /// Total wall time spent spawning worker threads.
    pub fn spawn_time(&self) -> Duration {
        self.spawn_time
    }

    /// Total wall time spent inside writes.
    pub fn oram_time(&self) -> Duration {
        self.oram_time
    }

    pub fn parallel_write(&mut self, addr: usize, data: &[u8]) -> Result<WriteStats> {
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

        // phase 1
        let holding = self.cfg.holding_slot(p);
        let nonce = self.state.nonces.next_nonce()?;
        self.store.write(holding, &self.sealer.seal(data, holding, nonce)?)?;
        self.state.pos.set(addr, holding);
        let range = self.cfg.refresh_range(p);
        let nonces = self.state.nonces.reserve(range.count)?;
        let plan = partition(range.count, self.threads);

        // phase 2
        let ctx = RoundCtx {
            range,
            pos: &self.state.pos,
            nonces: &nonces,
            sealer: &self.sealer,
            store: &self.store,
        };
        let (outcomes, spawned, spawn_time) = self.fan_out(&ctx, &plan);
        let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

        // phase 3
        if self.record_access {
            let round = RoundAccess {
                round: p,
                workers: outcomes.iter().map(|o| o.access.clone()).collect(),
            };
            if let Err(v) = round.audit() {
                self.poisoned = true;
                return Err(Error::Worker(format!("round {p}: {v:?}")));
            }
            self.access_log.push(round);
        }
        for i in range.iter() {
            self.state.pos.set(i, i);
        }
        self.state.p += 1;

        let concurrent = match self.dispatch {
            Dispatch::Sequential => false,
            Dispatch::Pool => cfg!(feature = "rayon"),
            Dispatch::SpawnPerRound => true,
        };
        let worker_work: Vec<Work> = outcomes.iter().map(|o| o.work).collect();
        let mut stats = WriteStats {
            refresh_count: range.count,
            serial: Work::page_store(),
            threads_spawned: spawned,
            spawn_time,
            ..Default::default()
        };
        if concurrent {
            stats.workers = worker_work;
        } else {
            stats.serial += worker_work.into_iter().sum();
        }
        stats.wall_time = started.elapsed();
        self.spawn_time += spawn_time;
        self.oram_time += stats.wall_time;
        Ok(stats)
    }

    /// Runs every non-empty assignment. Returns outcomes, threads spawned and
    /// the time spent spawning them.
    fn fan_out(&self, ctx: &RoundCtx<'_>, plan: &RefreshPartition) -> (Vec<Result<WorkerOutcome>>, usize, Duration) {
        let jobs: Vec<(usize, &[usize])> = plan
            .assignments
            .iter()
            .enumerate()
            .filter(|(_, a)| !a.is_empty())
            .map(|(j, a)| (j, a.as_slice()))
            .collect();
        match self.dispatch {
            Dispatch::SpawnPerRound => {
                let mut spawn_time = Duration::ZERO;
                let outcomes = std::thread::scope(|scope| {
                    let t0 = Instant::now();
                    let handles: Vec<_> = jobs
                        .iter()
                        .map(|&(j, ordinals)| scope.spawn(move || run_worker(ctx, j, ordinals)))
                        .collect();
                    spawn_time = t0.elapsed();
                    handles
                        .into_iter()
                        .map(|h| {
                            h.join()
                                .unwrap_or_else(|_| Err(Error::Worker("refresh worker panicked".into())))
                        })
                        .collect()
                });
                (outcomes, jobs.len(), spawn_time)
            }
            #[cfg(feature = "rayon")]
            Dispatch::Pool => {
                use rayon::prelude::*;
                let pool = self.pool.as_ref().expect("pool built for Pool dispatch");
                let outcomes = pool.install(|| {
                    jobs.par_iter()
                        .map(|&(j, ordinals)| run_worker(ctx, j, ordinals))
                        .collect()
                });
                (outcomes, 0, Duration::ZERO)
            }
            _ => {
                let outcomes = jobs.iter().map(|&(j, ordinals)| run_worker(ctx, j, ordinals)).collect();
                (outcomes, 0, Duration::ZERO)
            }
        }
    }

    pub fn read_block(&mut self, addr: usize) -> Result<Vec<u8>> {
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

impl ObliviousRam for ParallelInstance {
    fn config(&self) -> &OramConfig {
        &self.cfg
    }

    fn write(&mut self, addr: usize, data: &[u8]) -> Result<WriteStats> {
        self.parallel_write(addr, data)
    }

    fn read(&mut self, addr: usize) -> Result<Vec<u8>> {
        self.read_block(addr)
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::WoramInstance;
    use std::collections::BTreeSet;

    const PAGE: usize = 32;

    #[test]
    fn partition_examples() {
        assert_eq!(partition(3, 3).assignments, vec![vec![0], vec![1], vec![2]]);
        assert_eq!(partition(7, 3).loads(), vec![3, 2, 2]);
        assert_eq!(partition(3, 1).assignments, vec![vec![0, 1, 2]]);
        assert_eq!(partition(0, 4).loads(), vec![0, 0, 0, 0]);
    }

    #[test]
    fn partition_is_disjoint_cover_and_balanced() {
        for count in 0..40 {
            for t in 1..12 {
                let plan = partition(count, t);
                let mut all: Vec<usize> = plan.assignments.concat();
                all.sort_unstable();
                assert_eq!(all, (0..count).collect::<Vec<_>>());
                let loads = plan.loads();
                assert!(loads.iter().max().unwrap() - loads.iter().min().unwrap() <= 1);
                for (j, a) in plan.assignments.iter().enumerate() {
                    assert!(a.iter().all(|q| q % t == j));
                }
            }
        }
    }

    #[test]
    fn first_write_matches_base() {
        let cfg = OramConfig::new(12, 4, PAGE).unwrap();
        for dispatch in [Dispatch::Sequential, Dispatch::Pool, Dispatch::SpawnPerRound] {
            let mut par = ParallelInstance::init(cfg, SealKeys::from_seed(1), 3, dispatch).unwrap();
            let mut base = WoramInstance::init(cfg, SealKeys::from_seed(1)).unwrap();
            let mark = par.store.trace_len();
            par.parallel_write(5, &[9u8; PAGE]).unwrap();
            base.oram_write(5, &[9u8; PAGE]).unwrap();
            let written: BTreeSet<_> = par.store.trace_since(mark).write_indices().into_iter().collect();
            assert_eq!(written, BTreeSet::from([12, 0, 1, 2]));
            assert_eq!(par.state.pos, base.state().pos);
            for a in 0..12 {
                assert_eq!(par.read_block(a).unwrap(), base.oram_read(a).unwrap());
            }
        }
    }

    #[test]
    fn single_thread_trace_matches_base_order() {
        let cfg = OramConfig::new(10, 4, PAGE).unwrap();
        let mut par = ParallelInstance::init(cfg, SealKeys::from_seed(1), 1, Dispatch::Pool).unwrap();
        let mut base = WoramInstance::init(cfg, SealKeys::from_seed(1)).unwrap();
        for i in 0..30 {
            par.parallel_write(i * 3 % 10, &[i as u8; PAGE]).unwrap();
            base.oram_write(i * 3 % 10, &[i as u8; PAGE]).unwrap();
        }
        assert_eq!(par.store.trace().write_indices(), base.store().trace().write_indices());
        // same keys and nonce schedule, so even the bytes agree
        assert_eq!(par.store.snapshot().unwrap(), base.store().snapshot().unwrap());
    }

    #[test]
    fn recorder_catches_overlap() {
        let round = RoundAccess {
            round: 0,
            workers: vec![
                WorkerAccess {
                    worker: 0,
                    reads: vec![12],
                    writes: vec![0],
                },
                WorkerAccess {
                    worker: 1,
                    reads: vec![0],
                    writes: vec![1],
                },
            ],
        };
        assert_eq!(
            round.audit(),
            Err(RaceViolation::ReadWrite {
                slot: 0,
                writer: 0,
                reader: 1
            })
        );
        let round = RoundAccess {
            round: 0,
            workers: vec![
                WorkerAccess {
                    worker: 0,
                    reads: vec![],
                    writes: vec![3],
                },
                WorkerAccess {
                    worker: 1,
                    reads: vec![],
                    writes: vec![3],
                },
            ],
        };
        assert!(matches!(round.audit(), Err(RaceViolation::WriteWrite { slot: 3, .. })));
    }

    #[test]
    fn stats_split_work_across_workers() {
        let cfg = OramConfig::new(60, 4, PAGE).unwrap();
        let mut par = ParallelInstance::init(cfg, SealKeys::from_seed(1), 15, Dispatch::SpawnPerRound).unwrap();
        let stats = par.parallel_write(0, &[0u8; PAGE]).unwrap();
        assert_eq!(stats.refresh_count, 15);
        assert_eq!(stats.workers.len(), 15);
        assert!(stats.workers.iter().all(|w| *w == Work::refresh(1)));
        assert_eq!(stats.threads_spawned, 15);
        assert_eq!(stats.total(), Work::page_store() + Work::refresh(15));
    }

    #[test]
    fn zero_threads_rejected() {
        let cfg = OramConfig::new(4, 4, PAGE).unwrap();
        assert!(ParallelInstance::init(cfg, SealKeys::from_seed(1), 0, Dispatch::Pool).is_err());
    }
}
