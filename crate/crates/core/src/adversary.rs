//! The malicious-OS observer.
//!
//! The adversary sees which slots of the backing store are written, either as
//! the ordered sequence of write events or as the set of slots that changed
//! between two snapshots. It never sees reads, keys or trusted state. Write
//! volume is outside the protection scope, so distinguishing experiments
//! require both workloads to evict the same number of pages.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::pager::{run_workload, BackendKind, PagerConfig, RunResult, WorkloadSpec};
use crate::store::{AccessTrace, Snapshot};
use crate::{BackingStore, Error, OramConfig, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObserveMode {
    PerWrite,
    PerRoundSnapshot,
}

impl ObserveMode {
    /// Parallel refresh only fixes the set of slots per round, not their
    /// order, so it is observed by snapshot.
    pub fn for_backend(backend: BackendKind) -> Self {
        match backend {
            BackendKind::Parallel { .. } => Self::PerRoundSnapshot,
            _ => Self::PerWrite,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObserverView {
    /// Slot index of every write, in order.
    Sequence(Vec<usize>),
    /// Changed-slot set of every observation epoch.
    Epochs(Vec<BTreeSet<usize>>),
}

impl ObserverView {
    /// Splits a write sequence into per-round sets, round `r` taking as many
    /// writes as round `p0 + r` issues. Epoch views are returned unchanged.
    pub fn into_rounds(self, cfg: &OramConfig, p0: u64) -> ObserverView {
        match self {
            ObserverView::Epochs(_) => self,
            ObserverView::Sequence(seq) => {
                let mut epochs = Vec::new();
                let mut rest = seq.as_slice();
                let mut p = p0;
                while !rest.is_empty() {
                    let len = (cfg.refresh_range(p).count + 1).min(rest.len());
                    let (head, tail) = rest.split_at(len);
                    epochs.push(head.iter().copied().collect());
                    rest = tail;
                    p += 1;
                }
                ObserverView::Epochs(epochs)
            }
        }
    }
}

/// Write indices of `trace`; read events are dropped.
pub fn observe_trace(trace: &AccessTrace) -> ObserverView {
    ObserverView::Sequence(trace.write_indices())
}

/// The adversary's view of a completed pager run.
pub fn observe(run: &RunResult, mode: ObserveMode) -> Result<ObserverView> {
    match mode {
        ObserveMode::PerWrite => Ok(observe_trace(&run.trace)),
        ObserveMode::PerRoundSnapshot => run
            .epochs
            .clone()
            .map(ObserverView::Epochs)
            .ok_or_else(|| Error::Domain("run was not snapshotted per round".into())),
    }
}

/// Takes a snapshot at every round boundary and records the diff.
#[derive(Debug, Clone)]
pub struct SnapshotObserver {
    last: Snapshot,
    epochs: Vec<BTreeSet<usize>>,
}

impl SnapshotObserver {
    pub fn new(store: &BackingStore) -> Result<Self> {
        Ok(Self {
            last: store.snapshot()?,
            epochs: Vec::new(),
        })
    }

    pub fn boundary(&mut self, store: &BackingStore) -> Result<&BTreeSet<usize>> {
        let now = store.snapshot()?;
        self.epochs.push(self.last.diff(&now)?);
        self.last = now;
        Ok(self.epochs.last().unwrap())
    }

    pub fn into_view(self) -> ObserverView {
        ObserverView::Epochs(self.epochs)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckVerdict {
    Pass,
    Fail {
        round: usize,
        expected: Vec<usize>,
        observed: Vec<usize>,
    },
}

impl CheckVerdict {
    pub fn passed(&self) -> bool {
        *self == CheckVerdict::Pass
    }
}

/// Checks that round `r` of `view` wrote exactly the slots the geometry
/// prescribes for write `p0 + r`: in order for sequences, as sets for epochs.
pub fn check_expected(view: &ObserverView, cfg: &OramConfig, p0: u64) -> CheckVerdict {
    match view {
        ObserverView::Sequence(seq) => {
            let mut rest = seq.as_slice();
            let mut round = 0usize;
            while !rest.is_empty() {
                let expected = cfg.expected_writes(p0 + round as u64);
                let len = expected.len().min(rest.len());
                let (head, tail) = rest.split_at(len);
                if head != expected.as_slice() {
                    return CheckVerdict::Fail {
                        round,
                        expected,
                        observed: head.to_vec(),
                    };
                }
                rest = tail;
                round += 1;
            }
            CheckVerdict::Pass
        }
        ObserverView::Epochs(epochs) => {
            for (round, observed) in epochs.iter().enumerate() {
                let expected = cfg.expected_write_set(p0 + round as u64);
                if *observed != expected {
                    return CheckVerdict::Fail {
                        round,
                        expected: expected.into_iter().collect(),
                        observed: observed.iter().copied().collect(),
                    };
                }
            }
            CheckVerdict::Pass
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distinguishability {
    Distinguishable,
    Indistinguishable,
}

/// Decides from two views alone.
pub fn distinguish(left: &ObserverView, right: &ObserverView) -> Distinguishability {
    if left == right {
        Distinguishability::Indistinguishable
    } else {
        Distinguishability::Distinguishable
    }
}

#[derive(Debug, Clone)]
pub struct LeakReport {
    pub verdict: Distinguishability,
    pub mode: ObserveMode,
    pub evictions: u64,
    pub left: ObserverView,
    pub right: ObserverView,
}

impl LeakReport {
    pub fn detail(&self) -> String {
        let describe = |v: &ObserverView| match v {
            ObserverView::Sequence(s) => format!("{s:?}"),
            ObserverView::Epochs(e) => format!("{e:?}"),
        };
        format!(
            "{:?} view over {} evictions: {} vs {}",
            self.mode,
            self.evictions,
            describe(&self.left),
            describe(&self.right)
        )
    }
}

/// Runs the workloads for both secrets under `cfg` and compares what the
/// adversary sees.
pub fn leak_test<F>(make_workload: F, secrets: (u64, u64), cfg: &PagerConfig) -> Result<LeakReport>
where
    F: Fn(u64) -> WorkloadSpec,
{
    let mode = ObserveMode::for_backend(cfg.backend);
    let mut cfg = cfg.clone();
    cfg.snapshot_rounds = mode == ObserveMode::PerRoundSnapshot;
    let left = run_workload(&make_workload(secrets.0), &cfg, 0, None)?;
    let right = run_workload(&make_workload(secrets.1), &cfg, 0, None)?;
    if left.metrics.evictions != right.metrics.evictions {
        return Err(Error::UnequalWriteCounts {
            left: left.metrics.evictions,
            right: right.metrics.evictions,
        });
    }
    let left_view = observe(&left, mode)?;
    let right_view = observe(&right, mode)?;
    Ok(LeakReport {
        verdict: distinguish(&left_view, &right_view),
        mode,
        evictions: left.metrics.evictions,
        left: left_view,
        right: right_view,
    })
}

/// One verdict line: `{"test","backend","verdict","detail"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub test: String,
    pub backend: String,
    pub verdict: String,
    pub detail: String,
}

impl VerdictRecord {
    pub fn from_leak(test: &str, backend: BackendKind, report: &LeakReport) -> Self {
        Self {
            test: test.into(),
            backend: backend.label().into(),
            verdict: match report.verdict {
                Distinguishability::Distinguishable => "distinguishable",
                Distinguishability::Indistinguishable => "indistinguishable",
            }
            .into(),
            detail: report.detail(),
        }
    }

    pub fn from_check(test: &str, backend: BackendKind, verdict: &CheckVerdict) -> Self {
        Self {
            test: test.into(),
            backend: backend.label().into(),
            verdict: if verdict.passed() { "pass" } else { "fail" }.into(),
            detail: match verdict {
                CheckVerdict::Pass => String::new(),
                CheckVerdict::Fail {
                    round,
                    expected,
                    observed,
                } => format!("round {round}: expected {expected:?}, observed {observed:?}"),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::WoramInstance;
    use crate::pager::branch_secret;
    use crate::{ObliviousRam, SealKeys};

    const PAGE: usize = 64;

    fn geo() -> OramConfig {
        OramConfig::new(12, 4, PAGE).unwrap()
    }

    #[test]
    fn per_round_diff_of_one_write() {
        let mut w = WoramInstance::init(geo(), SealKeys::from_seed(1)).unwrap();
        let mut obs = SnapshotObserver::new(w.store()).unwrap();
        w.oram_write(5, &[1u8; PAGE]).unwrap();
        assert_eq!(*obs.boundary(w.store()).unwrap(), BTreeSet::from([12, 0, 1, 2]));
        // empty round
        assert!(obs.boundary(w.store()).unwrap().is_empty());
    }

    #[test]
    fn base_run_passes_no_oram_fails() {
        let spec = WorkloadSpec::RandomWrites { ops: 60, pages: 12 };
        let det = PagerConfig::new(BackendKind::DetWoOram, geo()).with_resident_limit(3);
        let run = run_workload(&spec, &det, 9, None).unwrap();
        assert!(check_expected(&observe(&run, ObserveMode::PerWrite).unwrap(), &geo(), 0).passed());

        let none = PagerConfig::new(BackendKind::NoOram, geo()).with_resident_limit(3);
        let run = run_workload(&spec, &none, 9, None).unwrap();
        assert!(run.metrics.evictions > 0);
        assert!(!check_expected(&observe(&run, ObserveMode::PerWrite).unwrap(), &geo(), 0).passed());
    }

    #[test]
    fn parallel_run_passes_as_sets() {
        let spec = WorkloadSpec::RandomWrites { ops: 60, pages: 12 };
        let mut cfg = PagerConfig::new(BackendKind::Parallel { threads: 3 }, geo()).with_resident_limit(3);
        cfg.snapshot_rounds = true;
        let run = run_workload(&spec, &cfg, 9, None).unwrap();
        let snap = observe(&run, ObserveMode::PerRoundSnapshot).unwrap();
        assert!(check_expected(&snap, &geo(), 0).passed());
        let chunked = observe(&run, ObserveMode::PerWrite).unwrap().into_rounds(&geo(), 0);
        assert_eq!(chunked, snap);
    }

    #[test]
    fn per_round_view_requires_snapshots() {
        let spec = WorkloadSpec::Scan { pages: 2, passes: 1 };
        let cfg = PagerConfig::new(BackendKind::DetWoOram, geo());
        let run = run_workload(&spec, &cfg, 0, None).unwrap();
        assert!(observe(&run, ObserveMode::PerRoundSnapshot).is_err());
    }

    #[test]
    fn leak_verdicts() {
        let none = PagerConfig::new(BackendKind::NoOram, geo()).with_resident_limit(2);
        let r = leak_test(branch_secret, (1, 2), &none).unwrap();
        assert_eq!(r.verdict, Distinguishability::Distinguishable);
        assert_eq!(r.left, ObserverView::Sequence(vec![0, 1, 2]));
        assert_eq!(r.right, ObserverView::Sequence(vec![0, 2, 1]));

        let det = PagerConfig::new(BackendKind::DetWoOram, geo()).with_resident_limit(2);
        assert_eq!(
            leak_test(branch_secret, (1, 2), &det).unwrap().verdict,
            Distinguishability::Indistinguishable
        );
        assert_eq!(
            leak_test(branch_secret, (1, 1), &none).unwrap().verdict,
            Distinguishability::Indistinguishable
        );
    }

    #[test]
    fn unequal_counts_rejected() {
        let none = PagerConfig::new(BackendKind::NoOram, geo()).with_resident_limit(2);
        assert!(matches!(
            leak_test(branch_secret, (0, 1), &none),
            Err(Error::UnequalWriteCounts { left: 0, right: 3 })
        ));
    }

    #[test]
    fn verdict_json_shape() {
        let rec = VerdictRecord::from_check("t", BackendKind::DetWoOram, &CheckVerdict::Pass);
        let json = serde_json::to_value(&rec).unwrap();
        assert_eq!(json["verdict"], "pass");
        assert_eq!(json["backend"], "det");
        assert!(json.get("test").is_some() && json.get("detail").is_some());
    }
}
