//! Benchmark matrices over backends, refresh ratios, thread counts and
//! workloads, with CSV and JSON reports.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use woram::cost::CostModel;
use woram::eager::EagerMode;
use woram::methodology::spawn_share_percent;
use woram::pager::{run_workload, BackendKind, PagerConfig, WorkloadSpec, DEFAULT_UTM_BYTES};
use woram::parallel::Dispatch;
use woram::store::AccessTrace;
use woram::OramConfig;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Oram(#[from] woram::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    /// Deterministic cost model; reproducible bit for bit.
    #[default]
    Virtual,
    /// Measured host time; machine dependent.
    Wall,
}

impl std::str::FromStr for Clock {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "virtual" => Ok(Clock::Virtual),
            "wall" => Ok(Clock::Wall),
            other => Err(BenchError::Config(format!("unknown clock {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub workloads: Vec<WorkloadSpec>,
    /// Backend labels: `no_oram`, `det`, `eager`, `parallel` or `parallel:T`.
    pub backends: Vec<String>,
    pub k_values: Vec<usize>,
    /// Thread counts for the parallel backend; empty means `T = K`.
    pub threads: Vec<usize>,
    /// Logical pages of the simulated application.
    pub pages: usize,
    pub page_size: usize,
    pub fault_budget: Option<u64>,
    pub seed: u64,
    pub resident_limit: usize,
    pub utm_bytes: u64,
    pub cost: CostModel,
    pub compute_per_access: f64,
    pub dispatch: Dispatch,
    pub eager_mode: EagerMode,
    /// Run cells concurrently. Only meaningful for the virtual clock.
    pub parallel_cells: bool,
    pub write_traces: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            workloads: vec![WorkloadSpec::RandomWrites { ops: 20_000, pages: 60 }],
            backends: ["no_oram", "det", "eager", "parallel"].map(String::from).to_vec(),
            k_values: vec![3, 7, 15],
            threads: Vec::new(),
            pages: 60,
            page_size: 4096,
            fault_budget: Some(2000),
            seed: 0,
            resident_limit: 15,
            utm_bytes: DEFAULT_UTM_BYTES,
            cost: CostModel::default(),
            compute_per_access: 0.0,
            dispatch: Dispatch::default(),
            eager_mode: EagerMode::default(),
            parallel_cells: false,
            write_traces: true,
        }
    }
}

impl BenchConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| BenchError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Every (workload, K, backend) cell, with the no-ORAM baseline added
    /// when the config omits it.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        if self.workloads.is_empty() || self.k_values.is_empty() {
            return Err(BenchError::Config("workloads and k_values must not be empty".into()));
        }
        if self.k_values.contains(&0) || self.threads.contains(&0) || self.backends.iter().any(|b| b.ends_with(":0")) {
            return Err(BenchError::Config("K and thread counts must be positive".into()));
        }
        let mut kinds = Vec::new();
        for label in &self.backends {
            // plain `parallel` parses to zero threads and is expanded per K below
            let kind = BackendKind::parse(label, 0).map_err(|e| BenchError::Config(e.to_string()))?;
            if !kinds.contains(&kind) {
                kinds.push(kind);
            }
        }
        if !kinds.contains(&BackendKind::NoOram) {
            kinds.insert(0, BackendKind::NoOram);
        }

        let mut cells = Vec::new();
        for (w, workload) in self.workloads.iter().enumerate() {
            for &k in &self.k_values {
                let geometry = OramConfig::for_ratio(k, self.pages, self.page_size)
                    .map_err(|e| BenchError::Config(e.to_string()))?;
                for &kind in &kinds {
                    let variants = match kind {
                        BackendKind::Parallel { threads: 0 } if self.threads.is_empty() => {
                            vec![BackendKind::Parallel { threads: k }]
                        }
                        BackendKind::Parallel { threads: 0 } => self
                            .threads
                            .iter()
                            .map(|&threads| BackendKind::Parallel { threads })
                            .collect(),
                        other => vec![other],
                    };
                    for backend in variants {
                        cells.push(Cell {
                            workload_index: w,
                            workload: workload.name(),
                            k,
                            backend,
                            geometry,
                        });
                    }
                }
            }
        }
        Ok(cells)
    }

    fn pager_config(&self, cell: &Cell) -> PagerConfig {
        let mut cfg = PagerConfig::new(cell.backend, cell.geometry).with_resident_limit(self.resident_limit);
        cfg.utm_bytes = self.utm_bytes;
        cfg.cost = self.cost;
        cfg.compute_per_access = self.compute_per_access;
        cfg.key_seed = self.seed;
        cfg.dispatch = self.dispatch;
        cfg.eager_mode = self.eager_mode;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub workload_index: usize,
    pub workload: String,
    pub k: usize,
    pub backend: BackendKind,
    pub geometry: OramConfig,
}

impl Cell {
    pub fn trace_name(&self) -> String {
        format!(
            "{}_{}_k{}_t{}",
            self.workload,
            self.backend.label(),
            self.k,
            self.backend.threads()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub workload: String,
    pub backend: String,
    pub k: usize,
    pub threads: usize,
    pub faults: u64,
    pub evictions: u64,
    pub slot_reads: u64,
    pub slot_writes: u64,
    pub virtual_time: f64,
    pub wall_time: f64,
    pub oram_time: f64,
    pub spawn_time: f64,
    /// Per-fault service time under the report's clock.
    pub per_fault_time: f64,
    /// Run time relative to the no-ORAM row of the same workload and K.
    pub slowdown_vs_baseline: f64,
}

pub const CSV_HEADER: [&str; 14] = [
    "workload",
    "backend",
    "k",
    "threads",
    "faults",
    "evictions",
    "slot_reads",
    "slot_writes",
    "virtual_time",
    "wall_time",
    "oram_time",
    "spawn_time",
    "per_fault_time",
    "slowdown_vs_baseline",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub clock: Clock,
    pub seed: u64,
    pub fault_budget: Option<u64>,
    pub rows: Vec<Row>,
}

/// Formats `x` with six significant digits, without exponent for the
/// magnitudes a report contains.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let magnitude = x.abs().log10().floor() as i32;
    if !(-6..=15).contains(&magnitude) {
        return format!("{x:.5e}");
    }
    let decimals = (5 - magnitude).max(0) as usize;
    let scale = 10f64.powi(magnitude - 5);
    let rounded = if magnitude > 5 { (x / scale).round() * scale } else { x };
    format!("{rounded:.decimals$}")
}

impl BenchReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut out = csv::Writer::from_writer(Vec::new());
        out.write_record(CSV_HEADER)?;
        for r in &self.rows {
            out.write_record([
                r.workload.clone(),
                r.backend.clone(),
                r.k.to_string(),
                r.threads.to_string(),
                r.faults.to_string(),
                r.evictions.to_string(),
                r.slot_reads.to_string(),
                r.slot_writes.to_string(),
                sig6(r.virtual_time),
                sig6(r.wall_time),
                sig6(r.oram_time),
                sig6(r.spawn_time),
                sig6(r.per_fault_time),
                sig6(r.slowdown_vs_baseline),
            ])?;
        }
        let bytes = out.into_inner().map_err(|e| BenchError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn row(&self, workload: &str, backend: &str, k: usize) -> Option<&Row> {
        self.rows
            .iter()
            .find(|r| r.workload == workload && r.backend == backend && r.k == k)
    }
}

pub struct MatrixOutput {
    pub report: BenchReport,
    /// Write trace of every cell, keyed by [`Cell::trace_name`]. Reads are
    /// left out: the eager worker's reads interleave with the foreground's
    /// in scheduler order.
    pub traces: Vec<(String, AccessTrace)>,
}

pub fn run_matrix(cfg: &BenchConfig, clock: Clock) -> Result<MatrixOutput> {
    let cells = cfg.cells()?;
    let run_cell = |cell: &Cell| -> Result<(Row, AccessTrace)> {
        let run = run_workload(
            &cfg.workloads[cell.workload_index],
            &cfg.pager_config(cell),
            cfg.seed,
            cfg.fault_budget,
        )?;
        let m = &run.metrics;
        let row = Row {
            workload: cell.workload.clone(),
            backend: cell.backend.label().into(),
            k: cell.k,
            threads: cell.backend.threads(),
            faults: m.faults,
            evictions: m.evictions,
            slot_reads: m.slot_reads,
            slot_writes: m.slot_writes,
            virtual_time: m.virtual_time,
            wall_time: m.wall_time.as_secs_f64(),
            oram_time: m.oram_wall.as_secs_f64(),
            spawn_time: m.spawn_wall.as_secs_f64(),
            per_fault_time: match clock {
                Clock::Virtual => m.per_fault_virtual(),
                Clock::Wall => m.per_fault_wall(),
            },
            slowdown_vs_baseline: f64::NAN,
        };
        Ok((row, run.trace))
    };
    let results: Vec<Result<(Row, AccessTrace)>> = if cfg.parallel_cells {
        woram::par::map(&cells, run_cell)
    } else {
        cells.iter().map(run_cell).collect()
    };

    let mut rows = Vec::with_capacity(cells.len());
    let mut traces = Vec::new();
    for (cell, result) in cells.iter().zip(results) {
        let (row, trace) = result?;
        rows.push(row);
        if cfg.write_traces {
            traces.push((cell.trace_name(), trace.writes()));
        }
    }
    let time = |r: &Row| match clock {
        Clock::Virtual => r.virtual_time,
        Clock::Wall => r.wall_time,
    };
    let baselines: Vec<(String, usize, f64)> = rows
        .iter()
        .filter(|r| r.backend == BackendKind::NoOram.label())
        .map(|r| (r.workload.clone(), r.k, time(r)))
        .collect();
    for row in rows.iter_mut() {
        let base = baselines
            .iter()
            .find(|(w, k, _)| *w == row.workload && *k == row.k)
            .map(|b| b.2)
            .expect("every workload and K has a baseline cell");
        row.slowdown_vs_baseline = if row.backend == BackendKind::NoOram.label() {
            1.0
        } else {
            time(row) / base
        };
    }
    Ok(MatrixOutput {
        report: BenchReport {
            clock,
            seed: cfg.seed,
            fault_budget: cfg.fault_budget,
            rows,
        },
        traces,
    })
}

/// Writes `report.csv`, `report.json` and `traces/*.jsonl` under `dir`.
pub fn write_outputs(output: &MatrixOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.csv"), output.report.to_csv()?)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&output.report)?)?;
    if !output.traces.is_empty() {
        let traces = dir.join("traces");
        fs::create_dir_all(&traces)?;
        for (name, trace) in &output.traces {
            let mut file = std::io::BufWriter::new(fs::File::create(traces.join(format!("{name}.jsonl")))?);
            trace.write_jsonl(&mut file)?;
            file.flush()?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreadOverhead {
    pub workload: String,
    pub k: usize,
    pub threads: usize,
    /// Thread creation time as a percentage of ORAM write time.
    pub percent: f64,
}

/// Spawn-time share of every parallel row. Machine dependent; reported,
/// never asserted.
pub fn report_thread_overhead(report: &BenchReport) -> Vec<ThreadOverhead> {
    report
        .rows
        .iter()
        .filter(|r| r.backend == "parallel")
        .map(|r| ThreadOverhead {
            workload: r.workload.clone(),
            k: r.k,
            threads: r.threads,
            percent: spawn_share_percent(r.spawn_time, r.oram_time),
        })
        .collect()
}
