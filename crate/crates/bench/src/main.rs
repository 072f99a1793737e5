use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use woram::adversary::{leak_test, VerdictRecord};
use woram::methodology::{simulate_eager_time, simulate_parallel_time};
use woram::pager::{branch_secret, BackendKind, PagerConfig};
use woram::OramConfig;
use woram_bench::{report_thread_overhead, run_matrix, write_outputs, BenchConfig, BenchError, Clock};

#[derive(Parser)]
#[command(name = "bench", about = "Write-only ORAM paging benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a benchmark matrix and write report.csv, report.json and traces/.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Thread count for the parallel backend, overriding the config.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, value_enum, default_value_t = ClockArg::Virtual)]
        clock: ClockArg,
    },
    /// Run the branch-secret program for two secrets and print the verdict.
    Leak {
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        secrets: Vec<u64>,
        /// `no_oram`, `det`, `eager`, `parallel` or `parallel:T`.
        #[arg(long, default_value = "det")]
        backend: String,
        #[arg(long, default_value_t = 2)]
        resident_limit: usize,
    },
    /// Evaluate a time projection.
    Simulate {
        #[arg(long, value_enum)]
        formula: Formula,
        /// parallel: TOTAL ORAM_TIME SPEEDUP. eager: TOTAL GAP:REFRESH...
        #[arg(long, num_args = 1.., allow_hyphen_values = true)]
        args: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ClockArg {
    Virtual,
    Wall,
}

#[derive(Clone, Copy, ValueEnum)]
enum Formula {
    Parallel,
    Eager,
}

fn number(text: &str) -> Result<f64, BenchError> {
    text.parse()
        .map_err(|_| BenchError::Config(format!("not a number: {text:?}")))
}

fn simulate(formula: Formula, args: &[String]) -> Result<f64, BenchError> {
    match formula {
        Formula::Parallel => {
            let [total, oram, speedup] = args else {
                return Err(BenchError::Config("parallel takes TOTAL ORAM_TIME SPEEDUP".into()));
            };
            Ok(simulate_parallel_time(number(total)?, number(oram)?, number(speedup)?)?)
        }
        Formula::Eager => {
            let (total, pairs) = args
                .split_first()
                .ok_or_else(|| BenchError::Config("eager takes TOTAL GAP:REFRESH...".into()))?;
            let mut gaps = Vec::new();
            let mut refreshes = Vec::new();
            for pair in pairs {
                let (g, r) = pair
                    .split_once(':')
                    .ok_or_else(|| BenchError::Config(format!("expected GAP:REFRESH, got {pair:?}")))?;
                gaps.push(number(g)?);
                refreshes.push(number(r)?);
            }
            Ok(simulate_eager_time(number(total)?, &gaps, &refreshes)?)
        }
    }
}

fn run(cli: Cli) -> Result<(), BenchError> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            threads,
            clock,
        } => {
            let mut cfg = BenchConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(t) = threads {
                cfg.threads = vec![t];
            }
            let clock = match clock {
                ClockArg::Virtual => Clock::Virtual,
                ClockArg::Wall => Clock::Wall,
            };
            let output = run_matrix(&cfg, clock)?;
            write_outputs(&output, &out)?;
            for row in &output.report.rows {
                eprintln!(
                    "{:<16} {:<9} K={:<3} T={:<3} faults={:<6} slowdown={:.3}",
                    row.workload, row.backend, row.k, row.threads, row.faults, row.slowdown_vs_baseline
                );
            }
            for o in report_thread_overhead(&output.report) {
                eprintln!(
                    "thread creation K={} T={}: {:.2}% of ORAM time",
                    o.k, o.threads, o.percent
                );
            }
            println!("{}", out.join("report.csv").display());
        }
        Command::Leak {
            secrets,
            backend,
            resident_limit,
        } => {
            let [left, right] = secrets[..] else {
                return Err(BenchError::Config("--secrets takes exactly two values".into()));
            };
            let kind = BackendKind::parse(&backend, 3)?;
            let cfg = PagerConfig::new(kind, OramConfig::new(12, 4, 4096)?).with_resident_limit(resident_limit);
            let report = leak_test(branch_secret, (left, right), &cfg)?;
            let record = VerdictRecord::from_leak("branch_secret", kind, &report);
            println!("{}", serde_json::to_string(&record)?);
        }
        Command::Simulate { formula, args } => println!("{}", simulate(formula, &args)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
