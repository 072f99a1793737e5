use std::process::Command;

use woram::pager::WorkloadSpec;
use woram::parallel::Dispatch;
use woram_bench::{report_thread_overhead, run_matrix, write_outputs, BenchConfig, BenchReport, Clock, CSV_HEADER};

fn small(backends: &[&str], k_values: &[usize]) -> BenchConfig {
    BenchConfig {
        workloads: vec![WorkloadSpec::RandomWrites { ops: 3000, pages: 60 }],
        backends: backends.iter().map(|s| s.to_string()).collect(),
        k_values: k_values.to_vec(),
        page_size: 64,
        fault_budget: Some(300),
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn two_backend_matrix_has_two_rows_and_amplified_writes() {
    let out = run_matrix(&small(&["no_oram", "det"], &[3]), Clock::Virtual).unwrap();
    let rows = &out.report.rows;
    assert_eq!(rows.len(), 2);
    let det = out.report.row("random_writes", "det", 3).unwrap();
    assert!(det.evictions > 0);
    assert_eq!(det.slot_writes, 4 * det.evictions);
    assert_eq!(
        out.report
            .row("random_writes", "no_oram", 3)
            .unwrap()
            .slowdown_vs_baseline,
        1.0
    );
}

#[test]
fn k_sweep_writes_k_plus_one_slots_per_eviction() {
    let out = run_matrix(&small(&["det"], &[3, 7, 15]), Clock::Virtual).unwrap();
    let per_eviction: Vec<u64> = [3, 7, 15]
        .iter()
        .map(|&k| {
            let r = out.report.row("random_writes", "det", k).unwrap();
            r.slot_writes / r.evictions
        })
        .collect();
    assert_eq!(per_eviction, [4, 8, 16]);
    let slowdowns: Vec<f64> = [3, 7, 15]
        .iter()
        .map(|&k| out.report.row("random_writes", "det", k).unwrap().slowdown_vs_baseline)
        .collect();
    assert!(slowdowns.windows(2).all(|w| w[0] <= w[1]), "{slowdowns:?}");
}

#[test]
fn equal_fault_budget_across_cells() {
    let out = run_matrix(
        &small(&["no_oram", "det", "eager", "parallel"], &[3, 7]),
        Clock::Virtual,
    )
    .unwrap();
    assert!(out.report.rows.iter().all(|r| r.faults == 300));
    let evictions: Vec<u64> = out.report.rows.iter().map(|r| r.evictions).collect();
    assert!(evictions.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn virtual_report_is_reproducible() {
    let cfg = small(&["det", "eager", "parallel"], &[3, 7]);
    let strip = |r: &BenchReport| -> String {
        r.to_csv()
            .unwrap()
            .lines()
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                // wall_time, oram_time and spawn_time are machine dependent
                [&f[..9], &f[12..]].concat().join(",")
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    let a = run_matrix(&cfg, Clock::Virtual).unwrap();
    let mut parallel = cfg.clone();
    parallel.parallel_cells = true;
    let b = run_matrix(&parallel, Clock::Virtual).unwrap();
    assert_eq!(strip(&a.report), strip(&b.report));
}

#[test]
fn outputs_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_matrix(&small(&["det", "parallel:2"], &[3]), Clock::Virtual).unwrap();
    write_outputs(&out, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), CSV_HEADER.join(","));
    assert_eq!(csv.lines().count(), 1 + 3);
    let json: BenchReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json.rows.len(), 3);
    assert_eq!(json.rows[2].threads, 2);
    let trace = std::fs::read_to_string(dir.path().join("traces/random_writes_det_k3_t1.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    assert_eq!(first, serde_json::json!({"seq": 0, "kind": "w", "slot": 60}));
}

#[test]
fn thread_overhead_is_reported_per_parallel_row() {
    let cfg = small(&["parallel"], &[3, 7]);
    let pooled = run_matrix(&cfg, Clock::Wall).unwrap();
    let overhead = report_thread_overhead(&pooled.report);
    assert_eq!(overhead.iter().map(|o| o.k).collect::<Vec<_>>(), [3, 7]);
    assert!(overhead.iter().all(|o| o.percent == 0.0));

    let spawning = BenchConfig {
        dispatch: Dispatch::SpawnPerRound,
        ..cfg
    };
    let report = run_matrix(&spawning, Clock::Wall).unwrap().report;
    for o in report_thread_overhead(&report) {
        assert!(o.percent > 0.0 && o.percent <= 100.0, "{o:?}");
    }
}

fn bench(args: &[&str]) -> (bool, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_bench")).args(args).output().unwrap();
    (
        out.status.success(),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

#[test]
fn cli_simulate() {
    assert_eq!(
        bench(&["simulate", "--formula", "parallel", "--args", "100", "40", "4"])
            .1
            .trim(),
        "70"
    );
    assert_eq!(
        bench(&["simulate", "--formula", "eager", "--args", "100", "10:4", "10:4"])
            .1
            .trim(),
        "92"
    );
    assert_eq!(
        bench(&["simulate", "--formula", "eager", "--args", "100", "2:4", "2:4"])
            .1
            .trim(),
        "96"
    );
    let (ok, _, err) = bench(&["simulate", "--formula", "parallel", "--args", "100", "140", "2"]);
    assert!(!ok && err.contains("domain"));
}

#[test]
fn cli_leak_verdicts() {
    for (backend, verdict) in [
        ("no_oram", "distinguishable"),
        ("det", "indistinguishable"),
        ("eager", "indistinguishable"),
        ("parallel", "indistinguishable"),
    ] {
        let (ok, out, _) = bench(&["leak", "--secrets", "1,2", "--backend", backend]);
        assert!(ok);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["verdict"], verdict, "{backend}");
        assert_eq!(v["test"], "branch_secret");
    }
    let (ok, _, err) = bench(&["leak", "--secrets", "0,1", "--backend", "det"]);
    assert!(!ok && err.contains("evict different page counts"), "{err}");
}

#[test]
fn cli_run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cfg.json");
    std::fs::write(
        &config,
        r#"{"workloads":[{"kind":"scan","pages":40,"passes":2}],"backends":["det","parallel"],"k_values":[3],"page_size":64,"fault_budget":100}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let (ok, _, err) = bench(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "3",
        "--threads",
        "2",
    ]);
    assert!(ok, "{err}");
    let report: BenchReport = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.seed, 3);
    assert_eq!(
        report.rows.iter().map(|r| r.backend.as_str()).collect::<Vec<_>>(),
        ["no_oram", "det", "parallel"]
    );
    assert_eq!(report.rows[2].threads, 2);
    assert!(out.join("traces").read_dir().unwrap().count() == 3);

    std::fs::write(&config, r#"{"k_values": [3], "unknown": true}"#).unwrap();
    let (ok, _, err) = bench(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!ok && err.contains("config error"), "{err}");
}
