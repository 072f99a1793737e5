//! Per-write cost of the base engine and of parallel refresh under each
//! dispatch. Build with `--no-default-features` to measure the sequential
//! fallback of the pool dispatch and of snapshotting.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use woram::engine::WoramInstance;
use woram::parallel::{Dispatch, ParallelInstance};
use woram::{OramConfig, SealKeys};

const PAGE: usize = 4096;

fn writes(c: &mut Criterion) {
    let build = if woram::par::is_parallel_available() {
        "rayon"
    } else {
        "sequential"
    };
    let mut group = c.benchmark_group(format!("write/{build}"));
    group.sample_size(20);
    for k in [3usize, 7, 15] {
        let cfg = OramConfig::for_ratio(k, 60, PAGE).unwrap();
        let page = vec![0xa5u8; PAGE];

        let mut base = WoramInstance::init(cfg, SealKeys::from_seed(1)).unwrap();
        let mut addr = 0;
        group.bench_with_input(BenchmarkId::new("base", k), &k, |b, _| {
            b.iter(|| {
                addr = (addr + 1) % cfg.main_count();
                base.oram_write(addr, &page).unwrap()
            })
        });

        for (label, dispatch) in [
            ("sequential", Dispatch::Sequential),
            ("pool", Dispatch::Pool),
            ("spawn", Dispatch::SpawnPerRound),
        ] {
            let mut par = ParallelInstance::init(cfg, SealKeys::from_seed(1), k, dispatch).unwrap();
            let mut addr = 0;
            group.bench_with_input(BenchmarkId::new(label, k), &k, |b, _| {
                b.iter(|| {
                    addr = (addr + 1) % cfg.main_count();
                    par.parallel_write(addr, &page).unwrap()
                })
            });
        }
    }
    group.finish();
}

fn snapshots(c: &mut Criterion) {
    let cfg = OramConfig::for_ratio(15, 1024, PAGE).unwrap();
    let w = WoramInstance::init(cfg, SealKeys::from_seed(1)).unwrap();
    let store = woram::ObliviousRam::store(&w).clone();
    c.bench_function(&format!("snapshot/{}_slots", cfg.slot_count()), |b| {
        b.iter(|| store.snapshot().unwrap())
    });
}

criterion_group!(benches, writes, snapshots);
criterion_main!(benches);
