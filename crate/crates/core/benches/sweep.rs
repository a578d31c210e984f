use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use durable_core::cluster::{FaultPlan, Load, SimConfig};
use durable_core::speculation::SpeculationMode;
use durable_core::sweep::{sweep, sweep_sequential};
use durable_core::workloads::Workload;

fn configs(seeds: u64) -> Vec<SimConfig> {
    (1..=seeds)
        .flat_map(|seed| {
            [SpeculationMode::Conservative, SpeculationMode::Global].map(|mode| SimConfig {
                seed,
                mode,
                partitions: 8,
                nodes: 2,
                start_nodes: 2,
                workload: Workload::Bank { accounts: 10, initial_balance: 100, transfers: 30, max_amount: 50 },
                load: Load::Open { requests: 30, rate: 100.0 },
                faults: FaultPlan::Random { probability: 0.002, until: 0.8 },
                ..SimConfig::default()
            })
        })
        .collect()
}

fn bench_sweep(c: &mut Criterion) {
    let mut group = c.benchmark_group("sweep");
    group.sample_size(10);
    for seeds in [4, 16] {
        let cfgs = configs(seeds);
        group.bench_with_input(BenchmarkId::new("sequential", cfgs.len()), &cfgs, |b, cfgs| {
            b.iter(|| black_box(sweep_sequential(cfgs)))
        });
        group.bench_with_input(BenchmarkId::new("parallel", cfgs.len()), &cfgs, |b, cfgs| {
            b.iter(|| black_box(sweep(cfgs)))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_sweep);
criterion_main!(benches);
