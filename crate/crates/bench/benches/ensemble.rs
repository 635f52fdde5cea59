use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use ensemble_uq::ensemble::{
    onehot_uncertainty, run_label_members, EnsembleOptions, UncertaintyOptions, UncertaintyRoute,
    VarianceAccumulator, VoteTable,
};
use ensemble_uq::fuse_majority;
use ensemble_uq::volume::onehot_view;
use ensemble_uq_bench::label_ensemble;
use std::hint::black_box;

fn uncertainty(c: &mut Criterion) {
    let mut group = c.benchmark_group("uncertainty");
    for n in [32, 64] {
        let members = label_ensemble(n, 5, 6, 0.2, 1);
        group.throughput(Throughput::Elements((n * n * n) as u64));
        group.bench_with_input(BenchmarkId::new("welford", n), &members, |b, m| {
            b.iter(|| {
                let mut acc = VarianceAccumulator::new(m[0].geometry().clone(), 5);
                for member in m {
                    acc.accumulate(&onehot_view(member)).unwrap();
                }
                black_box(
                    acc.voxel_uncertainty(&UncertaintyOptions::default())
                        .unwrap(),
                )
            })
        });
        group.bench_with_input(BenchmarkId::new("vote-table", n), &members, |b, m| {
            b.iter(|| {
                let table = VoteTable::from_members(m).unwrap();
                black_box(onehot_uncertainty(&table, &UncertaintyOptions::default()).unwrap())
            })
        });
    }
    group.finish();
}

fn fusion(c: &mut Criterion) {
    let mut group = c.benchmark_group("fusion");
    let members = label_ensemble(64, 5, 6, 0.2, 2);
    group.throughput(Throughput::Elements(64 * 64 * 64));
    group.bench_function("majority-64", |b| {
        b.iter(|| black_box(fuse_majority(&members).unwrap()))
    });
    for (name, route) in [
        ("pipeline-vote", UncertaintyRoute::Auto),
        ("pipeline-welford", UncertaintyRoute::Welford),
    ] {
        let opts = EnsembleOptions {
            route,
            ..EnsembleOptions::default()
        };
        group.bench_function(name, |b| {
            b.iter(|| {
                black_box(
                    run_label_members(members.clone(), &opts)
                        .unwrap()
                        .report
                        .mean_uncertainty,
                )
            })
        });
    }
    group.finish();
}

criterion_group!(benches, uncertainty, fusion);
criterion_main!(benches);
