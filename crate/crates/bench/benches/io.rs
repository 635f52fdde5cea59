use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use ensemble_uq::volume::{read_volume, LabelMap};
use ensemble_uq_bench::label_ensemble;
use std::hint::black_box;

fn nifti(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let map = label_ensemble(64, 5, 1, 0.0, 3).remove(0);
    let mut group = c.benchmark_group("nifti");
    group.throughput(Throughput::Elements(64 * 64 * 64));
    for name in ["map.nii", "map.nii.gz"] {
        let path = dir.path().join(name);
        group.bench_function(format!("write {name}"), |b| {
            b.iter(|| map.write(&path).unwrap())
        });
        map.write(&path).unwrap();
        group.bench_function(format!("read {name}"), |b| {
            b.iter(|| {
                black_box(LabelMap::from_grid(&read_volume(&path).unwrap(), Some(5)).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, nifti);
criterion_main!(benches);
