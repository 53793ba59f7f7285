use cdi_core::cluster::LocalCluster;
use cdi_core::model::{CdiKey, ContainerId, ReturnCode};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

/// Ownership round trip A -> B -> A between two containers, on one host and
/// across two hosts.
fn round_trip(c: &mut Criterion) {
    let mut g = c.benchmark_group("handoff");
    g.sample_size(30);
    for (name, hosts) in [("same-host", 1), ("cross-host", 2)] {
        let cluster = LocalCluster::start(hosts).unwrap();
        let a = cluster.session(1, 0).unwrap();
        let b = cluster.session(2, hosts - 1).unwrap();
        for size in [10 * 1024u64, 1024 * 1024] {
            let key = CdiKey::new(format!("{name}-{size}")).unwrap();
            let (code, ha) = a.create(&key, size).unwrap();
            assert_eq!(code, ReturnCode::Success);
            let mut ha = ha.unwrap();
            let mut hb = b.use_key(&key).unwrap().1.unwrap();
            g.bench_with_input(BenchmarkId::new(name, size), &size, |bench, _| {
                bench.iter(|| {
                    ha.transfer(ContainerId(2)).unwrap();
                    hb.access().unwrap();
                    hb.transfer(ContainerId(1)).unwrap();
                    ha.access().unwrap();
                })
            });
            ha.destroy().unwrap();
        }
    }
    g.finish();
}

criterion_group!(benches, round_trip);
criterion_main!(benches);
