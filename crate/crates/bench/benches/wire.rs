use cdi_bench::{transfer_message, write_message};
use cdi_core::model::{CdiKey, ContainerId};
use cdi_core::wire::{decode, encode, recv_bulk, send_bulk};
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

fn codec(c: &mut Criterion) {
    let small = transfer_message();
    let frame = encode(&small).unwrap();
    c.bench_function("encode/transfer", |b| b.iter(|| encode(black_box(&small)).unwrap()));
    c.bench_function("decode/transfer", |b| b.iter(|| decode(black_box(&frame)).unwrap()));

    let mut g = c.benchmark_group("write");
    for size in [10 * 1024, 1024 * 1024] {
        let env = write_message(size);
        let frame = encode(&env).unwrap();
        g.throughput(Throughput::Bytes(size as u64));
        g.bench_with_input(BenchmarkId::new("encode", size), &env, |b, env| {
            b.iter(|| encode(black_box(env)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("decode", size), &frame, |b, f| {
            b.iter(|| decode(black_box(f)).unwrap())
        });
    }
    g.finish();
}

fn bulk(c: &mut Criterion) {
    let key = CdiKey::new("bulk").unwrap();
    let data = vec![0xa5u8; 1024 * 1024];
    let mut framed = Vec::with_capacity(data.len() + 64);
    send_bulk(&mut framed, 1, &key, ContainerId(1), &data, None).unwrap();
    let header = 4 + u32::from_be_bytes(framed[..4].try_into().unwrap()) as usize;
    let mut dest = vec![0u8; data.len()];
    let mut g = c.benchmark_group("bulk");
    g.throughput(Throughput::Bytes(data.len() as u64));
    g.bench_function("send/1MiB", |b| {
        b.iter(|| {
            framed.clear();
            send_bulk(&mut framed, 1, &key, ContainerId(1), black_box(&data), None).unwrap()
        })
    });
    g.bench_function("recv/1MiB", |b| {
        b.iter(|| recv_bulk(&mut &framed[header..], data.len() as u64, &mut dest).unwrap())
    });
    g.finish();
}

criterion_group!(benches, codec, bulk);
criterion_main!(benches);
