use std::sync::Arc;

use basilic_bench::{attacked, honest, keyed_signers, signers};
use basilic_core::analysis::min_blockdepth;
use basilic_core::crypto::{Ed25519, KeyedHash, SignatureScheme};
use basilic_core::harness::{run, ProtocolKind};
use basilic_core::ledger::generate_fork;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

fn signatures(c: &mut Criterion) {
    let mut g = c.benchmark_group("signature");
    let msg = vec![0x5a; 256];
    let schemes: [(&str, Arc<dyn SignatureScheme>); 2] =
        [("keyed-hash", Arc::new(KeyedHash::new())), ("ed25519", Arc::new(Ed25519))];
    for (name, scheme) in schemes {
        let (ring, s) = signers(scheme, 1);
        let sig = s[0].sign_raw(&msg);
        g.bench_function(BenchmarkId::new("sign", name), |b| b.iter(|| s[0].sign_raw(black_box(&msg))));
        g.bench_function(BenchmarkId::new("verify", name), |b| {
            b.iter(|| ring.verify_raw(s[0].id, black_box(&msg), &sig))
        });
    }
    g.finish();
}

fn ledger_merge(c: &mut Criterion) {
    let (_, s) = keyed_signers(4);
    let mut g = c.benchmark_group("ledger-merge");
    for txs in [10, 40] {
        let fork = generate_fork(&s, 3, txs);
        g.throughput(Throughput::Elements(fork.all_txs().len() as u64));
        g.bench_with_input(BenchmarkId::from_parameter(txs), &fork, |b, f| b.iter(|| f.replay(false)));
    }
    g.finish();
}

fn instances(c: &mut Criterion) {
    let mut g = c.benchmark_group("instance");
    g.sample_size(10);
    for n in [4, 10, 16] {
        let binary = honest(ProtocolKind::Binary, n);
        g.bench_with_input(BenchmarkId::new("binary", n), &binary, |b, s| b.iter(|| run(s, 1)));
        let multi = honest(ProtocolKind::Multi, n);
        g.bench_with_input(BenchmarkId::new("multi", n), &multi, |b, s| b.iter(|| run(s, 1)));
    }
    let s = attacked(10);
    g.bench_function("multi-attacked/10", |b| b.iter(|| run(&s, 1)));
    g.finish();
}

fn blockdepth(c: &mut Criterion) {
    c.bench_function("blockdepth/a=51", |b| b.iter(|| min_blockdepth(black_box(51.0), 0.1, 0.9)));
}

criterion_group!(benches, signatures, ledger_merge, instances, blockdepth);
criterion_main!(benches);
