use std::fs;
use std::path::Path;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion, Throughput};
use dsr_core::{CheckinRequest, ChunkParams, ContentStore, Principal, Repo, RepoConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MIB: usize = 1 << 20;

fn noise(len: usize, seed: u64) -> Vec<u8> {
    let mut buf = vec![0u8; len];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut buf);
    buf
}

fn blob(c: &mut Criterion) {
    let data = noise(32 * MIB, 1);
    let mut g = c.benchmark_group("put_bytes_32MiB");
    g.sample_size(10).throughput(Throughput::Bytes(data.len() as u64));
    for parallel in [false, true] {
        let label = if parallel { "parallel" } else { "sequential" };
        g.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter_batched(
                || {
                    let d = tempfile::tempdir().unwrap();
                    let s = ContentStore::open(d.path(), ChunkParams::default())
                        .unwrap()
                        .with_parallel(parallel);
                    (d, s)
                },
                |(_d, s)| s.put_bytes(&data).unwrap(),
                BatchSize::PerIteration,
            )
        });
    }
    g.finish();
}

fn write_tree(dir: &Path) {
    for i in 0..32u64 {
        fs::write(dir.join(format!("f{i:02}.bin")), noise(MIB, 100 + i)).unwrap();
    }
}

fn checkin(c: &mut Criterion) {
    let src = tempfile::tempdir().unwrap();
    write_tree(src.path());
    let who = Principal::new("bench").unwrap();
    let mut g = c.benchmark_group("checkin_32x1MiB");
    g.sample_size(10).throughput(Throughput::Bytes(32 * MIB as u64));
    for parallel in [false, true] {
        let label = if parallel { "parallel" } else { "sequential" };
        g.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter_batched(
                || {
                    let d = tempfile::tempdir().unwrap();
                    let r = Repo::init(d.path(), &who, RepoConfig::default())
                        .unwrap()
                        .with_parallel(parallel);
                    (d, r)
                },
                |(_d, r)| r.checkin(&who, CheckinRequest::new("bench", src.path())).unwrap(),
                BatchSize::PerIteration,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, blob, checkin);
criterion_main!(benches);
