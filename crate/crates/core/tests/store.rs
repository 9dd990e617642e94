mod support;

use std::collections::BTreeSet;

use dsr_core::chunker::{ChunkParams, KIB, MIB};
use dsr_core::fsutil::{FileLock, LockMode};
use dsr_core::manifest::{FileEntry, Manifest};
use dsr_core::store::ContentStore;
use dsr_core::{ChunkId, Error};
use proptest::prelude::*;
use support::seeded;

fn open(dir: &std::path::Path, params: ChunkParams) -> ContentStore {
    ContentStore::open(dir, params).unwrap()
}

fn exclusive(store: &ContentStore) -> FileLock {
    FileLock::acquire(&store.lock_path(), LockMode::Exclusive).unwrap()
}

#[test]
fn empty_and_single_byte_digests() {
    let d = tempfile::tempdir().unwrap();
    let s = open(d.path(), ChunkParams::default());
    let empty = s.put_bytes(b"").unwrap().entry;
    assert_eq!(empty.size, 0);
    assert!(empty.chunks.is_empty());
    assert_eq!(
        empty.file_hash.to_hex(),
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    );
    let a = s.put_bytes(b"a").unwrap().entry;
    assert_eq!(a.size, 1);
    assert_eq!(a.chunks.len(), 1);
    assert_eq!(
        a.chunks[0].id.to_hex(),
        "ca978112ca1bbdcafac231b39a23dc4da786eff8147c4e72b9807785afee48bb"
    );
    // The same digests from an implementation outside the crate.
    assert_eq!(support::sha256_hex(b"a"), a.chunks[0].id.to_hex());
    assert_eq!(support::sha256_hex(b""), empty.file_hash.to_hex());
}

#[test]
fn ten_mib_twice_stores_nothing_new() {
    let d = tempfile::tempdir().unwrap();
    let s = open(d.path(), ChunkParams::default());
    let data = seeded(7, 10 * MIB);
    let first = s.put_blob(&data[..]).unwrap();
    assert!(first.stats.new_chunks > 0);
    assert_eq!(first.stats.new_chunks, first.stats.chunks);
    let bytes = s.object_bytes().unwrap();
    let second = s.put_blob(&data[..]).unwrap();
    assert_eq!(second.stats.new_chunks, 0);
    assert_eq!(second.entry, first.entry);
    assert_eq!(s.object_bytes().unwrap(), bytes);
    assert_eq!(bytes, data.len() as u64);
}

#[test]
fn roundtrip_fixed_sizes() {
    let d = tempfile::tempdir().unwrap();
    let s = open(d.path(), ChunkParams::default());
    for data in [Vec::new(), vec![0x61], seeded(9, 10 * MIB)] {
        let e = s.put_blob(&data[..]).unwrap().entry;
        e.check_shape().unwrap();
        assert_eq!(e.chunks.iter().map(|c| c.len).sum::<u64>(), e.size);
        assert_eq!(s.get_bytes(&e).unwrap(), data);
    }
}

#[test]
fn missing_chunk_names_the_id() {
    let d = tempfile::tempdir().unwrap();
    let s = open(d.path(), ChunkParams::new(KIB, 4 * KIB, 16 * KIB).unwrap());
    let e = s.put_bytes(&seeded(1, 64 * KIB)).unwrap().entry;
    let victim = e.chunks[2].id;
    std::fs::remove_file(s.object_path(&victim)).unwrap();
    match s.get_bytes(&e) {
        Err(err @ Error::MissingChunk(id)) => {
            assert_eq!(id, victim);
            assert_eq!(err.code(), "CORRUPTION");
            assert!(err.to_string().contains(&victim.to_hex()));
        }
        other => panic!("expected missing chunk, got {other:?}"),
    }
}

#[test]
fn swapped_chunk_fails_integrity() {
    let d = tempfile::tempdir().unwrap();
    let s = open(d.path(), ChunkParams::new(KIB, 4 * KIB, 16 * KIB).unwrap());
    let mut e = s.put_bytes(&seeded(2, 64 * KIB)).unwrap().entry;
    // Swap in another stored chunk of the same length.
    let other = s.put_bytes(&seeded(3, 64 * KIB)).unwrap().entry;
    let (i, r) = e
        .chunks
        .iter()
        .enumerate()
        .find_map(|(i, c)| other.chunks.iter().find(|o| o.len == c.len).map(|o| (i, *o)))
        .unwrap_or_else(|| (0, other.chunks[0]));
    let old_len = e.chunks[i].len;
    e.chunks[i] = r;
    e.size = e.size - old_len + r.len;
    assert_eq!(s.get_bytes(&e).unwrap_err().code(), "INTEGRITY");
}

/// Brute-force reachability: every chunk referenced by a root manifest.
fn reachable(store: &ContentStore, roots: &BTreeSet<dsr_core::ManifestId>) -> BTreeSet<ChunkId> {
    let mut out = BTreeSet::new();
    for r in roots {
        for e in store.load_manifest(r).unwrap().entries() {
            for c in &e.chunks {
                out.insert(c.id);
            }
        }
    }
    out
}

fn manifest_of(store: &ContentStore, files: &[(&str, &[u8])]) -> dsr_core::ManifestId {
    let entries: Vec<FileEntry> = files
        .iter()
        .map(|(p, d)| {
            let mut e = store.put_bytes(d).unwrap().entry;
            e.path = p.to_string();
            e
        })
        .collect();
    store.put_manifest(&Manifest::new(entries).unwrap()).unwrap()
}

#[test]
fn gc_deletes_exactly_the_unreachable_chunks() {
    let d = tempfile::tempdir().unwrap();
    let s = open(d.path(), ChunkParams::new(KIB, 4 * KIB, 16 * KIB).unwrap());
    let a = seeded(20, 200 * KIB);
    let b = seeded(21, 150 * KIB);
    let m1 = manifest_of(&s, &[("a.bin", &a)]);
    let m2 = manifest_of(&s, &[("a.bin", &a), ("b.bin", &b)]);
    let all = s.list_chunks().unwrap();
    let lock = exclusive(&s);

    let roots = BTreeSet::from([m1, m2]);
    assert_eq!(s.gc(&roots, &lock).unwrap().deleted, 0);

    let roots = BTreeSet::from([m1]);
    let keep = reachable(&s, &roots);
    let expected_deleted: BTreeSet<ChunkId> = all.difference(&keep).copied().collect();
    let b_unique: BTreeSet<ChunkId> = s
        .load_manifest(&m2)
        .unwrap()
        .get("b.bin")
        .unwrap()
        .chunks
        .iter()
        .map(|c| c.id)
        .filter(|id| !keep.contains(id))
        .collect();
    assert_eq!(expected_deleted, b_unique);
    let report = s.gc(&roots, &lock).unwrap();
    assert_eq!(report.deleted, expected_deleted.len());
    assert_eq!(s.list_chunks().unwrap(), keep);
    assert_eq!(s.gc(&roots, &lock).unwrap().deleted, 0);

    let report = s.gc(&BTreeSet::new(), &lock).unwrap();
    assert_eq!(report.deleted, keep.len());
    assert!(s.list_chunks().unwrap().is_empty());
}

#[test]
fn gc_without_exclusive_lock_is_refused() {
    let d = tempfile::tempdir().unwrap();
    let s = open(d.path(), ChunkParams::default());
    let shared = FileLock::acquire(&s.lock_path(), LockMode::Shared).unwrap();
    assert_eq!(s.gc(&BTreeSet::new(), &shared).unwrap_err().code(), "LOCKED");
}

#[test]
fn parallel_and_sequential_agree() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let p = ChunkParams::new(4 * KIB, 16 * KIB, 64 * KIB).unwrap();
    let par = open(d1.path(), p).with_parallel(true);
    let seq = open(d2.path(), p).with_parallel(false);
    let data = seeded(4, 3 * MIB);
    let a = par.put_bytes(&data).unwrap();
    let b = seq.put_bytes(&data).unwrap();
    assert_eq!(a, b);
    assert_eq!(par.list_chunks().unwrap(), seq.list_chunks().unwrap());
}

#[test]
fn concurrent_puts_of_the_same_content() {
    let d = tempfile::tempdir().unwrap();
    let s = open(d.path(), ChunkParams::new(KIB, 4 * KIB, 16 * KIB).unwrap());
    let data = seeded(5, 512 * KIB);
    std::thread::scope(|sc| {
        for _ in 0..8 {
            sc.spawn(|| s.put_bytes(&data).unwrap());
        }
    });
    assert!(s.verify_objects().unwrap().is_empty());
    let e = s.put_bytes(&data).unwrap();
    assert_eq!(e.stats.new_chunks, 0);
    assert_eq!(s.get_bytes(&e.entry).unwrap(), data);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn roundtrip_random_sizes(seed in any::<u64>(), len in 0usize..8 * MIB) {
        let d = tempfile::tempdir().unwrap();
        let s = open(d.path(), ChunkParams::new(64 * KIB, 256 * KIB, MIB).unwrap());
        let data = seeded(seed, len);
        let e = s.put_blob(&data[..]).unwrap().entry;
        prop_assert_eq!(e.size, len as u64);
        let chunk_bytes: u64 = e.chunks.iter().map(|c| c.len).sum();
        prop_assert_eq!(chunk_bytes, e.size);
        prop_assert_eq!(s.get_bytes(&e).unwrap(), data);
    }
}
