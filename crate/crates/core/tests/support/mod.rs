#![allow(dead_code)]

pub mod gear_oracle;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dsr_core::{ChunkParams, Principal, Repo, RepoConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

/// Published test fixture: block `i` is `SHA-256(label || i as u64 LE)`,
/// concatenated and truncated to `len`.
pub fn fixture_bytes(label: &str, len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len + 32);
    let mut i = 0u64;
    while out.len() < len {
        let mut h = Sha256::new();
        h.update(label.as_bytes());
        h.update(i.to_le_bytes());
        out.extend_from_slice(&h.finalize());
        i += 1;
    }
    out.truncate(len);
    out
}

pub fn seeded(seed: u64, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
    v
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

pub fn p(name: &str) -> Principal {
    Principal::new(name).unwrap()
}

pub fn root() -> Principal {
    p("root")
}

pub fn small_params() -> ChunkParams {
    ChunkParams::new(2048, 8192, 32768).unwrap()
}

pub fn new_repo_with(params: ChunkParams) -> (TempDir, Repo) {
    let dir = tempfile::tempdir().unwrap();
    let config = RepoConfig {
        chunking: params,
        ..RepoConfig::default()
    };
    let repo = Repo::init(dir.path(), &root(), config).unwrap();
    (dir, repo)
}

pub fn new_repo() -> (TempDir, Repo) {
    new_repo_with(small_params())
}

pub fn write_tree(dir: &Path, files: &[(&str, &[u8])]) {
    fs::create_dir_all(dir).unwrap();
    for (path, data) in files {
        let p = dir.join(path);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, data).unwrap();
    }
}

/// Fresh worktree under `base` holding `files`.
pub fn tree(base: &Path, name: &str, files: &[(&str, &[u8])]) -> std::path::PathBuf {
    let d = base.join(name);
    write_tree(&d, files);
    d
}

pub fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in walkdir::WalkDir::new(dir).min_depth(1) {
        let e = e.unwrap();
        if e.file_type().is_file() {
            let rel = e.path().strip_prefix(dir).unwrap().to_str().unwrap().replace('\\', "/");
            out.insert(rel, fs::read(e.path()).unwrap());
        }
    }
    out
}

/// Every object file's name versus the SHA-256 of its content.
pub fn corrupt_objects(repo: &Repo) -> Vec<String> {
    let mut bad = Vec::new();
    let objects = repo.dir().join("objects");
    for e in walkdir::WalkDir::new(&objects).min_depth(2).max_depth(2) {
        let e = e.unwrap();
        if !e.file_type().is_file() {
            continue;
        }
        let name = format!(
            "{}{}",
            e.path().parent().unwrap().file_name().unwrap().to_str().unwrap(),
            e.file_name().to_str().unwrap()
        );
        if sha256_hex(&fs::read(e.path()).unwrap()) != name {
            bad.push(name);
        }
    }
    bad
}
