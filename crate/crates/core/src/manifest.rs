//! Snapshot trees: per-file chunk lists and the manifest that orders them.
//!
//! Canonical JSON field order is fixed by declaration order below:
//! `{"entries":[{"path","size","file_hash","chunks":[{"id","len"}]}]}`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{ChunkId, Digest, ManifestId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkRef {
    pub id: ChunkId,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Repository-relative, `/`-separated. Empty for a bare blob.
    pub path: String,
    pub size: u64,
    pub file_hash: Digest,
    pub chunks: Vec<ChunkRef>,
}

impl FileEntry {
    /// Checks the structural invariants that do not need chunk contents.
    pub fn check_shape(&self) -> Result<()> {
        let total: u64 = self.chunks.iter().map(|c| c.len).sum();
        if total != self.size {
            return Err(Error::Integrity(format!(
                "{}: chunk lengths sum to {} but size is {}",
                self.path, total, self.size
            )));
        }
        if (self.size == 0) != self.chunks.is_empty() {
            return Err(Error::Integrity(format!(
                "{}: empty chunk list iff empty file",
                self.path
            )));
        }
        Ok(())
    }
}

pub fn validate_path(path: &str) -> Result<()> {
    let bad = |why: &str| Err(Error::Validation(format!("invalid path {path:?}: {why}")));
    if path.is_empty() {
        return bad("empty");
    }
    if path.contains('\0') || path.contains('\\') {
        return bad("contains NUL or backslash");
    }
    for seg in path.split('/') {
        match seg {
            "" => return bad("empty segment"),
            "." | ".." => return bad("relative segment"),
            _ => {}
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    entries: Vec<FileEntry>,
}

impl Manifest {
    pub fn new(mut entries: Vec<FileEntry>) -> Result<Self> {
        entries.sort_by(|a, b| a.path.as_bytes().cmp(b.path.as_bytes()));
        for w in entries.windows(2) {
            if w[0].path == w[1].path {
                return Err(Error::Validation(format!("duplicate path {}", w[0].path)));
            }
        }
        for e in &entries {
            validate_path(&e.path)?;
            e.check_shape()?;
        }
        Ok(Manifest { entries })
    }

    pub fn entries(&self) -> &[FileEntry] {
        &self.entries
    }

    pub fn get(&self, path: &str) -> Option<&FileEntry> {
        self.entries
            .binary_search_by(|e| e.path.as_bytes().cmp(path.as_bytes()))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("manifest serialises")
    }

    pub fn id(&self) -> ManifestId {
        Digest::of(self.canonical_json().as_bytes())
    }

    /// Parses a stored manifest and checks it hashes to `expected`.
    pub fn from_stored(bytes: &[u8], expected: &ManifestId) -> Result<Self> {
        let actual = Digest::of(bytes);
        if &actual != expected {
            return Err(Error::Integrity(format!(
                "manifest {expected} hashes to {actual}"
            )));
        }
        let m: Manifest = serde_json::from_slice(bytes)?;
        Manifest::new(m.entries)
    }

    pub fn chunk_ids(&self) -> impl Iterator<Item = ChunkId> + '_ {
        self.entries.iter().flat_map(|e| e.chunks.iter().map(|c| c.id))
    }

    pub fn unique_chunks(&self) -> BTreeSet<ChunkId> {
        self.chunk_ids().collect()
    }

    pub fn total_size(&self) -> u64 {
        self.entries.iter().map(|e| e.size).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
