//! Deduplicating content-addressed object store on the local filesystem.
//!
//! Layout under the repository directory:
//!
//! ```text
//! objects/<2 hex>/<62 hex>   raw chunk bytes, named by their SHA-256
//! manifests/<64 hex>.json    canonical manifest JSON
//! tmp/                       staging area for atomic renames
//! ```
//!
//! Other backends would slot in behind the same surface; only the filesystem
//! one exists.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::chunker::{ChunkParams, StreamChunker, MIB};
use crate::error::{Error, IoContext, Result};
use crate::fsutil::{self, FileLock, LockMode};
use crate::hash::{ChunkId, Digest, Hasher, ManifestId};
use crate::manifest::{ChunkRef, FileEntry, Manifest};
use crate::par;

const BATCH_BYTES: usize = 32 * MIB;
const BATCH_CHUNKS: usize = 32;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PutStats {
    pub chunks: usize,
    pub new_chunks: usize,
    pub new_bytes: u64,
}

impl std::ops::AddAssign for PutStats {
    fn add_assign(&mut self, o: Self) {
        self.chunks += o.chunks;
        self.new_chunks += o.new_chunks;
        self.new_bytes += o.new_bytes;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PutOutcome {
    pub entry: FileEntry,
    pub stats: PutStats,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GcReport {
    pub scanned: usize,
    pub retained: usize,
    pub deleted: usize,
    pub bytes_freed: u64,
}

#[derive(Debug, Clone)]
pub struct ContentStore {
    root: PathBuf,
    params: ChunkParams,
    parallel: bool,
    sync_chunks: bool,
}

impl ContentStore {
    pub fn open(root: &Path, params: ChunkParams) -> Result<Self> {
        params.validate()?;
        for d in ["objects", "manifests", "tmp"] {
            let p = root.join(d);
            fs::create_dir_all(&p).ctx(|| format!("create {}", p.display()))?;
        }
        Ok(ContentStore {
            root: root.to_owned(),
            params,
            parallel: true,
            sync_chunks: false,
        })
    }

    /// Turns data-parallel hashing and I/O on or off. Has no effect when the
    /// crate is built without the `parallel` feature.
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    /// fsync each chunk before it is renamed into place.
    pub fn with_sync_chunks(mut self, sync: bool) -> Self {
        self.sync_chunks = sync;
        self
    }

    pub fn params(&self) -> &ChunkParams {
        &self.params
    }

    pub fn parallel(&self) -> bool {
        self.parallel
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn tmp_dir(&self) -> PathBuf {
        self.root.join("tmp")
    }

    pub fn lock_path(&self) -> PathBuf {
        self.root.join("lock")
    }

    fn objects_dir(&self) -> PathBuf {
        self.root.join("objects")
    }

    pub fn object_path(&self, id: &ChunkId) -> PathBuf {
        let hex = id.to_hex();
        self.objects_dir().join(&hex[..2]).join(&hex[2..])
    }

    fn manifest_path(&self, id: &ManifestId) -> PathBuf {
        self.root.join("manifests").join(format!("{id}.json"))
    }

    pub fn has_chunk(&self, id: &ChunkId) -> bool {
        self.object_path(id).is_file()
    }

    /// Stores one chunk; returns whether it was newly written.
    pub fn write_chunk(&self, data: &[u8]) -> Result<(ChunkRef, bool)> {
        let id = Digest::of(data);
        let r = ChunkRef {
            id,
            len: data.len() as u64,
        };
        let path = self.object_path(&id);
        if path.is_file() {
            return Ok((r, false));
        }
        fsutil::atomic_write(&path, data, &self.tmp_dir(), self.sync_chunks)?;
        Ok((r, true))
    }

    fn write_batch(
        &self,
        batch: &mut Vec<Vec<u8>>,
        chunks: &mut Vec<ChunkRef>,
        stats: &mut PutStats,
    ) -> Result<()> {
        let written = par::try_map(batch, self.parallel, |c| self.write_chunk(c))?;
        for (r, new) in written {
            stats.chunks += 1;
            if new {
                stats.new_chunks += 1;
                stats.new_bytes += r.len;
            }
            chunks.push(r);
        }
        batch.clear();
        Ok(())
    }

    /// Chunks and stores a byte stream. The returned entry has an empty path.
    pub fn put_blob<R: Read>(&self, reader: R) -> Result<PutOutcome> {
        let mut hasher = Hasher::new();
        let mut size = 0u64;
        let mut chunks = Vec::new();
        let mut stats = PutStats::default();
        let mut batch: Vec<Vec<u8>> = Vec::new();
        let mut batch_bytes = 0;
        for chunk in StreamChunker::new(reader, self.params)? {
            let chunk = chunk.ctx(|| "read blob".into())?;
            hasher.update(&chunk);
            size += chunk.len() as u64;
            batch_bytes += chunk.len();
            batch.push(chunk);
            if batch_bytes >= BATCH_BYTES || batch.len() >= BATCH_CHUNKS {
                self.write_batch(&mut batch, &mut chunks, &mut stats)?;
                batch_bytes = 0;
            }
        }
        self.write_batch(&mut batch, &mut chunks, &mut stats)?;
        let entry = FileEntry {
            path: String::new(),
            size,
            file_hash: hasher.finish(),
            chunks,
        };
        Ok(PutOutcome { entry, stats })
    }

    pub fn put_bytes(&self, data: &[u8]) -> Result<PutOutcome> {
        self.put_blob(data)
    }

    /// Reads a chunk and checks it against its address.
    pub fn read_chunk(&self, r: &ChunkRef) -> Result<Vec<u8>> {
        let path = self.object_path(&r.id);
        let data = match fs::read(&path) {
            Ok(d) => d,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(Error::MissingChunk(r.id))
            }
            Err(e) => return Err(Error::io(format!("read {}", path.display()), e)),
        };
        if Digest::of(&data) != r.id {
            return Err(Error::Corruption(format!(
                "object {} does not hash to its name",
                r.id
            )));
        }
        if data.len() as u64 != r.len {
            return Err(Error::Integrity(format!(
                "chunk {} is {} bytes, entry says {}",
                r.id,
                data.len(),
                r.len
            )));
        }
        Ok(data)
    }

    /// Streams the file's bytes into `out` and verifies the whole-file hash.
    /// On error `out` may hold a prefix; callers that need all-or-nothing
    /// write to a temporary first.
    pub fn get_blob<W: Write>(&self, entry: &FileEntry, out: &mut W) -> Result<()> {
        entry.check_shape()?;
        let mut hasher = Hasher::new();
        for r in &entry.chunks {
            let data = self.read_chunk(r)?;
            hasher.update(&data);
            out.write_all(&data).ctx(|| "write blob".into())?;
        }
        let got = hasher.finish();
        if got != entry.file_hash {
            return Err(Error::Integrity(format!(
                "{}: assembled content hashes to {got}, expected {}",
                if entry.path.is_empty() { "<blob>" } else { &entry.path },
                entry.file_hash
            )));
        }
        Ok(())
    }

    pub fn get_bytes(&self, entry: &FileEntry) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(entry.size as usize);
        self.get_blob(entry, &mut out)?;
        Ok(out)
    }

    /// Materialises `entry` at `dest`, renaming into place only after the
    /// content verified.
    pub fn get_to_file(&self, entry: &FileEntry, dest: &Path) -> Result<()> {
        let dir = dest.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(dir).ctx(|| format!("create {}", dir.display()))?;
        let mut tmp =
            tempfile::NamedTempFile::new_in(dir).ctx(|| format!("temp in {}", dir.display()))?;
        {
            let mut w = io::BufWriter::new(tmp.as_file_mut());
            self.get_blob(entry, &mut w)?;
            w.flush().ctx(|| format!("write {}", dest.display()))?;
        }
        tmp.persist(dest)
            .map_err(|e| Error::io(format!("rename into {}", dest.display()), e.error))?;
        Ok(())
    }

    pub fn put_manifest(&self, m: &Manifest) -> Result<ManifestId> {
        let id = m.id();
        let path = self.manifest_path(&id);
        if !path.is_file() {
            fsutil::atomic_write(&path, m.canonical_json().as_bytes(), &self.tmp_dir(), true)?;
        }
        Ok(id)
    }

    pub fn load_manifest(&self, id: &ManifestId) -> Result<Manifest> {
        let path = self.manifest_path(id);
        match fs::read(&path) {
            Ok(bytes) => Manifest::from_stored(&bytes, id),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                Err(Error::Corruption(format!("missing manifest {id}")))
            }
            Err(e) => Err(Error::io(format!("read {}", path.display()), e)),
        }
    }

    pub fn has_manifest(&self, id: &ManifestId) -> bool {
        self.manifest_path(id).is_file()
    }

    fn prefixes(&self) -> Result<Vec<String>> {
        Ok(fsutil::list_names(&self.objects_dir())?
            .into_iter()
            .filter(|n| n.len() == 2)
            .collect())
    }

    /// Every object file as `(path, parsed id)`; names that are not digests
    /// come back with `None`.
    pub fn list_objects(&self) -> Result<Vec<(PathBuf, Option<ChunkId>)>> {
        let per_prefix = par::try_map(&self.prefixes()?, self.parallel, |prefix| {
            let dir = self.objects_dir().join(prefix);
            Ok::<_, Error>(
                fsutil::list_names(&dir)?
                    .into_iter()
                    .map(|rest| {
                        let id = format!("{prefix}{rest}").parse().ok();
                        (dir.join(rest), id)
                    })
                    .collect::<Vec<_>>(),
            )
        })?;
        Ok(per_prefix.into_iter().flatten().collect())
    }

    pub fn list_chunks(&self) -> Result<BTreeSet<ChunkId>> {
        Ok(self
            .list_objects()?
            .into_iter()
            .filter_map(|(_, id)| id)
            .collect())
    }

    /// Total bytes held in `objects/`.
    pub fn object_bytes(&self) -> Result<u64> {
        let sizes = par::try_map(&self.list_objects()?, self.parallel, |(p, _)| {
            fs::metadata(p)
                .map(|m| m.len())
                .ctx(|| format!("stat {}", p.display()))
        })?;
        Ok(sizes.into_iter().sum())
    }

    /// Object files whose content does not hash to their name.
    pub fn verify_objects(&self) -> Result<Vec<PathBuf>> {
        let checked = par::try_map(&self.list_objects()?, self.parallel, |(p, id)| {
            let ok = match id {
                Some(id) => {
                    let mut f = File::open(p).ctx(|| format!("open {}", p.display()))?;
                    let mut h = Hasher::new();
                    let mut buf = vec![0u8; 256 * 1024];
                    loop {
                        let n = f.read(&mut buf).ctx(|| format!("read {}", p.display()))?;
                        if n == 0 {
                            break;
                        }
                        h.update(&buf[..n]);
                    }
                    h.finish() == *id
                }
                None => false,
            };
            Ok::<_, Error>((p.clone(), ok))
        })?;
        Ok(checked
            .into_iter()
            .filter(|(_, ok)| !ok)
            .map(|(p, _)| p)
            .collect())
    }

    /// Deletes every chunk not reachable from `live_roots`. The caller must
    /// hold the exclusive repository lock.
    pub fn gc(&self, live_roots: &BTreeSet<ManifestId>, lock: &FileLock) -> Result<GcReport> {
        if lock.mode() != LockMode::Exclusive || lock.path() != self.lock_path() {
            return Err(Error::Concurrency(
                "gc requires the exclusive repository lock".into(),
            ));
        }
        let roots: Vec<ManifestId> = live_roots.iter().copied().collect();
        let marked = par::try_map(&roots, self.parallel, |id| {
            Ok::<_, Error>(self.load_manifest(id)?.unique_chunks())
        })?;
        let live: BTreeSet<ChunkId> = marked.into_iter().flatten().collect();

        let objects = self.list_objects()?;
        let swept = par::try_map(&objects, self.parallel, |(path, id)| {
            match id {
                Some(id) if live.contains(id) => Ok::<_, Error>((false, 0)),
                Some(_) => {
                    let len = fs::metadata(path).map(|m| m.len()).unwrap_or(0);
                    fs::remove_file(path).ctx(|| format!("remove {}", path.display()))?;
                    Ok((true, len))
                }
                // Not ours; leave it alone.
                None => Ok((false, 0)),
            }
        })?;
        let mut report = GcReport {
            scanned: objects.len(),
            ..Default::default()
        };
        for (deleted, len) in swept {
            if deleted {
                report.deleted += 1;
                report.bytes_freed += len;
            } else {
                report.retained += 1;
            }
        }
        // Staging files are orphans once every writer is excluded.
        for name in fsutil::list_names(&self.tmp_dir())? {
            let _ = fs::remove_file(self.tmp_dir().join(name));
        }
        Ok(report)
    }
}
