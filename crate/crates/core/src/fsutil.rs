//! Crash-safe file primitives: temp-write-then-rename, journal appends and
//! advisory locks.

use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, IoContext, Result};

/// Writes `data` to `path` so that readers observe either the old file or the
/// complete new one. The temp file lives in `tmp_dir`, which must be on the
/// same filesystem as `path`.
pub fn atomic_write(path: &Path, data: &[u8], tmp_dir: &Path, sync: bool) -> Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(tmp_dir)
        .ctx(|| format!("create temp file in {}", tmp_dir.display()))?;
    tmp.write_all(data)
        .ctx(|| format!("write temp file for {}", path.display()))?;
    if sync {
        tmp.as_file()
            .sync_all()
            .ctx(|| format!("sync temp file for {}", path.display()))?;
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).ctx(|| format!("create {}", parent.display()))?;
    }
    tmp.persist(path)
        .map_err(|e| Error::io(format!("rename into {}", path.display()), e.error))?;
    if sync {
        sync_dir(path.parent());
    }
    Ok(())
}

fn sync_dir(dir: Option<&Path>) {
    // Directory fsync is best effort; some filesystems refuse it.
    if let Some(dir) = dir {
        if let Ok(f) = File::open(dir) {
            let _ = f.sync_all();
        }
    }
}

/// Appends one line (a `\n` is added) to a journal file. A partial line left
/// by an earlier crash is cut off first so it never ends up mid-journal.
/// Callers serialise appends to the same file.
pub fn append_line(path: &Path, line: &str, sync: bool) -> Result<()> {
    debug_assert!(!line.contains('\n'));
    let mut f = OpenOptions::new()
        .create(true)
        .read(true)
        .append(true)
        .open(path)
        .ctx(|| format!("open {}", path.display()))?;
    drop_torn_tail(&mut f).ctx(|| format!("repair {}", path.display()))?;
    let mut buf = Vec::with_capacity(line.len() + 1);
    buf.extend_from_slice(line.as_bytes());
    buf.push(b'\n');
    f.write_all(&buf).ctx(|| format!("append {}", path.display()))?;
    if sync {
        f.sync_data().ctx(|| format!("sync {}", path.display()))?;
    }
    Ok(())
}

fn drop_torn_tail(f: &mut File) -> io::Result<()> {
    use std::io::{Read, Seek, SeekFrom};
    let len = f.metadata()?.len();
    let mut end = len;
    let mut block = [0u8; 4096];
    while end > 0 {
        let start = end.saturating_sub(block.len() as u64);
        let n = (end - start) as usize;
        f.seek(SeekFrom::Start(start))?;
        f.read_exact(&mut block[..n])?;
        if let Some(i) = block[..n].iter().rposition(|&b| b == b'\n') {
            end = start + i as u64 + 1;
            break;
        }
        end = start;
    }
    if end != len {
        f.set_len(end)?;
    }
    Ok(())
}

/// Reads a journal, ignoring a trailing partial line left by a crash.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(format!("read {}", path.display()), e)),
    };
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    Ok(complete
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

pub fn read_optional(path: &Path) -> Result<Option<String>> {
    match fs::read_to_string(path) {
        Ok(t) => Ok(Some(t)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(format!("read {}", path.display()), e)),
    }
}

/// File names in `dir`; a missing directory reads as empty.
pub fn list_names(dir: &Path) -> Result<Vec<String>> {
    let rd = match fs::read_dir(dir) {
        Ok(rd) => rd,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(format!("list {}", dir.display()), e)),
    };
    let mut names = Vec::new();
    for entry in rd {
        let entry = entry.ctx(|| format!("list {}", dir.display()))?;
        if let Ok(name) = entry.file_name().into_string() {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Creates `path` with `data` only if it does not already exist. Returns
/// false when another writer got there first.
pub fn create_new(path: &Path, data: &[u8], tmp_dir: &Path) -> Result<bool> {
    let mut tmp = tempfile::NamedTempFile::new_in(tmp_dir)
        .ctx(|| format!("create temp file in {}", tmp_dir.display()))?;
    tmp.write_all(data)
        .ctx(|| format!("write temp file for {}", path.display()))?;
    tmp.as_file().sync_all().ctx(|| "sync temp file".into())?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).ctx(|| format!("create {}", parent.display()))?;
    }
    match tmp.persist_noclobber(path) {
        Ok(_) => {
            sync_dir(path.parent());
            Ok(true)
        }
        Err(e) if e.error.kind() == io::ErrorKind::AlreadyExists => Ok(false),
        Err(e) => Err(Error::io(format!("create {}", path.display()), e.error)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockMode {
    Shared,
    Exclusive,
}

/// An advisory `flock`-style lock, released on drop.
#[derive(Debug)]
pub struct FileLock {
    _file: File,
    path: PathBuf,
    mode: LockMode,
}

impl FileLock {
    fn open(path: &Path) -> Result<File> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).ctx(|| format!("create {}", parent.display()))?;
        }
        OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .write(true)
            .open(path)
            .ctx(|| format!("open lock {}", path.display()))
    }

    pub fn acquire(path: &Path, mode: LockMode) -> Result<Self> {
        let file = Self::open(path)?;
        match mode {
            LockMode::Shared => file.lock_shared(),
            LockMode::Exclusive => file.lock(),
        }
        .ctx(|| format!("lock {}", path.display()))?;
        Ok(FileLock {
            _file: file,
            path: path.to_owned(),
            mode,
        })
    }

    /// Returns `Ok(None)` when the lock is held elsewhere.
    pub fn try_acquire(path: &Path, mode: LockMode) -> Result<Option<Self>> {
        let file = Self::open(path)?;
        let res = match mode {
            LockMode::Shared => file.try_lock_shared(),
            LockMode::Exclusive => file.try_lock(),
        };
        match res {
            Ok(()) => Ok(Some(FileLock {
                _file: file,
                path: path.to_owned(),
                mode,
            })),
            Err(TryLockError::WouldBlock) => Ok(None),
            Err(TryLockError::Error(e)) => Err(Error::io(format!("lock {}", path.display()), e)),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn mode(&self) -> LockMode {
        self.mode
    }
}

/// Recursively copies regular files from `src` into `dst`.
pub fn copy_tree(src: &Path, dst: &Path) -> Result<u64> {
    fs::create_dir_all(dst).ctx(|| format!("create {}", dst.display()))?;
    let mut copied = 0;
    for entry in walkdir::WalkDir::new(src).min_depth(1).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::io(format!("walk {}", src.display()), e.into()))?;
        let rel = entry.path().strip_prefix(src).expect("walkdir yields children");
        let target = dst.join(rel);
        let ft = entry.file_type();
        if ft.is_dir() {
            fs::create_dir_all(&target).ctx(|| format!("create {}", target.display()))?;
        } else if ft.is_file() {
            fs::copy(entry.path(), &target).ctx(|| format!("copy to {}", target.display()))?;
            let mut perm = fs::metadata(&target)
                .ctx(|| format!("stat {}", target.display()))?
                .permissions();
            if perm.readonly() {
                #[allow(clippy::permissions_set_readonly_false)]
                perm.set_readonly(false);
                fs::set_permissions(&target, perm)
                    .ctx(|| format!("chmod {}", target.display()))?;
            }
            copied += 1;
        }
    }
    Ok(copied)
}

/// Marks every regular file under `root` read-only. Directories stay writable
/// so the tree can still be removed.
pub fn make_files_readonly(root: &Path) -> Result<()> {
    for entry in walkdir::WalkDir::new(root) {
        let entry = entry.map_err(|e| Error::io(format!("walk {}", root.display()), e.into()))?;
        if entry.file_type().is_file() {
            let mut perm = entry
                .metadata()
                .map_err(|e| Error::io("stat", e.into()))?
                .permissions();
            perm.set_readonly(true);
            fs::set_permissions(entry.path(), perm)
                .ctx(|| format!("chmod {}", entry.path().display()))?;
        }
    }
    Ok(())
}
