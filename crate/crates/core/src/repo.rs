//! The repository handle: on-disk layout, configuration, clock, locks and
//! the ACL table.
//!
//! ```text
//! .dsr/
//!   config.json              chunking parameters and limits
//!   lock                     repository lock (shared: writers, exclusive: gc)
//!   acl.json                 access control entries
//!   objects/ manifests/ tmp/ content store
//!   commits/<id>.json        canonical commit bodies
//!   refs/datasets/<name>     head commit id
//!   refs/tags/<name>         tagged commit id
//!   events.jsonl             one line per new commit, consumed by triggers
//!   tombstones.jsonl         deleted datasets
//!   lineage.jsonl            provenance records
//!   revocations.jsonl        revocation marks
//!   workflows/ runs/ triggers/
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::acl::{validate_acl_dataset, AclEntry, AclTable, Action, Role, ANY_DATASET};
use crate::chunker::ChunkParams;
use crate::error::{Error, IoContext, Result};
use crate::fsutil::{self, FileLock, LockMode};
use crate::hash::{CommitId, ManifestId};
use crate::names::Principal;
use crate::store::{ContentStore, GcReport};

pub const REPO_DIR: &str = ".dsr";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoConfig {
    pub format: u32,
    pub chunking: ChunkParams,
    /// Longest chain of workflow runs one root commit may set off.
    pub chain_depth_limit: u32,
    pub sync_chunks: bool,
}

impl Default for RepoConfig {
    fn default() -> Self {
        RepoConfig {
            format: FORMAT,
            chunking: ChunkParams::default(),
            chain_depth_limit: 10,
            sync_chunks: false,
        }
    }
}

pub trait Clock: Send + Sync {
    fn now_millis(&self) -> i64;

    fn now_secs(&self) -> i64 {
        self.now_millis().div_euclid(1000)
    }
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_millis(&self) -> i64 {
        chrono::Utc::now().timestamp_millis()
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicI64);

impl ManualClock {
    pub fn at_secs(secs: i64) -> Self {
        ManualClock(AtomicI64::new(secs * 1000))
    }

    pub fn set_secs(&self, secs: i64) {
        self.0.store(secs * 1000, Ordering::SeqCst);
    }

    pub fn advance_secs(&self, secs: i64) {
        self.0.fetch_add(secs * 1000, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_millis(&self) -> i64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Clone)]
pub struct Repo {
    dir: PathBuf,
    store: ContentStore,
    config: RepoConfig,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for Repo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Repo").field("dir", &self.dir).finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GcSummary {
    pub live_manifests: usize,
    #[serde(flatten)]
    pub report: GcReport,
}

impl Repo {
    /// Creates `<root>/.dsr`; `creator` becomes repository-wide admin.
    pub fn init(root: &Path, creator: &Principal, config: RepoConfig) -> Result<Repo> {
        config.chunking.validate()?;
        let dir = root.join(REPO_DIR);
        if dir.join("config.json").exists() {
            return Err(Error::Validation(format!(
                "repository already initialised at {}",
                dir.display()
            )));
        }
        for sub in [
            "commits",
            "refs/datasets",
            "refs/tags",
            "locks",
            "workflows/defs",
            "workflows/refs",
            "runs",
            "triggers",
        ] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).ctx(|| format!("create {}", p.display()))?;
        }
        let store = ContentStore::open(&dir, config.chunking)?;
        let table = AclTable::from_entries(vec![AclEntry {
            principal: creator.clone(),
            dataset: ANY_DATASET.into(),
            role: Role::Admin,
        }]);
        fsutil::atomic_write(
            &dir.join("acl.json"),
            serde_json::to_string(&table)?.as_bytes(),
            &store.tmp_dir(),
            true,
        )?;
        // config.json last: its presence marks a complete repository.
        fsutil::atomic_write(
            &dir.join("config.json"),
            serde_json::to_string(&config)?.as_bytes(),
            &store.tmp_dir(),
            true,
        )?;
        Repo::open(root)
    }

    /// Opens the repository whose `.dsr` directory is directly under `root`.
    pub fn open(root: &Path) -> Result<Repo> {
        let dir = root.join(REPO_DIR);
        let text = fsutil::read_optional(&dir.join("config.json"))?
            .ok_or_else(|| Error::NoRepository(root.to_owned()))?;
        let config: RepoConfig = serde_json::from_str(&text)?;
        if config.format != FORMAT {
            return Err(Error::Validation(format!(
                "unsupported repository format {}",
                config.format
            )));
        }
        let store = ContentStore::open(&dir, config.chunking)?.with_sync_chunks(config.sync_chunks);
        Ok(Repo {
            dir,
            store,
            config,
            clock: Arc::new(SystemClock),
        })
    }

    /// Walks up from `start` to the nearest directory containing `.dsr`.
    pub fn discover(start: &Path) -> Result<Repo> {
        let mut cur = Some(start);
        while let Some(d) = cur {
            if d.join(REPO_DIR).join("config.json").is_file() {
                return Repo::open(d);
            }
            cur = d.parent();
        }
        Err(Error::NoRepository(start.to_owned()))
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.store = self.store.with_parallel(parallel);
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn store(&self) -> &ContentStore {
        &self.store
    }

    pub fn config(&self) -> &RepoConfig {
        &self.config
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn now_secs(&self) -> i64 {
        self.clock.now_secs()
    }

    pub(crate) fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub(crate) fn tmp(&self) -> PathBuf {
        self.store.tmp_dir()
    }

    /// Held by every writer so gc cannot run underneath it.
    pub(crate) fn write_lock(&self) -> Result<FileLock> {
        FileLock::acquire(&self.store.lock_path(), LockMode::Shared)
    }

    /// Serialises journal appends and ACL updates.
    pub(crate) fn meta_lock(&self) -> Result<FileLock> {
        FileLock::acquire(&self.path("locks/meta.lock"), LockMode::Exclusive)
    }

    pub(crate) fn dataset_lock(&self, dataset: &str) -> Result<FileLock> {
        FileLock::acquire(
            &self.path(&format!("locks/dataset-{dataset}.lock")),
            LockMode::Exclusive,
        )
    }

    pub(crate) fn append_json<T: Serialize>(&self, journal: &str, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)?;
        fsutil::append_line(&self.path(journal), &line, true)
    }

    pub(crate) fn read_journal<T: for<'de> Deserialize<'de>>(&self, journal: &str) -> Result<Vec<T>> {
        fsutil::read_lines(&self.path(journal))?
            .iter()
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }

    // ---- access control ----

    pub fn acl(&self) -> Result<AclTable> {
        let text = fsutil::read_optional(&self.path("acl.json"))?.unwrap_or_else(|| "[]".into());
        let entries: Vec<AclEntry> = serde_json::from_str(&text)?;
        Ok(AclTable::from_entries(entries))
    }

    pub fn authorize(&self, principal: &Principal, action: Action, dataset: &str) -> Result<()> {
        self.acl()?.authorize(principal, action, dataset).into_result()
    }

    pub fn can(&self, principal: &Principal, action: Action, dataset: &str) -> Result<bool> {
        Ok(self.acl()?.authorize(principal, action, dataset).is_allowed())
    }

    fn update_acl<T>(
        &self,
        admin: &Principal,
        dataset: &str,
        f: impl FnOnce(&mut AclTable) -> T,
    ) -> Result<T> {
        validate_acl_dataset(dataset)?;
        let _w = self.write_lock()?;
        let _m = self.meta_lock()?;
        let mut table = self.acl()?;
        table.authorize(admin, Action::Admin, dataset).into_result()?;
        let out = f(&mut table);
        fsutil::atomic_write(
            &self.path("acl.json"),
            serde_json::to_string(&table)?.as_bytes(),
            &self.tmp(),
            true,
        )?;
        Ok(out)
    }

    /// Grants may name datasets that do not exist yet.
    pub fn grant(
        &self,
        admin: &Principal,
        target: &Principal,
        dataset: &str,
        role: Role,
    ) -> Result<AclEntry> {
        let entry = AclEntry {
            principal: target.clone(),
            dataset: dataset.into(),
            role,
        };
        let e = entry.clone();
        self.update_acl(admin, dataset, move |t| t.set(e))?;
        Ok(entry)
    }

    pub fn revoke_grant(
        &self,
        admin: &Principal,
        target: &Principal,
        dataset: &str,
    ) -> Result<Option<AclEntry>> {
        self.update_acl(admin, dataset, |t| t.remove(target, dataset))
    }

    // ---- garbage collection ----

    /// Manifests of every commit reachable from a dataset head or tag,
    /// walking through revoked commits without keeping their manifests.
    pub fn live_roots(&self) -> Result<BTreeSet<ManifestId>> {
        let revoked = self.revoked_set()?;
        let mut stack: Vec<CommitId> = self.dataset_heads()?.into_values().collect();
        stack.extend(self.tags()?.into_values());
        let mut seen = BTreeSet::new();
        let mut roots = BTreeSet::new();
        while let Some(id) = stack.pop() {
            if !seen.insert(id) {
                continue;
            }
            let c = self.load_commit(&id)?;
            if !revoked.contains(&id) {
                roots.insert(c.manifest_id);
            }
            stack.extend(c.parents.iter().copied());
        }
        Ok(roots)
    }

    /// Reclaims unreachable chunks. Fails rather than waits when another
    /// process is writing.
    pub fn gc(&self, principal: &Principal) -> Result<GcSummary> {
        self.authorize(principal, Action::Admin, ANY_DATASET)?;
        let lock = FileLock::try_acquire(&self.store.lock_path(), LockMode::Exclusive)?
            .ok_or_else(|| {
                Error::Concurrency("repository is busy; gc needs exclusive access".into())
            })?;
        let roots = self.live_roots()?;
        let report = self.store.gc(&roots, &lock)?;
        Ok(GcSummary {
            live_manifests: roots.len(),
            report,
        })
    }
}
