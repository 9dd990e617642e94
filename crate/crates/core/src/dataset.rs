//! Versioned dataset catalog: check-in, checkout, commits, heads, tags,
//! queries and diffs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acl::Action;
use crate::error::{Error, IoContext, Result};
use crate::fsutil;
use crate::hash::{CommitId, Digest, ManifestId};
use crate::manifest::{FileEntry, Manifest};
use crate::names::{validate_name, Principal};
use crate::par;
use crate::query::{CommitFacts, QueryExpr};
use crate::repo::Repo;
use crate::store::PutStats;

/// An immutable dataset version. The id is the SHA-256 of the canonical
/// JSON of every other field, in declaration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Commit {
    pub commit_id: CommitId,
    pub dataset: String,
    pub manifest_id: ManifestId,
    pub parents: Vec<CommitId>,
    pub author: Principal,
    pub timestamp: i64,
    pub message: String,
    pub attributes: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct CommitBodyRef<'a> {
    dataset: &'a str,
    manifest_id: &'a ManifestId,
    parents: &'a [CommitId],
    author: &'a Principal,
    timestamp: i64,
    message: &'a str,
    attributes: &'a BTreeMap<String, String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CommitBody {
    dataset: String,
    manifest_id: ManifestId,
    parents: Vec<CommitId>,
    author: Principal,
    timestamp: i64,
    message: String,
    attributes: BTreeMap<String, String>,
}

impl Commit {
    fn body_json(&self) -> String {
        serde_json::to_string(&CommitBodyRef {
            dataset: &self.dataset,
            manifest_id: &self.manifest_id,
            parents: &self.parents,
            author: &self.author,
            timestamp: self.timestamp,
            message: &self.message,
            attributes: &self.attributes,
        })
        .expect("commit serialises")
    }

    fn seal(mut self) -> Self {
        self.commit_id = Digest::of(self.body_json().as_bytes());
        self
    }

    fn from_stored(bytes: &[u8], expected: &CommitId) -> Result<Self> {
        let actual = Digest::of(bytes);
        if actual != *expected {
            return Err(Error::Integrity(format!("commit {expected} hashes to {actual}")));
        }
        let b: CommitBody = serde_json::from_slice(bytes)?;
        Ok(Commit {
            commit_id: actual,
            dataset: b.dataset,
            manifest_id: b.manifest_id,
            parents: b.parents,
            author: b.author,
            timestamp: b.timestamp,
            message: b.message,
            attributes: b.attributes,
        })
    }
}

/// A commit as shown to users, with derived fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitView {
    #[serde(flatten)]
    pub commit: Commit,
    pub version: u32,
    pub tags: Vec<String>,
    pub revoked: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffReport {
    pub added: Vec<String>,
    pub deleted: Vec<String>,
    pub modified: Vec<String>,
    pub unchanged_count: usize,
}

impl DiffReport {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.deleted.is_empty() && self.modified.is_empty()
    }
}

/// Merge-walk of two path-sorted manifests.
pub fn diff_manifests(from: &Manifest, to: &Manifest) -> DiffReport {
    let (a, b) = (from.entries(), to.entries());
    let (mut i, mut j) = (0, 0);
    let mut r = DiffReport::default();
    while i < a.len() || j < b.len() {
        let ord = match (a.get(i), b.get(j)) {
            (Some(x), Some(y)) => x.path.as_bytes().cmp(y.path.as_bytes()),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, _) => std::cmp::Ordering::Greater,
        };
        match ord {
            std::cmp::Ordering::Less => {
                r.deleted.push(a[i].path.clone());
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                r.added.push(b[j].path.clone());
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                if a[i].file_hash == b[j].file_hash {
                    r.unchanged_count += 1;
                } else {
                    r.modified.push(a[i].path.clone());
                }
                i += 1;
                j += 1;
            }
        }
    }
    r
}

#[derive(Debug, Clone, Default)]
pub struct CheckinRequest {
    pub dataset: String,
    pub worktree: PathBuf,
    pub message: String,
    pub attributes: BTreeMap<String, String>,
    pub tags: Vec<String>,
    /// Replaces the default parent (the current head).
    pub parents: Option<Vec<CommitId>>,
    pub allow_empty: bool,
    pub(crate) chain_depth: u32,
    /// Extra parents after the head, for workflow outputs.
    pub(crate) derived_from: Vec<CommitId>,
    /// Repoint existing tags instead of refusing.
    pub(crate) move_tags: bool,
}

impl CheckinRequest {
    pub fn new(dataset: impl Into<String>, worktree: impl Into<PathBuf>) -> Self {
        CheckinRequest {
            dataset: dataset.into(),
            worktree: worktree.into(),
            ..Default::default()
        }
    }

    pub fn message(mut self, m: impl Into<String>) -> Self {
        self.message = m.into();
        self
    }

    pub fn tag(mut self, t: impl Into<String>) -> Self {
        self.tags.push(t.into());
        self
    }

    pub fn attr(mut self, k: impl Into<String>, v: impl Into<String>) -> Self {
        self.attributes.insert(k.into(), v.into());
        self
    }

    pub fn parents(mut self, parents: Vec<CommitId>) -> Self {
        self.parents = Some(parents);
        self
    }

    pub fn allow_empty(mut self, allow: bool) -> Self {
        self.allow_empty = allow;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckinOutcome {
    pub commit: Commit,
    pub stats: PutStats,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selector {
    /// Full id or unique prefix.
    Commit(String),
    Head(String),
    Query(QueryExpr),
}

#[derive(Debug, Clone)]
pub struct CheckedOut {
    pub commit: Commit,
    pub manifest: Manifest,
    pub path: PathBuf,
}

/// One line of `events.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitEvent {
    pub commit: CommitId,
    pub dataset: String,
    /// Number of workflow runs between this commit and a manual action.
    pub depth: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tombstone {
    pub dataset: String,
    pub head: Option<CommitId>,
    pub deleted_by: Principal,
    pub deleted_at: i64,
}

/// Files under `root` as `(repository path, file to read)`.
fn scan_worktree(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let meta = fs::metadata(root).ctx(|| format!("read worktree {}", root.display()))?;
    if !meta.is_dir() {
        return Err(Error::Validation(format!("{} is not a directory", root.display())));
    }
    let canon_root = root.canonicalize().ctx(|| format!("resolve {}", root.display()))?;
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(root).min_depth(1).follow_links(false) {
        let entry = entry.map_err(|e| Error::io(format!("walk {}", root.display()), e.into()))?;
        let ft = entry.file_type();
        if ft.is_dir() {
            continue;
        }
        let rel = entry.path().strip_prefix(root).expect("walkdir yields children");
        let rel = rel
            .to_str()
            .ok_or_else(|| Error::Validation(format!("non UTF-8 path {}", rel.display())))?
            .replace(std::path::MAIN_SEPARATOR, "/");
        let source = if ft.is_file() {
            entry.path().to_owned()
        } else if ft.is_symlink() {
            let target = entry
                .path()
                .canonicalize()
                .ctx(|| format!("resolve symlink {rel}"))?;
            if !target.starts_with(&canon_root) {
                return Err(Error::Validation(format!("symlink {rel} escapes the worktree")));
            }
            if !target.is_file() {
                return Err(Error::Validation(format!(
                    "symlink {rel} does not point at a regular file"
                )));
            }
            target
        } else {
            return Err(Error::Validation(format!("{rel} is not a regular file")));
        };
        crate::manifest::validate_path(&rel)?;
        out.push((rel, source));
    }
    Ok(out)
}

impl Repo {
    fn commit_path(&self, id: &CommitId) -> PathBuf {
        self.path(&format!("commits/{id}.json"))
    }

    fn head_path(&self, dataset: &str) -> PathBuf {
        self.path(&format!("refs/datasets/{dataset}"))
    }

    fn tag_path(&self, tag: &str) -> PathBuf {
        self.path(&format!("refs/tags/{tag}"))
    }

    fn read_ref(&self, path: &Path) -> Result<Option<CommitId>> {
        match fsutil::read_optional(path)? {
            None => Ok(None),
            Some(s) => s
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| Error::Corruption(format!("bad ref {}", path.display()))),
        }
    }

    fn write_ref(&self, path: &Path, id: &CommitId) -> Result<()> {
        fsutil::atomic_write(path, format!("{id}\n").as_bytes(), &self.tmp(), true)
    }

    pub fn head(&self, dataset: &str) -> Result<Option<CommitId>> {
        validate_name("dataset", dataset)?;
        self.read_ref(&self.head_path(dataset))
    }

    pub fn dataset_heads(&self) -> Result<BTreeMap<String, CommitId>> {
        let mut out = BTreeMap::new();
        for name in fsutil::list_names(&self.path("refs/datasets"))? {
            if let Some(id) = self.read_ref(&self.head_path(&name))? {
                out.insert(name, id);
            }
        }
        Ok(out)
    }

    pub fn tags(&self) -> Result<BTreeMap<String, CommitId>> {
        let mut out = BTreeMap::new();
        for name in fsutil::list_names(&self.path("refs/tags"))? {
            if let Some(id) = self.read_ref(&self.tag_path(&name))? {
                out.insert(name, id);
            }
        }
        Ok(out)
    }

    fn tags_by_commit(&self) -> Result<HashMap<CommitId, Vec<String>>> {
        let mut m: HashMap<CommitId, Vec<String>> = HashMap::new();
        for (name, id) in self.tags()? {
            m.entry(id).or_default().push(name);
        }
        Ok(m)
    }

    pub fn commit_exists(&self, id: &CommitId) -> bool {
        self.commit_path(id).is_file()
    }

    pub fn load_commit(&self, id: &CommitId) -> Result<Commit> {
        let path = self.commit_path(id);
        match fs::read(&path) {
            Ok(b) => Commit::from_stored(&b, id),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(Error::not_found("commit", id.to_hex()))
            }
            Err(e) => Err(Error::io(format!("read {}", path.display()), e)),
        }
    }

    pub fn commit_ids(&self) -> Result<Vec<CommitId>> {
        Ok(fsutil::list_names(&self.path("commits"))?
            .iter()
            .filter_map(|n| n.strip_suffix(".json")?.parse().ok())
            .collect())
    }

    pub fn all_commits(&self) -> Result<Vec<Commit>> {
        par::try_map(&self.commit_ids()?, self.store().parallel(), |id| {
            self.load_commit(id)
        })
    }

    /// Accepts a full id or a unique prefix of at least four hex digits.
    pub fn resolve_commit(&self, text: &str) -> Result<CommitId> {
        if let Ok(id) = text.parse::<CommitId>() {
            return if self.commit_exists(&id) {
                Ok(id)
            } else {
                Err(Error::not_found("commit", text))
            };
        }
        if text.len() < 4 || !text.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(Error::Validation(format!(
                "{text:?} is not a commit id or a prefix of at least 4 hex digits"
            )));
        }
        let hits: Vec<CommitId> = self
            .commit_ids()?
            .into_iter()
            .filter(|id| id.to_hex().starts_with(text))
            .collect();
        match hits.as_slice() {
            [] => Err(Error::not_found("commit", text)),
            [one] => Ok(*one),
            _ => Err(Error::AmbiguousId(text.into())),
        }
    }

    /// First-parent depth within the commit's own dataset, starting at 1.
    pub fn version_of(&self, commit: &Commit) -> Result<u32> {
        let mut n = 1;
        let mut cur = commit.clone();
        while let Some(p) = cur.parents.first() {
            let parent = self.load_commit(p)?;
            if parent.dataset != commit.dataset {
                break;
            }
            n += 1;
            cur = parent;
        }
        Ok(n)
    }

    pub fn view(&self, commit: Commit) -> Result<CommitView> {
        let tags = self
            .tags()?
            .into_iter()
            .filter(|(_, id)| *id == commit.commit_id)
            .map(|(n, _)| n)
            .collect();
        let revoked = self.is_revoked(&commit.commit_id)?;
        Ok(CommitView {
            version: self.version_of(&commit)?,
            tags,
            revoked,
            commit,
        })
    }

    fn check_tag_free(&self, tag: &str, target: Option<&CommitId>) -> Result<()> {
        validate_name("tag", tag)?;
        match self.read_ref(&self.tag_path(tag))? {
            Some(existing) if Some(&existing) != target => Err(Error::Validation(format!(
                "tag {tag} already points at {}",
                existing.short()
            ))),
            _ => Ok(()),
        }
    }

    /// Stores every file under the worktree and records a new version.
    pub fn checkin(&self, principal: &Principal, req: CheckinRequest) -> Result<CheckinOutcome> {
        validate_name("dataset", &req.dataset)?;
        for k in req.attributes.keys() {
            if k.is_empty() {
                return Err(Error::Validation("attribute keys must be nonempty".into()));
            }
        }
        self.authorize(principal, Action::Write, &req.dataset)?;
        for t in &req.tags {
            if req.move_tags {
                validate_name("tag", t)?;
            } else {
                self.check_tag_free(t, None)?;
            }
        }
        let _w = self.write_lock()?;
        let expected_head = self.head(&req.dataset)?;

        let files = scan_worktree(&req.worktree)?;
        let store = self.store();
        let puts = par::try_map(&files, store.parallel(), |(rel, src)| {
            let f = fs::File::open(src).ctx(|| format!("open {}", src.display()))?;
            let mut out = store.put_blob(f)?;
            out.entry.path = rel.clone();
            Ok::<_, Error>(out)
        })?;
        let mut stats = PutStats::default();
        let mut entries: Vec<FileEntry> = Vec::with_capacity(puts.len());
        for p in puts {
            stats += p.stats;
            entries.push(p.entry);
        }
        let manifest = Manifest::new(entries)?;
        let manifest_id = store.put_manifest(&manifest)?;

        let mut parents = req.parents.clone().unwrap_or_else(|| expected_head.into_iter().collect());
        for d in &req.derived_from {
            if !parents.contains(d) {
                parents.push(*d);
            }
        }
        let mut seen = HashSet::new();
        for p in &parents {
            if !seen.insert(*p) {
                return Err(Error::Validation(format!("duplicate parent {}", p.short())));
            }
            if !self.commit_exists(p) {
                return Err(Error::not_found("commit", p.to_hex()));
            }
        }
        if let (false, Some(first)) = (req.allow_empty, parents.first()) {
            if self.load_commit(first)?.manifest_id == manifest_id {
                return Err(Error::EmptyCommit(*first));
            }
        }

        let commit = Commit {
            commit_id: Digest::from_bytes([0; 32]),
            dataset: req.dataset.clone(),
            manifest_id,
            parents,
            author: principal.clone(),
            timestamp: self.now_secs(),
            message: req.message.clone(),
            attributes: req.attributes.clone(),
        }
        .seal();
        let cpath = self.commit_path(&commit.commit_id);
        if !cpath.is_file() {
            fsutil::atomic_write(&cpath, commit.body_json().as_bytes(), &self.tmp(), true)?;
        }

        {
            let _d = self.dataset_lock(&req.dataset)?;
            if self.head(&req.dataset)? != expected_head {
                return Err(Error::Conflict {
                    what: format!("head of {}", req.dataset),
                });
            }
            self.write_ref(&self.head_path(&req.dataset), &commit.commit_id)?;
        }
        for t in &req.tags {
            if !req.move_tags {
                self.check_tag_free(t, Some(&commit.commit_id))?;
            }
            self.write_ref(&self.tag_path(t), &commit.commit_id)?;
        }
        {
            let _m = self.meta_lock()?;
            self.append_json(
                "events.jsonl",
                &CommitEvent {
                    commit: commit.commit_id,
                    dataset: commit.dataset.clone(),
                    depth: req.chain_depth,
                },
            )?;
        }
        Ok(CheckinOutcome { commit, stats })
    }

    /// Writes a manifest's files under `dir`, which must be empty or absent.
    pub fn materialize(&self, manifest: &Manifest, dir: &Path) -> Result<()> {
        if dir.exists() {
            let nonempty = fs::read_dir(dir)
                .ctx(|| format!("read {}", dir.display()))?
                .next()
                .is_some();
            if nonempty {
                return Err(Error::Validation(format!(
                    "destination {} is not empty",
                    dir.display()
                )));
            }
        }
        fs::create_dir_all(dir).ctx(|| format!("create {}", dir.display()))?;
        let store = self.store();
        par::try_map(manifest.entries(), store.parallel(), |e| {
            store.get_to_file(e, &dir.join(&e.path))
        })?;
        Ok(())
    }

    fn selected_commits(
        &self,
        principal: &Principal,
        selector: &Selector,
        multi_ok: bool,
    ) -> Result<Vec<Commit>> {
        match selector {
            Selector::Commit(text) => Ok(vec![self.load_commit(&self.resolve_commit(text)?)?]),
            Selector::Head(ds) => {
                self.authorize(principal, Action::Read, ds)?;
                let id = self
                    .head(ds)?
                    .ok_or_else(|| Error::not_found("dataset", ds.as_str()))?;
                Ok(vec![self.load_commit(&id)?])
            }
            Selector::Query(q) => {
                let hits = self.query(principal, q)?;
                match hits.len() {
                    0 => Err(Error::NoMatch),
                    1 => Ok(hits),
                    n if !multi_ok => Err(Error::AmbiguousQuery(n)),
                    _ => Ok(hits),
                }
            }
        }
    }

    /// Materialises the selected version(s). With several matches each lands
    /// in `dest/<dataset>@<short id>/`.
    pub fn checkout(
        &self,
        principal: &Principal,
        selector: &Selector,
        dest: &Path,
        multi_ok: bool,
    ) -> Result<Vec<CheckedOut>> {
        let commits = self.selected_commits(principal, selector, multi_ok)?;
        let revoked = self.revoked_set()?;
        for c in &commits {
            self.authorize(principal, Action::Read, &c.dataset)?;
            if revoked.contains(&c.commit_id) {
                return Err(Error::RevokedData(c.commit_id));
            }
        }
        let nested = commits.len() > 1;
        let mut out = Vec::with_capacity(commits.len());
        for commit in commits {
            let manifest = self.store().load_manifest(&commit.manifest_id)?;
            let path = if nested {
                dest.join(format!("{}@{}", commit.dataset, commit.commit_id.short()))
            } else {
                dest.to_owned()
            };
            self.materialize(&manifest, &path)?;
            out.push(CheckedOut {
                commit,
                manifest,
                path,
            });
        }
        Ok(out)
    }

    /// Commits matching `expr` that `principal` may read, newest first with
    /// ties broken by ascending id.
    pub fn query(&self, principal: &Principal, expr: &QueryExpr) -> Result<Vec<Commit>> {
        let compiled = expr.compile()?;
        let acl = self.acl()?;
        let heads: HashSet<CommitId> = self.dataset_heads()?.into_values().collect();
        let tags = self.tags_by_commit()?;
        let revoked = self.revoked_set()?;
        let no_tags = Vec::new();
        let mut hits: Vec<Commit> = self
            .all_commits()?
            .into_iter()
            .filter(|c| acl.authorize(principal, Action::Read, &c.dataset).is_allowed())
            .filter(|c| {
                compiled.matches(
                    c,
                    CommitFacts {
                        tags: tags.get(&c.commit_id).unwrap_or(&no_tags),
                        is_head: heads.contains(&c.commit_id),
                        revoked: revoked.contains(&c.commit_id),
                    },
                )
            })
            .collect();
        hits.sort_by(|a, b| {
            b.timestamp
                .cmp(&a.timestamp)
                .then_with(|| a.commit_id.cmp(&b.commit_id))
        });
        Ok(hits)
    }

    pub fn diff(&self, principal: &Principal, a: &CommitId, b: &CommitId) -> Result<DiffReport> {
        let (ca, cb) = (self.load_commit(a)?, self.load_commit(b)?);
        self.authorize(principal, Action::Read, &ca.dataset)?;
        self.authorize(principal, Action::Read, &cb.dataset)?;
        let ma = self.store().load_manifest(&ca.manifest_id)?;
        let mb = self.store().load_manifest(&cb.manifest_id)?;
        Ok(diff_manifests(&ma, &mb))
    }

    /// Head-first walk along first parents that stay in the dataset.
    pub fn log(&self, principal: &Principal, dataset: &str) -> Result<Vec<Commit>> {
        self.authorize(principal, Action::Read, dataset)?;
        let mut cur = self.head(dataset)?;
        if cur.is_none() {
            return Err(Error::not_found("dataset", dataset));
        }
        let mut out = Vec::new();
        while let Some(id) = cur {
            let c = self.load_commit(&id)?;
            if c.dataset != dataset {
                break;
            }
            cur = c.parents.first().copied();
            out.push(c);
        }
        Ok(out)
    }

    pub fn tag(&self, principal: &Principal, name: &str, commit: &CommitId) -> Result<()> {
        let c = self.load_commit(commit)?;
        self.authorize(principal, Action::Write, &c.dataset)?;
        self.check_tag_free(name, Some(commit))?;
        let _w = self.write_lock()?;
        self.write_ref(&self.tag_path(name), commit)
    }

    /// Removes the head ref and tags of a dataset. Commits and chunks stay
    /// until gc.
    pub fn delete_dataset(&self, principal: &Principal, dataset: &str) -> Result<Tombstone> {
        self.authorize(principal, Action::Admin, dataset)?;
        let _w = self.write_lock()?;
        let _d = self.dataset_lock(dataset)?;
        let head = self.head(dataset)?;
        if head.is_none() {
            return Err(Error::not_found("dataset", dataset));
        }
        for (tag, id) in self.tags()? {
            if self.load_commit(&id)?.dataset == dataset {
                let p = self.tag_path(&tag);
                fs::remove_file(&p).ctx(|| format!("remove {}", p.display()))?;
            }
        }
        let hp = self.head_path(dataset);
        fs::remove_file(&hp).ctx(|| format!("remove {}", hp.display()))?;
        let t = Tombstone {
            dataset: dataset.into(),
            head,
            deleted_by: principal.clone(),
            deleted_at: self.now_secs(),
        };
        let _m = self.meta_lock()?;
        self.append_json("tombstones.jsonl", &t)?;
        Ok(t)
    }

    pub fn tombstones(&self) -> Result<Vec<Tombstone>> {
        self.read_journal("tombstones.jsonl")
    }

    pub fn events(&self) -> Result<Vec<CommitEvent>> {
        self.read_journal("events.jsonl")
    }
}
