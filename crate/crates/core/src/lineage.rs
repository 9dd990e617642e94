//! Provenance records, lineage traversal and data revocation.
//!
//! The lineage graph is the union of commit parent edges and provenance
//! edges from each input commit to the commit a workflow produced from it.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::acl::Action;
use crate::error::{Error, Result};
use crate::hash::{CommitId, Digest};
use crate::names::Principal;
use crate::repo::Repo;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowRef {
    pub name: String,
    pub def_hash: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub output_commit: CommitId,
    pub input_commits: Vec<CommitId>,
    pub workflow: WorkflowRef,
    pub run_id: String,
    pub terminal_step: String,
    pub recorded_at: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevocationMark {
    pub commit_id: CommitId,
    pub reason: String,
    pub revoked_by: Principal,
    pub revoked_at: i64,
    /// Downstream commits revoked along with the root.
    pub closure: Vec<CommitId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevokeOutcome {
    pub mark: Option<RevocationMark>,
    /// Set when the commit was already revoked; nothing was written.
    pub already_revoked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

/// Adjacency in both directions over commit ids.
#[derive(Debug, Clone, Default)]
pub struct LineageGraph {
    up: HashMap<CommitId, BTreeSet<CommitId>>,
    down: HashMap<CommitId, BTreeSet<CommitId>>,
}

impl LineageGraph {
    /// Builds from `(source, derived)` edges.
    pub fn from_edges(edges: impl IntoIterator<Item = (CommitId, CommitId)>) -> Self {
        let mut g = LineageGraph::default();
        for (from, to) in edges {
            g.add_edge(from, to);
        }
        g
    }

    pub fn add_edge(&mut self, from: CommitId, to: CommitId) {
        self.down.entry(from).or_default().insert(to);
        self.up.entry(to).or_default().insert(from);
    }

    pub fn neighbours(&self, id: &CommitId, dir: Direction) -> impl Iterator<Item = &CommitId> {
        let side = match dir {
            Direction::Up => &self.up,
            Direction::Down => &self.down,
        };
        side.get(id).into_iter().flatten()
    }

    /// Everything reachable from `start` in `dir`, excluding `start`.
    pub fn closure(&self, start: &CommitId, dir: Direction) -> BTreeSet<CommitId> {
        let mut seen = HashSet::from([*start]);
        let mut queue = VecDeque::from([*start]);
        let mut out = BTreeSet::new();
        while let Some(id) = queue.pop_front() {
            for n in self.neighbours(&id, dir) {
                if seen.insert(*n) {
                    out.insert(*n);
                    queue.push_back(*n);
                }
            }
        }
        out
    }

    pub fn ancestors(&self, id: &CommitId) -> BTreeSet<CommitId> {
        self.closure(id, Direction::Up)
    }

    pub fn descendants(&self, id: &CommitId) -> BTreeSet<CommitId> {
        self.closure(id, Direction::Down)
    }
}

impl Repo {
    pub fn provenance_records(&self) -> Result<Vec<ProvenanceRecord>> {
        self.read_journal("lineage.jsonl")
    }

    pub fn provenance_of(&self, output: &CommitId) -> Result<Option<ProvenanceRecord>> {
        Ok(self
            .provenance_records()?
            .into_iter()
            .find(|r| r.output_commit == *output))
    }

    pub fn lineage_graph(&self) -> Result<LineageGraph> {
        let mut g = LineageGraph::default();
        for c in self.all_commits()? {
            for p in &c.parents {
                g.add_edge(*p, c.commit_id);
            }
        }
        for r in self.provenance_records()? {
            for i in &r.input_commits {
                g.add_edge(*i, r.output_commit);
            }
        }
        Ok(g)
    }

    pub fn ancestors(&self, id: &CommitId) -> Result<BTreeSet<CommitId>> {
        self.load_commit(id)?;
        Ok(self.lineage_graph()?.ancestors(id))
    }

    pub fn descendants(&self, id: &CommitId) -> Result<BTreeSet<CommitId>> {
        self.load_commit(id)?;
        Ok(self.lineage_graph()?.descendants(id))
    }

    /// Appends a provenance record. Rejects a second record for the same
    /// output and any edge that would close a cycle.
    pub fn record_provenance(&self, record: &ProvenanceRecord) -> Result<()> {
        self.load_commit(&record.output_commit)?;
        for i in &record.input_commits {
            self.load_commit(i)?;
        }
        let _w = self.write_lock()?;
        let _m = self.meta_lock()?;
        if self
            .provenance_records()?
            .iter()
            .any(|r| r.output_commit == record.output_commit)
        {
            return Err(Error::Integrity(format!(
                "provenance for {} already recorded",
                record.output_commit
            )));
        }
        let g = self.lineage_graph()?;
        let below = g.descendants(&record.output_commit);
        if let Some(bad) = record
            .input_commits
            .iter()
            .find(|i| **i == record.output_commit || below.contains(i))
        {
            return Err(Error::Integrity(format!(
                "input {} derives from output {}; lineage would cycle",
                bad.short(),
                record.output_commit.short()
            )));
        }
        self.append_json("lineage.jsonl", record)
    }

    pub fn revocations(&self) -> Result<Vec<RevocationMark>> {
        self.read_journal("revocations.jsonl")
    }

    pub fn revoked_set(&self) -> Result<HashSet<CommitId>> {
        let mut s = HashSet::new();
        for m in self.revocations()? {
            s.insert(m.commit_id);
            s.extend(m.closure);
        }
        Ok(s)
    }

    pub fn is_revoked(&self, id: &CommitId) -> Result<bool> {
        Ok(self.revoked_set()?.contains(id))
    }

    /// Marks a commit, and with `cascade` everything derived from it, as
    /// unusable. Chunks are reclaimed by the next gc.
    pub fn revoke(
        &self,
        principal: &Principal,
        id: &CommitId,
        reason: &str,
        cascade: bool,
    ) -> Result<RevokeOutcome> {
        let c = self.load_commit(id)?;
        self.authorize(principal, Action::Admin, &c.dataset)?;
        let _w = self.write_lock()?;
        let _m = self.meta_lock()?;
        let already = self.revoked_set()?;
        if already.contains(id) {
            log::warn!("commit {} is already revoked", id.short());
            return Ok(RevokeOutcome {
                mark: None,
                already_revoked: true,
            });
        }
        let closure = if cascade {
            self.lineage_graph()?
                .descendants(id)
                .into_iter()
                .filter(|d| !already.contains(d))
                .collect()
        } else {
            Vec::new()
        };
        let mark = RevocationMark {
            commit_id: *id,
            reason: reason.into(),
            revoked_by: principal.clone(),
            revoked_at: self.now_secs(),
            closure,
        };
        self.append_json("revocations.jsonl", &mark)?;
        Ok(RevokeOutcome {
            mark: Some(mark),
            already_revoked: false,
        })
    }
}
