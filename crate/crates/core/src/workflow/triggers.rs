//! Event and schedule triggers, and the daemon that evaluates them.
//!
//! Per workflow under `triggers/<name>/`:
//!
//! * `cursor` counts the lines of `events.jsonl` already evaluated.
//! * `claims/<key>` is created exactly once per commit or schedule minute and
//!   names the run it started. A claim whose run is missing (crash between
//!   the two writes) is finished on the next tick.
//! * `last_fired` is the latest schedule minute that fired.

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::cron::floor_minute;
use super::engine::{Engine, RegisteredWorkflow};
use super::run::{new_run_id, Run, RunCause, RunState};
use crate::acl::Action;
use crate::dataset::CommitEvent;
use crate::error::{Error, Result};
use crate::fsutil::{self, FileLock, LockMode};
use crate::hash::{CommitId, Digest};
use crate::query::CommitFacts;
use crate::repo::Repo;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Claim {
    run_id: String,
    def_hash: Digest,
    cause: RunCause,
    chain_depth: u32,
}

impl Repo {
    fn trigger_dir(&self, workflow: &str) -> PathBuf {
        self.path(&format!("triggers/{workflow}"))
    }

    fn trigger_lock(&self) -> Result<FileLock> {
        FileLock::acquire(&self.path("locks/triggers.lock"), LockMode::Exclusive)
    }

    /// Events already in the journal when a workflow is first registered
    /// never fire it.
    pub(crate) fn init_trigger_cursor(&self, workflow: &str) -> Result<()> {
        let path = self.trigger_dir(workflow).join("cursor");
        if path.exists() {
            return Ok(());
        }
        let n = self.events()?.len();
        fsutil::atomic_write(&path, format!("{n}\n").as_bytes(), &self.tmp(), true)
    }

    pub fn trigger_cursor(&self, workflow: &str) -> Result<usize> {
        let path = self.trigger_dir(workflow).join("cursor");
        match fsutil::read_optional(&path)? {
            None => Ok(0),
            Some(s) => s
                .trim()
                .parse()
                .map_err(|_| Error::Corruption(format!("bad cursor {}", path.display()))),
        }
    }

    fn set_trigger_cursor(&self, workflow: &str, n: usize) -> Result<()> {
        let path = self.trigger_dir(workflow).join("cursor");
        fsutil::atomic_write(&path, format!("{n}\n").as_bytes(), &self.tmp(), true)
    }

    pub fn last_fired(&self, workflow: &str) -> Result<Option<DateTime<Utc>>> {
        let path = self.trigger_dir(workflow).join("last_fired");
        match fsutil::read_optional(&path)? {
            None => Ok(None),
            Some(s) => DateTime::parse_from_rfc3339(s.trim())
                .map(|t| Some(t.with_timezone(&Utc)))
                .map_err(|_| Error::Corruption(format!("bad timestamp {}", path.display()))),
        }
    }

    pub fn set_last_fired(&self, workflow: &str, minute: DateTime<Utc>) -> Result<()> {
        let path = self.trigger_dir(workflow).join("last_fired");
        let text = format!("{}\n", floor_minute(minute).to_rfc3339());
        fsutil::atomic_write(&path, text.as_bytes(), &self.tmp(), true)
    }

    /// Run ids started by event triggers, keyed by triggering commit.
    pub fn event_claims(&self, workflow: &str) -> Result<HashMap<CommitId, String>> {
        let mut out = HashMap::new();
        for (key, claim) in self.claims(workflow)? {
            if let (Some(hex), RunCause::Commit { .. }) = (key.strip_prefix("commit-"), &claim.cause)
            {
                if let Ok(id) = hex.parse() {
                    out.insert(id, claim.run_id);
                }
            }
        }
        Ok(out)
    }

    fn claims(&self, workflow: &str) -> Result<Vec<(String, Claim)>> {
        let dir = self.trigger_dir(workflow).join("claims");
        let mut out = Vec::new();
        for key in fsutil::list_names(&dir)? {
            let text = fsutil::read_optional(&dir.join(&key))?.unwrap_or_default();
            let claim: Claim = serde_json::from_str(&text)
                .map_err(|e| Error::Corruption(format!("claim {workflow}/{key}: {e}")))?;
            out.push((key, claim));
        }
        Ok(out)
    }

    /// True if this call created the claim.
    fn claim(&self, workflow: &str, key: &str, claim: &Claim) -> Result<bool> {
        let path = self.trigger_dir(workflow).join("claims").join(key);
        fsutil::create_new(&path, serde_json::to_string(claim)?.as_bytes(), &self.tmp())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TickReport {
    /// Runs created by this tick's trigger evaluation.
    pub started: Vec<String>,
    /// Runs driven to completion or to a human gate.
    pub driven: Vec<Run>,
}

/// Evaluates triggers and drives runs.
#[derive(Debug, Clone)]
pub struct Daemon {
    engine: Engine,
}

impl Daemon {
    pub fn new(engine: Engine) -> Self {
        Daemon { engine }
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    fn repo(&self) -> &Repo {
        self.engine.repo()
    }

    /// Creates runs for new matching commits and due schedules. Failures of
    /// one workflow are logged and do not stop the others.
    pub fn evaluate(&self) -> Result<Vec<String>> {
        let repo = self.repo();
        let _t = repo.trigger_lock()?;
        let mut started = Vec::new();
        let workflows = repo.workflows()?;
        for wf in &workflows {
            if let Err(e) = self.recover_claims(wf, &mut started) {
                log::warn!("workflow {}: claim recovery failed: {e}", wf.def.name);
            }
        }
        let events = repo.events()?;
        let now = DateTime::from_timestamp_millis(repo.clock().now_millis())
            .expect("clock within chrono range");
        for wf in &workflows {
            if wf.def.event_queries().next().is_some() {
                if let Err(e) = self.evaluate_events(wf, &events, &mut started) {
                    log::warn!("workflow {}: event trigger failed: {e}", wf.def.name);
                }
            }
            if let Err(e) = self.evaluate_schedule(wf, now, &mut started) {
                log::warn!("workflow {}: schedule trigger failed: {e}", wf.def.name);
            }
        }
        Ok(started)
    }

    fn recover_claims(&self, wf: &RegisteredWorkflow, started: &mut Vec<String>) -> Result<()> {
        let repo = self.repo();
        for (key, claim) in repo.claims(&wf.def.name)? {
            if repo.run_exists(&claim.run_id) {
                continue;
            }
            log::info!("workflow {}: finishing claim {key}", wf.def.name);
            let def = repo.load_workflow_def(&claim.def_hash)?;
            let at = RegisteredWorkflow {
                def,
                def_hash: claim.def_hash,
            };
            self.engine
                .create_run(&claim.run_id, &at, claim.cause, claim.chain_depth)?;
            started.push(claim.run_id);
        }
        Ok(())
    }

    fn start(
        &self,
        wf: &RegisteredWorkflow,
        key: &str,
        cause: RunCause,
        chain_depth: u32,
        started: &mut Vec<String>,
    ) -> Result<()> {
        let claim = Claim {
            run_id: new_run_id(),
            def_hash: wf.def_hash,
            cause,
            chain_depth,
        };
        if self.repo().claim(&wf.def.name, key, &claim)? {
            self.engine
                .create_run(&claim.run_id, wf, claim.cause, chain_depth)?;
            started.push(claim.run_id);
        }
        Ok(())
    }

    fn evaluate_events(
        &self,
        wf: &RegisteredWorkflow,
        events: &[CommitEvent],
        started: &mut Vec<String>,
    ) -> Result<()> {
        let repo = self.repo();
        let name = &wf.def.name;
        let cursor = repo.trigger_cursor(name)?.min(events.len());
        if cursor == events.len() {
            return Ok(());
        }
        let owner = wf
            .def
            .owner
            .as_ref()
            .ok_or_else(|| Error::Corruption(format!("workflow {name} has no owner")))?;
        let queries = wf
            .def
            .event_queries()
            .map(|q| q.compile())
            .collect::<Result<Vec<_>>>()?;
        let acl = repo.acl()?;
        let heads: HashSet<CommitId> = repo.dataset_heads()?.into_values().collect();
        let mut tags: HashMap<CommitId, Vec<String>> = HashMap::new();
        for (t, id) in repo.tags()? {
            tags.entry(id).or_default().push(t);
        }
        let revoked = repo.revoked_set()?;
        let limit = repo.config().chain_depth_limit;
        for (i, ev) in events.iter().enumerate().skip(cursor) {
            let commit = match repo.load_commit(&ev.commit) {
                Ok(c) => c,
                Err(e) => {
                    log::warn!("workflow {name}: event {i}: {e}");
                    continue;
                }
            };
            let facts = CommitFacts {
                tags: tags.get(&commit.commit_id).map_or(&[], Vec::as_slice),
                is_head: heads.contains(&commit.commit_id),
                revoked: revoked.contains(&commit.commit_id),
            };
            let hit = queries.iter().any(|q| q.matches(&commit, facts));
            if !hit || !acl.authorize(owner, Action::Read, &commit.dataset).is_allowed() {
                continue;
            }
            if ev.depth >= limit {
                log::warn!(
                    "workflow {name}: not triggering on {}; chain depth {} reached the limit {limit}",
                    ev.commit.short(),
                    ev.depth
                );
                continue;
            }
            self.start(
                wf,
                &format!("commit-{}", ev.commit),
                RunCause::Commit {
                    commit: ev.commit,
                    depth: ev.depth,
                },
                ev.depth,
                started,
            )?;
        }
        repo.set_trigger_cursor(name, events.len())
    }

    fn evaluate_schedule(
        &self,
        wf: &RegisteredWorkflow,
        now: DateTime<Utc>,
        started: &mut Vec<String>,
    ) -> Result<()> {
        let schedules = wf.def.schedules()?;
        if schedules.is_empty() {
            return Ok(());
        }
        let repo = self.repo();
        let minute = floor_minute(now);
        if repo.last_fired(&wf.def.name)?.is_some_and(|last| last >= minute) {
            return Ok(());
        }
        if !schedules.iter().any(|s| s.matches_minute(minute)) {
            return Ok(());
        }
        self.start(
            wf,
            &format!("schedule-{}", minute.format("%Y%m%dT%H%MZ")),
            RunCause::Schedule {
                minute: minute.format("%Y-%m-%dT%H:%MZ").to_string(),
            },
            0,
            started,
        )?;
        repo.set_last_fired(&wf.def.name, minute)
    }

    /// Runs that need a driver: not finished and not parked on a human.
    pub fn drivable_runs(&self) -> Result<Vec<String>> {
        Ok(self
            .repo()
            .list_runs()?
            .into_iter()
            .filter(|r| matches!(r.state, RunState::Pending | RunState::Running))
            .map(|r| r.run_id)
            .collect())
    }

    /// One evaluation pass, then drives every open run concurrently and
    /// waits for them.
    pub fn tick(&self) -> Result<TickReport> {
        let started = self.evaluate()?;
        let ids = self.drivable_runs()?;
        let driven = std::thread::scope(|scope| {
            let handles: Vec<_> = ids
                .iter()
                .map(|id| scope.spawn(move || self.engine.try_drive(id)))
                .collect();
            handles
                .into_iter()
                .zip(&ids)
                .filter_map(|(h, id)| match h.join().expect("driver thread panicked") {
                    Ok(r) => r,
                    Err(e) => {
                        log::warn!("run {id}: {e}");
                        None
                    }
                })
                .collect()
        });
        Ok(TickReport { started, driven })
    }

    /// Evaluates triggers every `interval` and drives runs in the background
    /// until `stop` is set.
    pub fn serve(&self, interval: Duration, stop: &AtomicBool) -> Result<()> {
        let in_flight: Arc<Mutex<HashSet<String>>> = Arc::default();
        std::thread::scope(|scope| {
            while !stop.load(Ordering::SeqCst) {
                if let Err(e) = self.evaluate() {
                    log::warn!("trigger evaluation failed: {e}");
                }
                match self.drivable_runs() {
                    Ok(ids) => {
                        for id in ids {
                            if !in_flight.lock().unwrap().insert(id.clone()) {
                                continue;
                            }
                            let in_flight = Arc::clone(&in_flight);
                            scope.spawn(move || {
                                match self.engine.try_drive(&id) {
                                    Ok(Some(run)) => {
                                        log::info!("run {id} is {}", run.state.as_str())
                                    }
                                    Ok(None) => {}
                                    Err(e) => log::warn!("run {id}: {e}"),
                                }
                                in_flight.lock().unwrap().remove(&id);
                            });
                        }
                    }
                    Err(e) => log::warn!("listing runs failed: {e}"),
                }
                std::thread::sleep(interval);
            }
        });
        Ok(())
    }
}
