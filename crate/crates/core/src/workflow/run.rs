//! Runs and their append-only journals.
//!
//! `runs/<run_id>/journal.jsonl` holds one record per state change. The
//! in-memory [`Run`] is always the fold of its journal, and every append goes
//! through the same fold, so an illegal transition is rejected before it is
//! written.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{self, FileLock, LockMode};
use crate::hash::{CommitId, Digest};
use crate::names::Principal;
use crate::repo::Repo;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepState {
    Pending,
    Running,
    AwaitingHuman,
    Succeeded,
    Failed,
    Skipped,
}

impl StepState {
    pub const ALL: [StepState; 6] = [
        StepState::Pending,
        StepState::Running,
        StepState::AwaitingHuman,
        StepState::Succeeded,
        StepState::Failed,
        StepState::Skipped,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, StepState::Succeeded | StepState::Failed | StepState::Skipped)
    }

    /// The legal edges of the step state machine.
    pub fn can_transition(self, to: StepState) -> bool {
        use StepState::*;
        matches!(
            (self, to),
            (Pending, Running)
                | (Pending, AwaitingHuman)
                | (Pending, Skipped)
                | (Running, Succeeded)
                | (Running, Failed)
                | (AwaitingHuman, Succeeded)
                | (AwaitingHuman, Failed)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StepState::Pending => "pending",
            StepState::Running => "running",
            StepState::AwaitingHuman => "awaiting_human",
            StepState::Succeeded => "succeeded",
            StepState::Failed => "failed",
            StepState::Skipped => "skipped",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Pending,
    Running,
    AwaitingHuman,
    Succeeded,
    Failed,
}

impl RunState {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunState::Succeeded | RunState::Failed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunState::Pending => "pending",
            RunState::Running => "running",
            RunState::AwaitingHuman => "awaiting_human",
            RunState::Succeeded => "succeeded",
            RunState::Failed => "failed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "pending" => RunState::Pending,
            "running" => RunState::Running,
            "awaiting_human" => RunState::AwaitingHuman,
            "succeeded" => RunState::Succeeded,
            "failed" => RunState::Failed,
            _ => return Err(Error::Validation(format!("unknown run state {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RunCause {
    Manual { by: Principal },
    Commit { commit: CommitId, depth: u32 },
    Schedule { minute: String },
    /// A new run of an earlier run's definition and pinned inputs.
    Rerun { of: String, by: Principal },
}

impl RunCause {
    pub fn describe(&self) -> String {
        match self {
            RunCause::Manual { by } => format!("manual by {by}"),
            RunCause::Commit { commit, .. } => format!("commit {}", commit.short()),
            RunCause::Schedule { minute } => format!("schedule {minute}"),
            RunCause::Rerun { of, by } => format!("rerun of {of} by {by}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum JournalRecord {
    Created {
        run_id: String,
        workflow: String,
        def_hash: Digest,
        cause: RunCause,
        owner: Principal,
        chain_depth: u32,
        steps: Vec<String>,
    },
    InputsPinned {
        inputs: BTreeMap<String, CommitId>,
    },
    Step {
        step: String,
        from: StepState,
        to: StepState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        exit_code: Option<i32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stderr_tail: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        by: Option<Principal>,
    },
    OutputCommitted {
        commit: CommitId,
    },
    Finished {
        state: RunState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalLine {
    /// Milliseconds since the epoch.
    pub ts: i64,
    #[serde(flatten)]
    pub record: JournalRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepStatus {
    pub state: StepState,
    pub started_at: Option<i64>,
    pub ended_at: Option<i64>,
    pub exit_code: Option<i32>,
    pub error: Option<String>,
    pub stderr_tail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Run {
    pub run_id: String,
    pub workflow: String,
    pub def_hash: Digest,
    pub cause: RunCause,
    pub owner: Principal,
    pub chain_depth: u32,
    pub state: RunState,
    /// Step ids in definition order.
    pub step_order: Vec<String>,
    pub steps: BTreeMap<String, StepStatus>,
    pub pinned_inputs: Option<BTreeMap<String, CommitId>>,
    pub output_commit: Option<CommitId>,
    pub created_at: i64,
    pub finished_at: Option<i64>,
    pub failure: Option<String>,
}

impl Run {
    fn from_created(line: &JournalLine) -> Result<Self> {
        let JournalRecord::Created {
            run_id,
            workflow,
            def_hash,
            cause,
            owner,
            chain_depth,
            steps,
        } = &line.record
        else {
            return Err(Error::Corruption("run journal must start with created".into()));
        };
        Ok(Run {
            run_id: run_id.clone(),
            workflow: workflow.clone(),
            def_hash: *def_hash,
            cause: cause.clone(),
            owner: owner.clone(),
            chain_depth: *chain_depth,
            state: RunState::Pending,
            step_order: steps.clone(),
            steps: steps
                .iter()
                .map(|s| {
                    (
                        s.clone(),
                        StepStatus {
                            state: StepState::Pending,
                            started_at: None,
                            ended_at: None,
                            exit_code: None,
                            error: None,
                            stderr_tail: None,
                        },
                    )
                })
                .collect(),
            pinned_inputs: None,
            output_commit: None,
            created_at: line.ts,
            finished_at: None,
            failure: None,
        })
    }

    pub fn step(&self, id: &str) -> Option<&StepStatus> {
        self.steps.get(id)
    }

    pub fn step_state(&self, id: &str) -> StepState {
        self.steps.get(id).map_or(StepState::Pending, |s| s.state)
    }

    pub fn all_steps_terminal(&self) -> bool {
        self.steps.values().all(|s| s.state.is_terminal())
    }

    /// Folds one journal record into the run.
    pub fn apply(&mut self, line: &JournalLine) -> Result<()> {
        if self.state.is_terminal() {
            return Err(Error::WrongState(format!("run {} already finished", self.run_id)));
        }
        match &line.record {
            JournalRecord::Created { .. } => {
                return Err(Error::Corruption("duplicate created record".into()))
            }
            JournalRecord::InputsPinned { inputs } => {
                if self.pinned_inputs.is_some() {
                    return Err(Error::WrongState("inputs already pinned".into()));
                }
                self.pinned_inputs = Some(inputs.clone());
            }
            JournalRecord::Step {
                step,
                from,
                to,
                exit_code,
                error,
                stderr_tail,
                ..
            } => {
                let st = self
                    .steps
                    .get_mut(step)
                    .ok_or_else(|| Error::not_found("step", step.as_str()))?;
                if st.state != *from || !from.can_transition(*to) {
                    return Err(Error::WrongState(format!(
                        "step {step} cannot go {} -> {} (currently {})",
                        from.as_str(),
                        to.as_str(),
                        st.state.as_str()
                    )));
                }
                st.state = *to;
                match to {
                    StepState::Running | StepState::AwaitingHuman => st.started_at = Some(line.ts),
                    _ => st.ended_at = Some(line.ts),
                }
                if exit_code.is_some() {
                    st.exit_code = *exit_code;
                }
                if error.is_some() {
                    st.error = error.clone();
                }
                if stderr_tail.is_some() {
                    st.stderr_tail = stderr_tail.clone();
                }
            }
            JournalRecord::OutputCommitted { commit } => {
                if self.output_commit.is_some() {
                    return Err(Error::WrongState("output already committed".into()));
                }
                self.output_commit = Some(*commit);
            }
            JournalRecord::Finished { state, reason } => {
                if !state.is_terminal() {
                    return Err(Error::Corruption("finished with non-terminal state".into()));
                }
                if !self.all_steps_terminal() {
                    return Err(Error::WrongState("finished with live steps".into()));
                }
                self.state = *state;
                self.finished_at = Some(line.ts);
                self.failure = reason.clone();
                return Ok(());
            }
        }
        self.state = self.derived_state();
        Ok(())
    }

    fn derived_state(&self) -> RunState {
        let any = |s: StepState| self.steps.values().any(|x| x.state == s);
        if any(StepState::Running) {
            RunState::Running
        } else if any(StepState::AwaitingHuman) {
            RunState::AwaitingHuman
        } else if self.steps.values().any(|x| x.state != StepState::Pending) {
            RunState::Running
        } else {
            RunState::Pending
        }
    }

    pub fn replay(lines: &[JournalLine]) -> Result<Self> {
        let first = lines
            .first()
            .ok_or_else(|| Error::Corruption("empty run journal".into()))?;
        let mut run = Run::from_created(first)?;
        for l in &lines[1..] {
            run.apply(l)?;
        }
        Ok(run)
    }
}

/// Exclusive writer for one run's journal; holds the run lock.
#[derive(Debug)]
pub struct RunWriter {
    run: Run,
    journal: PathBuf,
    _lock: FileLock,
}

impl RunWriter {
    pub fn run(&self) -> &Run {
        &self.run
    }

    pub fn append(&mut self, repo: &Repo, record: JournalRecord) -> Result<()> {
        let line = JournalLine {
            ts: repo.clock().now_millis(),
            record,
        };
        self.run.apply(&line)?;
        fsutil::append_line(&self.journal, &serde_json::to_string(&line)?, true)
    }

    pub fn step(&mut self, repo: &Repo, step: &str, to: StepState) -> Result<()> {
        self.step_with(repo, step, to, None, None, None, None)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn step_with(
        &mut self,
        repo: &Repo,
        step: &str,
        to: StepState,
        exit_code: Option<i32>,
        error: Option<String>,
        stderr_tail: Option<String>,
        by: Option<Principal>,
    ) -> Result<()> {
        let from = self.run.step_state(step);
        self.append(
            repo,
            JournalRecord::Step {
                step: step.into(),
                from,
                to,
                exit_code,
                error,
                stderr_tail,
                by,
            },
        )
    }
}

/// A new run id: a ULID, monotonic within this process.
pub fn new_run_id() -> String {
    static GEN: Mutex<ulid::Generator> = Mutex::new(ulid::Generator::new());
    let mut g = GEN.lock().unwrap_or_else(|e| e.into_inner());
    match g.generate() {
        Ok(id) => id.to_string(),
        Err(_) => ulid::Ulid::generate().to_string(),
    }
}

impl Repo {
    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.path(&format!("runs/{run_id}"))
    }

    fn journal_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("journal.jsonl")
    }

    pub fn run_exists(&self, run_id: &str) -> bool {
        self.journal_path(run_id).is_file()
    }

    /// Writes the first journal record atomically so a run is either absent
    /// or well-formed.
    pub(crate) fn create_run_journal(&self, created: JournalRecord) -> Result<Run> {
        let JournalRecord::Created { run_id, .. } = &created else {
            return Err(Error::Corruption("runs start with a created record".into()));
        };
        crate::names::validate_name("run", run_id)?;
        let line = JournalLine {
            ts: self.clock().now_millis(),
            record: created.clone(),
        };
        let run = Run::from_created(&line)?;
        let mut text = serde_json::to_string(&line)?;
        text.push('\n');
        if !fsutil::create_new(&self.journal_path(run_id), text.as_bytes(), &self.tmp())? {
            return Err(Error::Validation(format!("run {run_id} already exists")));
        }
        Ok(run)
    }

    pub fn journal(&self, run_id: &str) -> Result<Vec<JournalLine>> {
        crate::names::validate_name("run", run_id)?;
        if !self.run_exists(run_id) {
            return Err(Error::not_found("run", run_id));
        }
        fsutil::read_lines(&self.journal_path(run_id))?
            .iter()
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }

    pub fn load_run(&self, run_id: &str) -> Result<Run> {
        Run::replay(&self.journal(run_id)?)
    }

    pub fn list_runs(&self) -> Result<Vec<Run>> {
        let mut out = Vec::new();
        for id in fsutil::list_names(&self.path("runs"))? {
            if self.run_exists(&id) {
                out.push(self.load_run(&id)?);
            }
        }
        Ok(out)
    }

    /// Takes the run's writer lock without waiting. `None` means another
    /// thread or process is driving it.
    pub fn try_open_run_writer(&self, run_id: &str) -> Result<Option<RunWriter>> {
        let lock_path = self.run_dir(run_id).join("lock");
        let Some(lock) = FileLock::try_acquire(&lock_path, LockMode::Exclusive)? else {
            return Ok(None);
        };
        let run = self.load_run(run_id)?;
        Ok(Some(RunWriter {
            run,
            journal: self.journal_path(run_id),
            _lock: lock,
        }))
    }

    pub fn open_run_writer(&self, run_id: &str) -> Result<RunWriter> {
        if !self.run_exists(run_id) {
            return Err(Error::not_found("run", run_id));
        }
        let lock = FileLock::acquire(&self.run_dir(run_id).join("lock"), LockMode::Exclusive)?;
        let run = self.load_run(run_id)?;
        Ok(RunWriter {
            run,
            journal: self.journal_path(run_id),
            _lock: lock,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn created(steps: &[&str]) -> JournalLine {
        JournalLine {
            ts: 0,
            record: JournalRecord::Created {
                run_id: "r".into(),
                workflow: "w".into(),
                def_hash: Digest::of(b"d"),
                cause: RunCause::Schedule {
                    minute: "2024-01-01T00:00".into(),
                },
                owner: Principal::new("o").unwrap(),
                chain_depth: 0,
                steps: steps.iter().map(|s| s.to_string()).collect(),
            },
        }
    }

    fn step(ts: i64, id: &str, from: StepState, to: StepState) -> JournalLine {
        JournalLine {
            ts,
            record: JournalRecord::Step {
                step: id.into(),
                from,
                to,
                exit_code: None,
                error: None,
                stderr_tail: None,
                by: None,
            },
        }
    }

    #[test]
    fn transition_table() {
        use StepState::*;
        let allowed: Vec<(StepState, StepState)> = StepState::ALL
            .iter()
            .flat_map(|&a| StepState::ALL.iter().map(move |&b| (a, b)))
            .filter(|(a, b)| a.can_transition(*b))
            .collect();
        assert_eq!(
            allowed,
            vec![
                (Pending, Running),
                (Pending, AwaitingHuman),
                (Pending, Skipped),
                (Running, Succeeded),
                (Running, Failed),
                (AwaitingHuman, Succeeded),
                (AwaitingHuman, Failed),
            ]
        );
        for s in StepState::ALL {
            if s.is_terminal() {
                assert!(StepState::ALL.iter().all(|&t| !s.can_transition(t)));
            }
        }
    }

    #[test]
    fn replay_tracks_state() {
        use StepState::*;
        let lines = vec![
            created(&["a", "h"]),
            step(1, "a", Pending, Running),
            step(2, "a", Running, Succeeded),
            step(3, "h", Pending, AwaitingHuman),
        ];
        let run = Run::replay(&lines).unwrap();
        assert_eq!(run.state, RunState::AwaitingHuman);
        assert_eq!(run.step("a").unwrap().started_at, Some(1));
        let mut bad = lines.clone();
        bad.push(step(4, "a", Succeeded, Running));
        assert!(Run::replay(&bad).is_err());
        let mut early = lines.clone();
        early.push(JournalLine {
            ts: 5,
            record: JournalRecord::Finished {
                state: RunState::Failed,
                reason: None,
            },
        });
        assert!(Run::replay(&early).is_err());
    }

    proptest! {
        // Random event sequences never leave the declared edges: every
        // record the fold accepts is an allowed transition from the step's
        // current state, and every rejected one is not.
        #[test]
        fn fold_respects_transition_table(
            events in prop::collection::vec((0..3usize, 0..6usize, 0..6usize), 0..60)
        ) {
            let ids = ["a", "b", "c"];
            let mut run = Run::replay(&[created(&ids)]).unwrap();
            for (k, (s, from, to)) in events.into_iter().enumerate() {
                let (from, to) = (StepState::ALL[from], StepState::ALL[to]);
                let before = run.step_state(ids[s]);
                let ok = run.apply(&step(k as i64, ids[s], from, to)).is_ok();
                prop_assert_eq!(ok, before == from && from.can_transition(to));
                let after = run.step_state(ids[s]);
                prop_assert_eq!(after, if ok { to } else { before });
            }
        }
    }
}
