//! Workflow registration, run execution and human approvals.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::def::{StepInput, StepKind, WorkflowDef};
use super::executor::{ProcessExecutor, StepExecutor, StepOutcome, StepTask, DEFAULT_STEP_TIMEOUT};
use super::pool::WorkerPool;
use super::run::{new_run_id, JournalRecord, Run, RunCause, RunState, RunWriter, StepState};
use crate::acl::{Action, ANY_DATASET};
use crate::dataset::CheckinRequest;
use crate::error::{Error, IoContext, Result};
use crate::fsutil;
use crate::hash::{CommitId, Digest};
use crate::lineage::{ProvenanceRecord, WorkflowRef};
use crate::names::{validate_name, Principal};
use crate::repo::Repo;

const OUTPUT_COMMIT_ATTEMPTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisteredWorkflow {
    pub def: WorkflowDef,
    pub def_hash: Digest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Approve,
    Reject,
}

impl Repo {
    fn workflow_def_path(&self, hash: &Digest) -> PathBuf {
        self.path(&format!("workflows/defs/{hash}.json"))
    }

    fn workflow_ref_path(&self, name: &str) -> PathBuf {
        self.path(&format!("workflows/refs/{name}"))
    }

    pub fn load_workflow_def(&self, hash: &Digest) -> Result<WorkflowDef> {
        let path = self.workflow_def_path(hash);
        let text = fsutil::read_optional(&path)?
            .ok_or_else(|| Error::not_found("workflow definition", hash.to_hex()))?;
        if Digest::of(text.as_bytes()) != *hash {
            return Err(Error::Corruption(format!("workflow definition {hash} is damaged")));
        }
        WorkflowDef::from_json(&text)
    }

    /// The current version registered under `name`.
    pub fn workflow(&self, name: &str) -> Result<RegisteredWorkflow> {
        validate_name("workflow", name)?;
        let text = fsutil::read_optional(&self.workflow_ref_path(name))?
            .ok_or_else(|| Error::not_found("workflow", name))?;
        let def_hash: Digest = text
            .trim()
            .parse()
            .map_err(|_| Error::Corruption(format!("bad workflow ref {name}")))?;
        Ok(RegisteredWorkflow {
            def: self.load_workflow_def(&def_hash)?,
            def_hash,
        })
    }

    pub fn workflows(&self) -> Result<Vec<RegisteredWorkflow>> {
        fsutil::list_names(&self.path("workflows/refs"))?
            .iter()
            .map(|n| self.workflow(n))
            .collect()
    }

    /// Validates and stores a definition. `principal` becomes its owner.
    /// Replacing an existing workflow needs its owner or a repository admin.
    pub fn register_workflow(
        &self,
        principal: &Principal,
        mut def: WorkflowDef,
    ) -> Result<RegisteredWorkflow> {
        def.owner = None;
        def.validate()?;
        if let Some(out) = &def.output {
            self.authorize(principal, Action::Write, &out.dataset)?;
        }
        def.owner = Some(principal.clone());
        let _w = self.write_lock()?;
        let _m = self.meta_lock()?;
        match self.workflow(&def.name) {
            Ok(old) => {
                let owner_ok = old.def.owner.as_ref() == Some(principal);
                if !owner_ok && !self.can(principal, Action::Admin, ANY_DATASET)? {
                    return Err(Error::PermissionDenied(format!(
                        "workflow {} belongs to {}",
                        def.name,
                        old.def.owner.map_or_else(|| "nobody".into(), |o| o.to_string())
                    )));
                }
            }
            Err(Error::NotFound { .. }) => {}
            Err(e) => return Err(e),
        }
        let text = def.canonical_json();
        let def_hash = Digest::of(text.as_bytes());
        fsutil::create_new(&self.workflow_def_path(&def_hash), text.as_bytes(), &self.tmp())?;
        self.init_trigger_cursor(&def.name)?;
        fsutil::atomic_write(
            &self.workflow_ref_path(&def.name),
            format!("{def_hash}\n").as_bytes(),
            &self.tmp(),
            true,
        )?;
        Ok(RegisteredWorkflow { def, def_hash })
    }

    fn step_dir(&self, run_id: &str, step: &str) -> PathBuf {
        self.run_dir(run_id).join("steps").join(step)
    }

    /// The tree a finished step produced.
    pub fn step_outputs(&self, run_id: &str, step: &str) -> PathBuf {
        self.step_dir(run_id, step).join("outputs")
    }

    pub fn step_inputs(&self, run_id: &str, step: &str) -> PathBuf {
        self.step_dir(run_id, step).join("inputs")
    }
}

/// The identity a run acts with: the principal that registered the workflow,
/// whoever started the run.
pub fn acting_principal(run: &Run) -> &Principal {
    &run.owner
}

fn owner_of(def: &WorkflowDef) -> Result<&Principal> {
    def.owner
        .as_ref()
        .ok_or_else(|| Error::Corruption(format!("workflow {} has no owner", def.name)))
}

#[derive(Debug, Clone)]
enum InputSource {
    Empty,
    Commit(CommitId),
    Upstream(Vec<String>),
}

/// Executes runs against a repository with a shared worker pool.
#[derive(Clone)]
pub struct Engine {
    repo: Repo,
    pool: Arc<WorkerPool>,
    executor: Arc<dyn StepExecutor>,
    step_timeout: Duration,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("repo", &self.repo)
            .field("pool", &self.pool.size())
            .finish()
    }
}

impl Engine {
    pub fn new(repo: Repo, pool: Arc<WorkerPool>) -> Self {
        Engine {
            repo,
            pool,
            executor: Arc::new(ProcessExecutor),
            step_timeout: DEFAULT_STEP_TIMEOUT,
        }
    }

    pub fn with_executor(mut self, executor: Arc<dyn StepExecutor>) -> Self {
        self.executor = executor;
        self
    }

    /// Default for steps without their own `timeout_secs`.
    pub fn with_step_timeout(mut self, timeout: Duration) -> Self {
        self.step_timeout = timeout;
        self
    }

    pub fn repo(&self) -> &Repo {
        &self.repo
    }

    pub fn pool(&self) -> &Arc<WorkerPool> {
        &self.pool
    }

    /// Starting a run by hand needs write access to the output dataset, or
    /// ownership (or repository admin) for workflows without one, plus read
    /// access to every input dataset named without wildcards.
    pub fn authorize_run(&self, principal: &Principal, def: &WorkflowDef) -> Result<()> {
        match &def.output {
            Some(out) => self.repo.authorize(principal, Action::Write, &out.dataset)?,
            None => self.authorize_owner_or_admin(principal, def)?,
        }
        for s in &def.steps {
            if let Some(StepInput::Query(q)) = &s.input {
                if let Some(ds) = q.dataset.as_deref().filter(|d| !is_glob(d)) {
                    self.repo.authorize(principal, Action::Read, ds)?;
                }
            }
        }
        Ok(())
    }

    /// Human steps may be decided by the owner or a writer on the output.
    pub fn authorize_approval(&self, principal: &Principal, def: &WorkflowDef) -> Result<()> {
        if owner_of(def)? == principal {
            return Ok(());
        }
        match &def.output {
            Some(out) => self.repo.authorize(principal, Action::Write, &out.dataset),
            None => self.authorize_owner_or_admin(principal, def),
        }
    }

    fn authorize_owner_or_admin(&self, principal: &Principal, def: &WorkflowDef) -> Result<()> {
        if owner_of(def)? == principal || self.repo.can(principal, Action::Admin, ANY_DATASET)? {
            Ok(())
        } else {
            Err(Error::PermissionDenied(format!(
                "{principal} does not own workflow {}",
                def.name
            )))
        }
    }


    /// Starts `name` by hand and drives it until it finishes or waits on a
    /// human step.
    pub fn run_workflow(&self, principal: &Principal, name: &str) -> Result<Run> {
        let wf = self.repo.workflow(name)?;
        self.authorize_run(principal, &wf.def)?;
        let run = self.create_run(
            &new_run_id(),
            &wf,
            RunCause::Manual {
                by: principal.clone(),
            },
            0,
        )?;
        self.drive(&run.run_id)
    }

    /// Runs an earlier run's definition snapshot again against the same
    /// pinned input commits, whatever the heads and registration are now.
    pub fn rerun(&self, principal: &Principal, run_id: &str) -> Result<Run> {
        let old = self.repo.load_run(run_id)?;
        let inputs = old.pinned_inputs.clone().ok_or_else(|| {
            Error::WrongState(format!("run {run_id} never pinned its inputs"))
        })?;
        let wf = RegisteredWorkflow {
            def: self.repo.load_workflow_def(&old.def_hash)?,
            def_hash: old.def_hash,
        };
        self.authorize_run(principal, &wf.def)?;
        let run = self.create_run(
            &new_run_id(),
            &wf,
            RunCause::Rerun {
                of: run_id.into(),
                by: principal.clone(),
            },
            old.chain_depth,
        )?;
        let mut w = self.repo.open_run_writer(&run.run_id)?;
        w.append(&self.repo, JournalRecord::InputsPinned { inputs })?;
        self.drive_writer(w)
    }

    pub fn create_run(
        &self,
        run_id: &str,
        wf: &RegisteredWorkflow,
        cause: RunCause,
        chain_depth: u32,
    ) -> Result<Run> {
        let owner = owner_of(&wf.def)?.clone();
        let run = self.repo.create_run_journal(JournalRecord::Created {
            run_id: run_id.into(),
            workflow: wf.def.name.clone(),
            def_hash: wf.def_hash,
            cause,
            owner,
            chain_depth,
            steps: wf.def.steps.iter().map(|s| s.id.clone()).collect(),
        })?;
        log::info!("created run {run_id} of {}", wf.def.name);
        Ok(run)
    }

    /// Drives a run as far as it can go, waiting for another driver first.
    pub fn drive(&self, run_id: &str) -> Result<Run> {
        let w = self.repo.open_run_writer(run_id)?;
        self.drive_writer(w)
    }

    /// Like [`Engine::drive`] but returns `None` if someone else holds the run.
    pub fn try_drive(&self, run_id: &str) -> Result<Option<Run>> {
        match self.repo.try_open_run_writer(run_id)? {
            Some(w) => self.drive_writer(w).map(Some),
            None => Ok(None),
        }
    }

    /// Records a human decision and resumes the run.
    pub fn approve(
        &self,
        principal: &Principal,
        run_id: &str,
        step_id: &str,
        verdict: Verdict,
        attached: Option<&Path>,
    ) -> Result<Run> {
        let mut w = self.repo.open_run_writer(run_id)?;
        let def = self.repo.load_workflow_def(&w.run().def_hash)?;
        self.authorize_approval(principal, &def)?;
        let Some(status) = w.run().step(step_id) else {
            return Err(Error::not_found("step", step_id));
        };
        if status.state != StepState::AwaitingHuman {
            return Err(Error::WrongState(format!(
                "step {step_id} is {}, not awaiting_human",
                status.state.as_str()
            )));
        }
        match verdict {
            Verdict::Approve => {
                let src = match attached {
                    Some(dir) => {
                        if !dir.is_dir() {
                            return Err(Error::Validation(format!(
                                "{} is not a directory",
                                dir.display()
                            )));
                        }
                        dir.to_owned()
                    }
                    None => self.repo.step_inputs(run_id, step_id),
                };
                let out = self.repo.step_outputs(run_id, step_id);
                reset_dir(&out)?;
                fsutil::copy_tree(&src, &out)?;
                w.step_with(
                    &self.repo,
                    step_id,
                    StepState::Succeeded,
                    None,
                    None,
                    None,
                    Some(principal.clone()),
                )?;
            }
            Verdict::Reject => {
                w.step_with(
                    &self.repo,
                    step_id,
                    StepState::Failed,
                    None,
                    Some(format!("rejected by {principal}")),
                    None,
                    Some(principal.clone()),
                )?;
            }
        }
        self.drive_writer(w)
    }

    fn drive_writer(&self, mut w: RunWriter) -> Result<Run> {
        if w.run().state.is_terminal() {
            return Ok(w.run().clone());
        }
        let def = self.repo.load_workflow_def(&w.run().def_hash)?;
        let interrupted: Vec<String> = w
            .run()
            .steps
            .iter()
            .filter(|(_, s)| s.state == StepState::Running)
            .map(|(id, _)| id.clone())
            .collect();
        for id in interrupted {
            log::warn!("run {}: step {id} was interrupted", w.run().run_id);
            w.step_with(
                &self.repo,
                &id,
                StepState::Failed,
                None,
                Some("interrupted".into()),
                None,
                None,
            )?;
        }
        if w.run().pinned_inputs.is_none() {
            match self.pin_inputs(&def, w.run()) {
                Ok(inputs) => w.append(&self.repo, JournalRecord::InputsPinned { inputs })?,
                Err(e) => {
                    let reason = format!("input resolution failed: {}: {e}", e.code());
                    self.fail_run(&mut w, &def, reason)?;
                    return Ok(w.run().clone());
                }
            }
        }
        self.schedule(&def, &mut w)?;
        self.finish_if_done(&def, &mut w)?;
        Ok(w.run().clone())
    }

    /// Resolves each source step's input to exactly one commit.
    fn pin_inputs(&self, def: &WorkflowDef, run: &Run) -> Result<BTreeMap<String, CommitId>> {
        let actor = acting_principal(run);
        let mut out = BTreeMap::new();
        for s in &def.steps {
            let id = match &s.input {
                None => continue,
                Some(StepInput::Query(q)) => {
                    if let Some(ds) = q.dataset.as_deref().filter(|d| !is_glob(d)) {
                        self.repo.authorize(actor, Action::Read, ds)?;
                    }
                    let hits = self.repo.query(actor, q)?;
                    match hits.as_slice() {
                        [] => return Err(Error::NoMatch),
                        [one] => one.commit_id,
                        many => return Err(Error::AmbiguousQuery(many.len())),
                    }
                }
                Some(StepInput::Trigger) => match &run.cause {
                    RunCause::Commit { commit, .. } => {
                        let c = self.repo.load_commit(commit)?;
                        self.repo.authorize(actor, Action::Read, &c.dataset)?;
                        if self.repo.is_revoked(commit)? {
                            return Err(Error::RevokedData(*commit));
                        }
                        *commit
                    }
                    other => {
                        return Err(Error::Validation(format!(
                            "step {} reads the triggering commit but the run was started by {}",
                            s.id,
                            other.describe()
                        )))
                    }
                },
            };
            out.insert(s.id.clone(), id);
        }
        Ok(out)
    }

    fn fail_run(&self, w: &mut RunWriter, def: &WorkflowDef, reason: String) -> Result<()> {
        for s in &def.steps {
            if w.run().step_state(&s.id) == StepState::Pending {
                w.step(&self.repo, &s.id, StepState::Skipped)?;
            }
        }
        w.append(
            &self.repo,
            JournalRecord::Finished {
                state: RunState::Failed,
                reason: Some(reason),
            },
        )
    }

    fn input_source(&self, def: &WorkflowDef, run: &Run, step: usize) -> InputSource {
        let s = &def.steps[step];
        if !s.needs.is_empty() {
            return InputSource::Upstream(s.needs.clone());
        }
        match run.pinned_inputs.as_ref().and_then(|m| m.get(&s.id)) {
            Some(id) => InputSource::Commit(*id),
            None => InputSource::Empty,
        }
    }

    /// Fills `inputs/` (read-only) and an empty `outputs/` for a step.
    fn stage(&self, run_id: &str, step: &str, source: &InputSource) -> Result<()> {
        let inputs = self.repo.step_inputs(run_id, step);
        reset_dir(&inputs)?;
        reset_dir(&self.repo.step_outputs(run_id, step))?;
        match source {
            InputSource::Empty => {}
            InputSource::Commit(id) => {
                if self.repo.is_revoked(id)? {
                    return Err(Error::RevokedData(*id));
                }
                let c = self.repo.load_commit(id)?;
                let m = self.repo.store().load_manifest(&c.manifest_id)?;
                self.repo.materialize(&m, &inputs)?;
            }
            InputSource::Upstream(needs) if needs.len() == 1 => {
                fsutil::copy_tree(&self.repo.step_outputs(run_id, &needs[0]), &inputs)?;
            }
            InputSource::Upstream(needs) => {
                for n in needs {
                    fsutil::copy_tree(&self.repo.step_outputs(run_id, n), &inputs.join(n))?;
                }
            }
        }
        fsutil::make_files_readonly(&inputs)
    }

    /// Runs every step that can run, launching program steps greedily in
    /// topological order as pool slots allow.
    fn schedule(&self, def: &WorkflowDef, w: &mut RunWriter) -> Result<()> {
        let order = def.topo_order()?;
        let run_id = w.run().run_id.clone();
        let actor = acting_principal(w.run()).clone();
        let (tx, rx) = mpsc::channel::<(String, StepOutcome)>();
        std::thread::scope(|scope| -> Result<()> {
            let mut running = 0usize;
            loop {
                let mut ready = Vec::new();
                for &i in &order {
                    let s = &def.steps[i];
                    if w.run().step_state(&s.id) != StepState::Pending {
                        continue;
                    }
                    let blocked = s.needs.iter().find(|n| {
                        matches!(
                            w.run().step_state(n),
                            StepState::Failed | StepState::Skipped
                        )
                    });
                    if let Some(n) = blocked {
                        w.step_with(
                            &self.repo,
                            &s.id,
                            StepState::Skipped,
                            None,
                            Some(format!("upstream step {n} did not succeed")),
                            None,
                            None,
                        )?;
                    } else if s
                        .needs
                        .iter()
                        .all(|n| w.run().step_state(n) == StepState::Succeeded)
                    {
                        ready.push(i);
                    }
                }
                for i in ready {
                    let s = &def.steps[i];
                    let source = self.input_source(def, w.run(), i);
                    if s.kind == StepKind::Human {
                        w.step(&self.repo, &s.id, StepState::AwaitingHuman)?;
                        if let Err(e) = self.stage(&run_id, &s.id, &source) {
                            w.step_with(
                                &self.repo,
                                &s.id,
                                StepState::Failed,
                                None,
                                Some(format!("staging inputs: {e}")),
                                None,
                                None,
                            )?;
                        }
                        continue;
                    }
                    let slots = s.cpu_slots as usize;
                    let guard = match self.pool.try_acquire(slots) {
                        Some(g) => g,
                        None if running == 0 => self.pool.acquire(slots),
                        None => break,
                    };
                    w.step(&self.repo, &s.id, StepState::Running)?;
                    running += 1;
                    let task = StepTask {
                        run_id: run_id.clone(),
                        step_id: s.id.clone(),
                        argv: s.argv.clone(),
                        inputs: self.repo.step_inputs(&run_id, &s.id),
                        outputs: self.repo.step_outputs(&run_id, &s.id),
                        log_dir: self.repo.step_dir(&run_id, &s.id),
                        principal: actor.clone(),
                        cpu_slots: guard.slots(),
                        timeout: s.timeout_secs.map_or(self.step_timeout, Duration::from_secs),
                    };
                    let tx = tx.clone();
                    scope.spawn(move || {
                        let outcome = match self.stage(&task.run_id, &task.step_id, &source) {
                            Ok(()) => self.executor.execute(&task),
                            Err(e) => StepOutcome::failure(format!("staging inputs: {e}")),
                        };
                        drop(guard);
                        let _ = tx.send((task.step_id, outcome));
                    });
                }
                if running == 0 {
                    return Ok(());
                }
                let (step, outcome) = rx.recv().expect("a step thread is still running");
                running -= 1;
                let to = if outcome.succeeded() {
                    StepState::Succeeded
                } else {
                    log::warn!(
                        "run {run_id}: step {step} failed: {}",
                        outcome.error.as_deref().unwrap_or("")
                    );
                    StepState::Failed
                };
                w.step_with(
                    &self.repo,
                    &step,
                    to,
                    outcome.exit_code,
                    outcome.error,
                    outcome.stderr_tail,
                    None,
                )?;
            }
        })
    }

    fn finish_if_done(&self, def: &WorkflowDef, w: &mut RunWriter) -> Result<()> {
        if !w.run().all_steps_terminal() {
            return Ok(());
        }
        let order = def.topo_order()?;
        let failed = order.iter().map(|&i| &def.steps[i]).find(|s| {
            w.run().step_state(&s.id) != StepState::Succeeded
        });
        if let Some(s) = failed {
            let st = w.run().step(&s.id).expect("step exists");
            let reason = match &st.error {
                Some(e) => format!("step {} {}: {e}", s.id, st.state.as_str()),
                None => format!("step {} {}", s.id, st.state.as_str()),
            };
            return w.append(
                &self.repo,
                JournalRecord::Finished {
                    state: RunState::Failed,
                    reason: Some(reason),
                },
            );
        }
        if def.output.is_some() && w.run().output_commit.is_none() {
            match self.commit_output(def, w.run()) {
                Ok(commit) => w.append(&self.repo, JournalRecord::OutputCommitted { commit })?,
                Err(e) => {
                    return w.append(
                        &self.repo,
                        JournalRecord::Finished {
                            state: RunState::Failed,
                            reason: Some(format!("output commit failed: {}: {e}", e.code())),
                        },
                    )
                }
            }
        }
        w.append(
            &self.repo,
            JournalRecord::Finished {
                state: RunState::Succeeded,
                reason: None,
            },
        )
    }

    /// Checks the terminal step's outputs into the output dataset with the
    /// pinned inputs as extra parents, then records provenance. Safe to
    /// repeat after a crash.
    fn commit_output(&self, def: &WorkflowDef, run: &Run) -> Result<CommitId> {
        let out = def.output.as_ref().expect("caller checked");
        let terminal = def.terminal_step().expect("validated at registration");
        let inputs: Vec<CommitId> = run
            .pinned_inputs
            .iter()
            .flat_map(|m| m.values().copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let existing = self.repo.all_commits()?.into_iter().find(|c| {
            c.dataset == out.dataset
                && c.attributes.get("run_id") == Some(&run.run_id)
                && c.attributes.get("workflow") == Some(&def.name)
        });
        let commit = match existing {
            Some(c) => c.commit_id,
            None => {
                let message = out
                    .message
                    .as_deref()
                    .unwrap_or("{workflow}: run {run_id}")
                    .replace("{workflow}", &def.name)
                    .replace("{run_id}", &run.run_id)
                    .replace("{step}", &terminal.id);
                let mut req = CheckinRequest::new(
                    out.dataset.clone(),
                    self.repo.step_outputs(&run.run_id, &terminal.id),
                )
                .message(message)
                .attr("workflow", def.name.clone())
                .attr("run_id", run.run_id.clone())
                .allow_empty(true);
                req.tags = out.tags.clone();
                req.derived_from = inputs.clone();
                req.move_tags = true;
                req.chain_depth = run.chain_depth + 1;
                let actor = acting_principal(run);
                let mut attempt = 0;
                loop {
                    attempt += 1;
                    match self.repo.checkin(actor, req.clone()) {
                        Err(Error::Conflict { .. }) if attempt < OUTPUT_COMMIT_ATTEMPTS => continue,
                        r => break r?.commit.commit_id,
                    }
                }
            }
        };
        if self.repo.provenance_of(&commit)?.is_none() {
            self.repo.record_provenance(&ProvenanceRecord {
                output_commit: commit,
                input_commits: inputs,
                workflow: WorkflowRef {
                    name: def.name.clone(),
                    def_hash: run.def_hash,
                },
                run_id: run.run_id.clone(),
                terminal_step: terminal.id.clone(),
                recorded_at: self.repo.now_secs(),
            })?;
        }
        Ok(commit)
    }
}

fn is_glob(pattern: &str) -> bool {
    pattern.contains(['*', '?', '['])
}

/// Empties `dir`, creating it if needed. Read-only files inside are fine
/// because their directories stay writable.
fn reset_dir(dir: &Path) -> Result<()> {
    match fs::remove_dir_all(dir) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(Error::io(format!("clear {}", dir.display()), e)),
    }
    fs::create_dir_all(dir).ctx(|| format!("create {}", dir.display()))
}
