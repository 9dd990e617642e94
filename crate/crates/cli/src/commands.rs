use std::collections::HashSet;
use std::fs;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use dsr_core::workflow::{Daemon, Engine, RunState, Verdict, WorkerPool, WorkflowDef};
use dsr_core::{
    Action, CheckinRequest, ChunkParams, CommitId, Direction, Principal, QueryExpr, Repo,
    RepoConfig, Role, Selector,
};
use serde::Serialize;
use serde_json::json;

use crate::{render, Cli, Command, Failure, WorkflowCommand};

type Res<T = ()> = std::result::Result<T, Failure>;

struct Ctx {
    principal: Option<String>,
    repo: Option<std::path::PathBuf>,
    json: bool,
}

impl Ctx {
    fn principal(&self) -> Res<Principal> {
        let name = self
            .principal
            .as_deref()
            .ok_or_else(|| Failure::Usage("principal required".into()))?;
        Principal::new(name).map_err(|e| Failure::Usage(format!("bad principal: {e}")))
    }

    fn repo(&self) -> Res<Repo> {
        let start = match &self.repo {
            Some(p) => p.clone(),
            None => std::env::current_dir()
                .map_err(|e| dsr_core::Error::io("current directory", e))?,
        };
        Ok(Repo::discover(&start)?)
    }

    /// Prints `value` as one JSON line, or the human rendering.
    fn emit<T: Serialize>(&self, value: &T, human: impl FnOnce() -> String) -> Res {
        if self.json {
            let line = serde_json::to_string(value).map_err(dsr_core::Error::from)?;
            println!("{line}");
        } else {
            println!("{}", human());
        }
        Ok(())
    }
}

fn pool(n: Option<usize>) -> Res<Arc<WorkerPool>> {
    match n {
        Some(0) => Err(Failure::Usage("--pool must be positive".into())),
        Some(n) => Ok(WorkerPool::new(n)),
        None => Ok(WorkerPool::with_cpu_count()),
    }
}

pub fn run(cli: Cli) -> Res {
    let ctx = Ctx {
        principal: cli.principal,
        repo: cli.repo,
        json: cli.json,
    };
    let who = ctx.principal()?;
    match cli.command {
        Command::Init {
            dir,
            chunk_min,
            chunk_avg,
            chunk_max,
        } => {
            let d = ChunkParams::default();
            let chunking = ChunkParams::new(
                chunk_min.unwrap_or(d.min),
                chunk_avg.unwrap_or(d.avg),
                chunk_max.unwrap_or(d.max),
            )?;
            let root = match dir.or(ctx.repo.clone()) {
                Some(p) => p,
                None => std::env::current_dir()
                    .map_err(|e| dsr_core::Error::io("current directory", e))?,
            };
            fs::create_dir_all(&root)
                .map_err(|e| dsr_core::Error::io(format!("create {}", root.display()), e))?;
            let config = RepoConfig {
                chunking,
                ..RepoConfig::default()
            };
            let repo = Repo::init(&root, &who, config)?;
            ctx.emit(
                &json!({"repo": repo.dir(), "chunking": chunking, "admin": who}),
                || format!("initialized repository in {}", repo.dir().display()),
            )
        }
        Command::Checkin {
            dir,
            dataset,
            message,
            tags,
            attrs,
            allow_empty,
        } => {
            let repo = ctx.repo()?;
            let mut req = CheckinRequest::new(dataset, dir)
                .message(message)
                .allow_empty(allow_empty);
            for t in tags {
                req = req.tag(t);
            }
            for (k, v) in attrs {
                req = req.attr(k, v);
            }
            let out = repo.checkin(&who, req)?;
            let view = repo.view(out.commit)?;
            let s = out.stats;
            ctx.emit(
                &json!({"commit": view, "chunks": s.chunks, "new_chunks": s.new_chunks, "new_bytes": s.new_bytes}),
                || {
                    format!(
                        "committed {} to {} v{}: {} chunks, {} new ({} bytes)",
                        view.commit.commit_id.short(),
                        view.commit.dataset,
                        view.version,
                        s.chunks,
                        s.new_chunks,
                        s.new_bytes
                    )
                },
            )
        }
        Command::Checkout { select, dest, all } => {
            let repo = ctx.repo()?;
            let selector = if let Some(c) = select.commit {
                Selector::Commit(c)
            } else if let Some(d) = select.dataset {
                Selector::Head(d)
            } else {
                Selector::Query(QueryExpr::parse(&select.query.unwrap_or_default())?)
            };
            for co in repo.checkout(&who, &selector, &dest, all)? {
                let c = &co.commit;
                ctx.emit(
                    &json!({"commit_id": c.commit_id, "dataset": c.dataset, "path": co.path, "files": co.manifest.entries().len()}),
                    || {
                        format!(
                            "checked out {} ({}, {} files) into {}",
                            c.commit_id.short(),
                            c.dataset,
                            co.manifest.entries().len(),
                            co.path.display()
                        )
                    },
                )?;
            }
            Ok(())
        }
        Command::Log { dataset } => {
            let repo = ctx.repo()?;
            for c in repo.log(&who, &dataset)? {
                let v = repo.view(c)?;
                ctx.emit(&v, || render::commit_line(&v))?;
            }
            Ok(())
        }
        Command::Diff { a, b } => {
            let repo = ctx.repo()?;
            let (a, b) = (repo.resolve_commit(&a)?, repo.resolve_commit(&b)?);
            let d = repo.diff(&who, &a, &b)?;
            ctx.emit(&d, || render::diff(&d))
        }
        Command::Tag { name, commit } => {
            let repo = ctx.repo()?;
            let id = repo.resolve_commit(&commit)?;
            repo.tag(&who, &name, &id)?;
            ctx.emit(&json!({"tag": name, "commit_id": id}), || {
                format!("tagged {} as {name}", id.short())
            })
        }
        Command::Query { expr } => {
            let repo = ctx.repo()?;
            let q = QueryExpr::parse(&expr.join(" "))?;
            for c in repo.query(&who, &q)? {
                let v = repo.view(c)?;
                ctx.emit(&v, || render::commit_line(&v))?;
            }
            Ok(())
        }
        Command::DeleteDataset { name } => {
            let repo = ctx.repo()?;
            let t = repo.delete_dataset(&who, &name)?;
            ctx.emit(&t, || match &t.head {
                Some(h) => format!("deleted dataset {name} (head was {})", h.short()),
                None => format!("deleted dataset {name}"),
            })
        }
        Command::Grant {
            target,
            dataset,
            role,
        } => {
            let repo = ctx.repo()?;
            let target = Principal::new(target)?;
            let role: Role = role.parse()?;
            let e = repo.grant(&who, &target, &dataset, role)?;
            ctx.emit(&e, || format!("granted {} on {} to {}", e.role, e.dataset, e.principal))
        }
        Command::RevokeGrant { target, dataset } => {
            let repo = ctx.repo()?;
            let target = Principal::new(target)?;
            let removed = repo.revoke_grant(&who, &target, &dataset)?;
            ctx.emit(&json!({"removed": removed}), || match &removed {
                Some(e) => format!("removed {} on {} from {}", e.role, e.dataset, e.principal),
                None => format!("no grant for {target} on {dataset}"),
            })
        }
        Command::Workflow(cmd) => workflow(&ctx, &who, cmd),
        Command::Daemon {
            pool: n,
            once,
            interval_ms,
        } => {
            let repo = ctx.repo()?;
            let daemon = Daemon::new(Engine::new(repo, pool(n)?));
            if once {
                let report = daemon.tick()?;
                for id in &report.started {
                    ctx.emit(&json!({"started": id}), || format!("started {id}"))?;
                }
                for r in &report.driven {
                    ctx.emit(r, || render::run_line(r))?;
                }
                return Ok(());
            }
            let stop = Arc::new(AtomicBool::new(false));
            let flag = Arc::clone(&stop);
            ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))
                .map_err(|e| Failure::Usage(format!("cannot install signal handler: {e}")))?;
            log::info!("daemon started");
            daemon.serve(Duration::from_millis(interval_ms), &stop)?;
            Ok(())
        }
        Command::Lineage { commit, down, .. } => {
            let repo = ctx.repo()?;
            let id = repo.resolve_commit(&commit)?;
            let dir = if down { Direction::Down } else { Direction::Up };
            lineage(&ctx, &repo, &who, &id, dir)
        }
        Command::Revoke {
            commit,
            no_cascade,
            message,
        } => {
            let repo = ctx.repo()?;
            let id = repo.resolve_commit(&commit)?;
            let out = repo.revoke(&who, &id, &message, !no_cascade)?;
            match &out.mark {
                Some(m) => ctx.emit(m, || {
                    let mut s = format!("revoked {}", m.commit_id.short());
                    if !m.closure.is_empty() {
                        let ids: Vec<String> = m.closure.iter().map(|c| c.short()).collect();
                        s.push_str(&format!(
                            " and {} derived: {}",
                            ids.len(),
                            ids.join(" ")
                        ));
                    }
                    s
                }),
                None => ctx.emit(&json!({"commit_id": id, "already_revoked": true}), || {
                    format!("{} was already revoked", id.short())
                }),
            }
        }
        Command::Gc => {
            let repo = ctx.repo()?;
            let g = repo.gc(&who)?;
            ctx.emit(&g, || {
                format!(
                    "gc: {} live manifests, {} chunks scanned, {} deleted, {} bytes freed",
                    g.live_manifests, g.report.scanned, g.report.deleted, g.report.bytes_freed
                )
            })
        }
    }
}

fn workflow(ctx: &Ctx, who: &Principal, cmd: WorkflowCommand) -> Res {
    let repo = ctx.repo()?;
    match cmd {
        WorkflowCommand::Register { file } => {
            let text = fs::read_to_string(&file)
                .map_err(|e| dsr_core::Error::io(format!("read {}", file.display()), e))?;
            let reg = repo.register_workflow(who, WorkflowDef::from_json(&text)?)?;
            ctx.emit(
                &json!({"name": reg.def.name, "def_hash": reg.def_hash, "owner": reg.def.owner}),
                || format!("registered {} {}", reg.def.name, reg.def_hash.short()),
            )
        }
        WorkflowCommand::Run { name, pool: n } => {
            let run = Engine::new(repo, pool(n)?).run_workflow(who, &name)?;
            ctx.emit(&run, || render::run_report(&run))
        }
        WorkflowCommand::Report { run_id } => {
            let run = repo.load_run(&run_id)?;
            ctx.emit(&run, || render::run_report(&run))
        }
        WorkflowCommand::Runs { state, workflow } => {
            let state = state.as_deref().map(RunState::parse).transpose()?;
            for r in repo.list_runs()? {
                if state.is_some_and(|s| s != r.state)
                    || workflow.as_ref().is_some_and(|w| *w != r.workflow)
                {
                    continue;
                }
                ctx.emit(&r, || render::run_line(&r))?;
            }
            Ok(())
        }
        WorkflowCommand::Approve {
            run_id,
            step_id,
            reject,
            attach,
            pool: n,
        } => {
            let verdict = if reject { Verdict::Reject } else { Verdict::Approve };
            let run = Engine::new(repo, pool(n)?).approve(
                who,
                &run_id,
                &step_id,
                verdict,
                attach.as_deref(),
            )?;
            ctx.emit(&run, || render::run_report(&run))
        }
        WorkflowCommand::Rerun { run_id, pool: n } => {
            let run = Engine::new(repo, pool(n)?).rerun(who, &run_id)?;
            ctx.emit(&run, || render::run_report(&run))
        }
    }
}

#[derive(Serialize)]
struct LineageNode {
    commit_id: CommitId,
    depth: usize,
    dataset: Option<String>,
    version: Option<u32>,
    revoked: bool,
    /// Already printed higher up; not expanded again.
    repeat: bool,
}

/// Depth-first tree over parent and provenance edges. Commits the principal
/// cannot read are shown without their dataset.
fn lineage(ctx: &Ctx, repo: &Repo, who: &Principal, root: &CommitId, dir: Direction) -> Res {
    let c = repo.load_commit(root)?;
    repo.authorize(who, Action::Read, &c.dataset)?;
    let graph = repo.lineage_graph()?;
    let revoked = repo.revoked_set()?;
    let mut seen = HashSet::new();
    let mut stack = vec![(*root, 0usize)];
    while let Some((id, depth)) = stack.pop() {
        let repeat = !seen.insert(id);
        let commit = repo.load_commit(&id)?;
        let visible = repo.can(who, Action::Read, &commit.dataset)?;
        let node = LineageNode {
            commit_id: id,
            depth,
            dataset: visible.then(|| commit.dataset.clone()),
            version: if visible { Some(repo.version_of(&commit)?) } else { None },
            revoked: revoked.contains(&id),
            repeat,
        };
        ctx.emit(&node, || {
            let mut s = format!("{}{}", "  ".repeat(depth), id.short());
            match (&node.dataset, node.version) {
                (Some(d), Some(v)) => s.push_str(&format!(" {d} v{v}")),
                _ => s.push_str(" (no access)"),
            }
            if node.revoked {
                s.push_str(" (revoked)");
            }
            if repeat {
                s.push_str(" (see above)");
            }
            s
        })?;
        if repeat {
            continue;
        }
        let mut next = Vec::new();
        for n in graph.neighbours(&id, dir) {
            let nc = repo.load_commit(n)?;
            next.push((nc.dataset.clone(), repo.version_of(&nc)?, *n));
        }
        next.sort();
        for (_, _, n) in next.into_iter().rev() {
            stack.push((n, depth + 1));
        }
    }
    Ok(())
}

