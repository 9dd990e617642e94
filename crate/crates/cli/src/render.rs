//! Human-readable output. JSON output is the serde form of the same values.

use std::fmt::Write;

use dsr_core::workflow::{Run, StepState};
use dsr_core::{CommitView, DiffReport};

pub fn timestamp(secs: i64) -> String {
    chrono::DateTime::from_timestamp(secs, 0)
        .map(|t| t.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_else(|| secs.to_string())
}

fn timestamp_millis(ms: i64) -> String {
    timestamp(ms.div_euclid(1000))
}

pub fn commit_line(v: &CommitView) -> String {
    let c = &v.commit;
    let mut s = format!(
        "{}  {} v{}  {}  {}  {}",
        c.commit_id.short(),
        c.dataset,
        v.version,
        timestamp(c.timestamp),
        c.author,
        c.message
    );
    if !v.tags.is_empty() {
        let _ = write!(s, "  [{}]", v.tags.join(", "));
    }
    if v.revoked {
        s.push_str("  (revoked)");
    }
    s
}

pub fn diff(d: &DiffReport) -> String {
    let mut lines: Vec<(&str, char)> = d
        .added
        .iter()
        .map(|p| (p.as_str(), 'A'))
        .chain(d.deleted.iter().map(|p| (p.as_str(), 'D')))
        .chain(d.modified.iter().map(|p| (p.as_str(), 'M')))
        .collect();
    lines.sort();
    let mut s = String::new();
    for (path, mark) in lines {
        let _ = writeln!(s, "{mark} {path}");
    }
    let _ = write!(s, "{} unchanged", d.unchanged_count);
    s
}

pub fn run_line(r: &Run) -> String {
    let mut s = format!(
        "{}  {}  {}  {}",
        r.run_id,
        r.workflow,
        r.state.as_str(),
        r.cause.describe()
    );
    let waiting: Vec<&str> = r
        .step_order
        .iter()
        .filter(|id| r.step_state(id) == StepState::AwaitingHuman)
        .map(String::as_str)
        .collect();
    if !waiting.is_empty() {
        let _ = write!(s, "  (awaiting {})", waiting.join(", "));
    }
    s
}

pub fn run_report(r: &Run) -> String {
    let mut s = format!("run {} ({}): {}\n", r.run_id, r.workflow, r.state.as_str());
    let _ = writeln!(s, "  cause: {}", r.cause.describe());
    let _ = writeln!(s, "  owner: {}", r.owner);
    let _ = writeln!(s, "  created: {}", timestamp_millis(r.created_at));
    if let Some(inputs) = &r.pinned_inputs {
        for (step, commit) in inputs {
            let _ = writeln!(s, "  input {step}: {}", commit.short());
        }
    }
    for id in &r.step_order {
        let Some(st) = r.step(id) else { continue };
        let _ = write!(s, "  step {id}: {}", st.state.as_str());
        if let Some(code) = st.exit_code {
            let _ = write!(s, ", exit {code}");
        }
        if let Some(err) = &st.error {
            let _ = write!(s, ", {err}");
        }
        s.push('\n');
        if let Some(tail) = &st.stderr_tail {
            for line in tail.lines().rev().take(5).collect::<Vec<_>>().into_iter().rev() {
                let _ = writeln!(s, "    | {line}");
            }
        }
    }
    if let Some(c) = &r.output_commit {
        let _ = writeln!(s, "  output: {}", c.short());
    }
    if let Some(f) = &r.failure {
        let _ = writeln!(s, "  failure: {f}");
    }
    if let Some(t) = r.finished_at {
        let _ = writeln!(s, "  finished: {}", timestamp_millis(t));
    }
    s.pop();
    s
}
