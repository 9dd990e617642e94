//! Running a program step as a child process.

use std::collections::VecDeque;
use std::fs;
use std::io::Read;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::Duration;

use wait_timeout::ChildExt;

use crate::names::Principal;

pub const DEFAULT_STEP_TIMEOUT: Duration = Duration::from_secs(3600);
pub const STDERR_TAIL: usize = 64 * 1024;

/// Everything an executor needs to run one step.
#[derive(Debug, Clone)]
pub struct StepTask {
    pub run_id: String,
    pub step_id: String,
    pub argv: Vec<String>,
    pub inputs: PathBuf,
    pub outputs: PathBuf,
    /// Receives stdout.log and stderr.log.
    pub log_dir: PathBuf,
    pub principal: Principal,
    pub cpu_slots: usize,
    pub timeout: Duration,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepOutcome {
    pub exit_code: Option<i32>,
    /// Set when the step did not exit 0.
    pub error: Option<String>,
    pub stderr_tail: Option<String>,
}

impl StepOutcome {
    pub fn success() -> Self {
        StepOutcome::default()
    }

    pub fn failure(msg: impl Into<String>) -> Self {
        StepOutcome {
            error: Some(msg.into()),
            ..Default::default()
        }
    }

    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

pub trait StepExecutor: Send + Sync {
    fn execute(&self, task: &StepTask) -> StepOutcome;
}

/// Replaces `{inputs}`, `{outputs}`, `{run_id}` and `{step_id}` in one argument.
pub fn expand_arg(arg: &str, task: &StepTask) -> String {
    arg.replace("{inputs}", &task.inputs.to_string_lossy())
        .replace("{outputs}", &task.outputs.to_string_lossy())
        .replace("{run_id}", &task.run_id)
        .replace("{step_id}", &task.step_id)
}

/// Keeps the last `STDERR_TAIL` bytes of a stream.
fn read_tail(mut r: impl Read) -> Vec<u8> {
    let mut tail = VecDeque::with_capacity(STDERR_TAIL);
    let mut buf = [0u8; 8192];
    loop {
        match r.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                tail.extend(&buf[..n]);
                let excess = tail.len().saturating_sub(STDERR_TAIL);
                tail.drain(..excess);
            }
        }
    }
    tail.into()
}

#[derive(Debug, Clone, Default)]
pub struct ProcessExecutor;

impl StepExecutor for ProcessExecutor {
    fn execute(&self, task: &StepTask) -> StepOutcome {
        let Some((prog, args)) = task.argv.split_first() else {
            return StepOutcome::failure("empty argv");
        };
        let stdout = match fs::File::create(task.log_dir.join("stdout.log")) {
            Ok(f) => f,
            Err(e) => return StepOutcome::failure(format!("create stdout.log: {e}")),
        };
        let mut cmd = Command::new(expand_arg(prog, task));
        cmd.args(args.iter().map(|a| expand_arg(a, task)))
            .current_dir(&task.log_dir)
            .env("DSR_RUN_ID", &task.run_id)
            .env("DSR_STEP_ID", &task.step_id)
            .env("DSR_INPUTS", &task.inputs)
            .env("DSR_OUTPUTS", &task.outputs)
            .env("DSR_PRINCIPAL", task.principal.as_str())
            .env("DSR_CPU_SLOTS", task.cpu_slots.to_string())
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(Stdio::piped());
        let mut child = match cmd.spawn() {
            Ok(c) => c,
            Err(e) => return StepOutcome::failure(format!("spawn {prog}: {e}")),
        };
        let stderr = child.stderr.take().expect("stderr is piped");
        let reader = std::thread::spawn(move || read_tail(stderr));
        let status = match child.wait_timeout(task.timeout) {
            Ok(Some(s)) => Ok(s),
            Ok(None) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(format!("timed out after {}s", task.timeout.as_secs()))
            }
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(format!("wait: {e}"))
            }
        };
        let tail = reader.join().unwrap_or_default();
        let _ = fs::write(task.log_dir.join("stderr.log"), &tail);
        let tail = (!tail.is_empty()).then(|| String::from_utf8_lossy(&tail).into_owned());
        match status {
            Ok(s) if s.success() => StepOutcome {
                exit_code: Some(0),
                error: None,
                stderr_tail: tail,
            },
            Ok(s) => StepOutcome {
                exit_code: s.code(),
                error: Some(match s.code() {
                    Some(c) => format!("exited with status {c}"),
                    None => "killed by a signal".into(),
                }),
                stderr_tail: tail,
            },
            Err(msg) => StepOutcome {
                exit_code: None,
                error: Some(msg),
                stderr_tail: tail,
            },
        }
    }
}
