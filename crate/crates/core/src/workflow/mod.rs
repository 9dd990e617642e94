//! Workflows: definitions, runs, execution and triggers.

pub mod cron;
pub mod def;
pub mod engine;
pub mod executor;
pub mod pool;
pub mod run;
pub mod triggers;

pub use cron::CronSchedule;
pub use def::{OutputSpec, Step, StepInput, StepKind, Trigger, WorkflowDef};
pub use engine::{acting_principal, Engine, RegisteredWorkflow, Verdict};
pub use executor::{ProcessExecutor, StepExecutor, StepOutcome, StepTask};
pub use pool::{SlotGuard, WorkerPool};
pub use run::{JournalLine, JournalRecord, Run, RunCause, RunState, StepState, StepStatus};
pub use triggers::{Daemon, TickReport};
