//! Workflow definitions: a DAG of program and human steps with triggers and
//! an optional output dataset.
//!
//! Definition file (JSON):
//!
//! ```json
//! {
//!   "name": "clean-raw",
//!   "steps": [
//!     {"id": "fetch", "kind": "program", "input": {"query": {"dataset": "raw", "head_only": true}},
//!      "argv": ["sh", "-c", "cp -r $DSR_INPUTS/. $DSR_OUTPUTS/"], "cpu_slots": 1},
//!     {"id": "review", "kind": "human", "needs": ["fetch"], "instructions": "spot-check",
//!      "terminal": true}
//!   ],
//!   "triggers": [{"kind": "event", "query": {"dataset": "raw"}},
//!                {"kind": "schedule", "cron": "0 3 * * *"}],
//!   "output": {"dataset": "clean", "tags": ["latest-clean"], "message": "{workflow} run {run_id}"}
//! }
//! ```

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::cron::CronSchedule;
use crate::error::{Error, Result};
use crate::hash::Digest;
use crate::names::{validate_name, Principal};
use crate::query::QueryExpr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Program,
    Human,
}

/// Where a source step's `inputs/` comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepInput {
    /// Resolved to exactly one commit when the run starts.
    Query(QueryExpr),
    /// The commit whose arrival fired the run's event trigger.
    Trigger,
}

fn one() -> u32 {
    1
}

fn is_one(n: &u32) -> bool {
    *n == 1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub id: String,
    pub kind: StepKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub needs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<StepInput>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub argv: Vec<String>,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub cpu_slots: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instructions: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub terminal: bool,
}

impl Step {
    pub fn program(id: &str, argv: &[&str]) -> Self {
        Step {
            id: id.into(),
            kind: StepKind::Program,
            needs: vec![],
            input: None,
            argv: argv.iter().map(|s| s.to_string()).collect(),
            cpu_slots: 1,
            timeout_secs: None,
            instructions: None,
            terminal: false,
        }
    }

    pub fn human(id: &str, instructions: &str) -> Self {
        Step {
            kind: StepKind::Human,
            argv: vec![],
            instructions: Some(instructions.into()),
            ..Step::program(id, &[])
        }
    }

    pub fn needs(mut self, ids: &[&str]) -> Self {
        self.needs = ids.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn input(mut self, input: StepInput) -> Self {
        self.input = Some(input);
        self
    }

    pub fn slots(mut self, n: u32) -> Self {
        self.cpu_slots = n;
        self
    }

    pub fn terminal(mut self) -> Self {
        self.terminal = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Trigger {
    Manual,
    Event { query: QueryExpr },
    Schedule { cron: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
    /// `{workflow}`, `{run_id}` and `{step}` are substituted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowDef {
    pub name: String,
    /// Filled in at registration; runs act with this identity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owner: Option<Principal>,
    pub steps: Vec<Step>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub triggers: Vec<Trigger>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSpec>,
}

impl WorkflowDef {
    pub fn new(name: &str, steps: Vec<Step>) -> Self {
        WorkflowDef {
            name: name.into(),
            owner: None,
            steps,
            triggers: vec![],
            output: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Validation(format!("workflow definition: {e}")))
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("definition serialises")
    }

    pub fn def_hash(&self) -> Digest {
        Digest::of(self.canonical_json().as_bytes())
    }

    pub fn step(&self, id: &str) -> Option<&Step> {
        self.steps.iter().find(|s| s.id == id)
    }

    pub fn step_index(&self, id: &str) -> Option<usize> {
        self.steps.iter().position(|s| s.id == id)
    }

    /// Steps nothing else depends on.
    fn sinks(&self) -> Vec<usize> {
        let needed: HashSet<&str> = self
            .steps
            .iter()
            .flat_map(|s| s.needs.iter().map(String::as_str))
            .collect();
        (0..self.steps.len())
            .filter(|&i| !needed.contains(self.steps[i].id.as_str()))
            .collect()
    }

    /// The step whose outputs become the workflow's output: the one marked
    /// `terminal`, else the only sink.
    pub fn terminal_step(&self) -> Option<&Step> {
        let marked: Vec<&Step> = self.steps.iter().filter(|s| s.terminal).collect();
        match marked.as_slice() {
            [one] => Some(one),
            [] => match self.sinks().as_slice() {
                [i] => Some(&self.steps[*i]),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn schedules(&self) -> Result<Vec<CronSchedule>> {
        self.triggers
            .iter()
            .filter_map(|t| match t {
                Trigger::Schedule { cron } => Some(CronSchedule::parse(cron)),
                _ => None,
            })
            .collect()
    }

    pub fn event_queries(&self) -> impl Iterator<Item = &QueryExpr> {
        self.triggers.iter().filter_map(|t| match t {
            Trigger::Event { query } => Some(query),
            _ => None,
        })
    }

    /// Step indices in dependency order, ties broken by position in the
    /// definition.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let index: HashMap<&str, usize> = self
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        let mut indegree = vec![0usize; self.steps.len()];
        let mut dependents = vec![Vec::new(); self.steps.len()];
        for (i, s) in self.steps.iter().enumerate() {
            for n in &s.needs {
                let j = *index.get(n.as_str()).ok_or_else(|| {
                    Error::Validation(format!("step {} needs unknown step {n}", s.id))
                })?;
                indegree[i] += 1;
                dependents[j].push(i);
            }
        }
        let mut ready: BinaryHeap<Reverse<usize>> = indegree
            .iter()
            .enumerate()
            .filter(|(_, d)| **d == 0)
            .map(|(i, _)| Reverse(i))
            .collect();
        let mut order = Vec::with_capacity(self.steps.len());
        while let Some(Reverse(i)) = ready.pop() {
            order.push(i);
            for &d in &dependents[i] {
                indegree[d] -= 1;
                if indegree[d] == 0 {
                    ready.push(Reverse(d));
                }
            }
        }
        if order.len() < self.steps.len() {
            return Err(Error::Cycle(self.find_cycle()));
        }
        Ok(order)
    }

    /// Step ids along one dependency cycle.
    fn find_cycle(&self) -> Vec<String> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Active,
            Done,
        }
        let index: HashMap<&str, usize> = self
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        let mut mark = vec![Mark::New; self.steps.len()];
        let mut path: Vec<usize> = Vec::new();

        fn visit(
            def: &WorkflowDef,
            index: &HashMap<&str, usize>,
            i: usize,
            mark: &mut [Mark],
            path: &mut Vec<usize>,
        ) -> Option<Vec<usize>> {
            mark[i] = Mark::Active;
            path.push(i);
            for n in &def.steps[i].needs {
                let j = index[n.as_str()];
                match mark[j] {
                    Mark::Active => {
                        let start = path.iter().position(|&p| p == j).unwrap();
                        return Some(path[start..].to_vec());
                    }
                    Mark::New => {
                        if let Some(c) = visit(def, index, j, mark, path) {
                            return Some(c);
                        }
                    }
                    Mark::Done => {}
                }
            }
            path.pop();
            mark[i] = Mark::Done;
            None
        }

        for i in 0..self.steps.len() {
            if mark[i] == Mark::New {
                if let Some(mut cycle) = visit(self, &index, i, &mut mark, &mut path) {
                    // `needs` point upstream; report in execution order.
                    cycle.reverse();
                    return cycle.into_iter().map(|k| self.steps[k].id.clone()).collect();
                }
            }
        }
        Vec::new()
    }

    pub fn validate(&self) -> Result<()> {
        validate_name("workflow", &self.name)?;
        if self.steps.is_empty() {
            return Err(Error::Validation("workflow has no steps".into()));
        }
        let mut ids = HashSet::new();
        for s in &self.steps {
            validate_name("step", &s.id)?;
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Validation(format!("duplicate step id {}", s.id)));
            }
        }
        for s in &self.steps {
            let mut seen = HashSet::new();
            for n in &s.needs {
                if !ids.contains(n.as_str()) {
                    return Err(Error::Validation(format!(
                        "step {} needs unknown step {n}",
                        s.id
                    )));
                }
                if !seen.insert(n) {
                    return Err(Error::Validation(format!("step {} lists {n} twice", s.id)));
                }
            }
            match s.kind {
                StepKind::Program if s.argv.is_empty() => {
                    return Err(Error::Validation(format!("program step {} has no argv", s.id)))
                }
                StepKind::Human if !s.argv.is_empty() => {
                    return Err(Error::Validation(format!("human step {} has an argv", s.id)))
                }
                _ => {}
            }
            if s.cpu_slots == 0 {
                return Err(Error::Validation(format!("step {} needs cpu_slots >= 1", s.id)));
            }
            if s.input.is_some() && !s.needs.is_empty() {
                return Err(Error::Validation(format!(
                    "step {} has both an input and upstream steps",
                    s.id
                )));
            }
            if let Some(StepInput::Query(q)) = &s.input {
                q.compile()?;
            }
        }
        self.topo_order()?;
        let marked = self.steps.iter().filter(|s| s.terminal).count();
        if marked > 1 {
            return Err(Error::Validation("more than one step is marked terminal".into()));
        }
        if let Some(out) = &self.output {
            validate_name("dataset", &out.dataset)?;
            for t in &out.tags {
                validate_name("tag", t)?;
            }
            if self.terminal_step().is_none() {
                return Err(Error::Validation(
                    "workflow with an output needs exactly one terminal step".into(),
                ));
            }
        }
        for q in self.event_queries() {
            q.compile()?;
        }
        self.schedules()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(def: &WorkflowDef, order: &[usize]) -> Vec<String> {
        order.iter().map(|&i| def.steps[i].id.clone()).collect()
    }

    #[test]
    fn chain_order() {
        let d = WorkflowDef::new(
            "w",
            vec![
                Step::program("C", &["true"]).needs(&["B"]),
                Step::program("A", &["true"]),
                Step::program("B", &["true"]).needs(&["A"]),
            ],
        );
        d.validate().unwrap();
        assert_eq!(ids(&d, &d.topo_order().unwrap()), ["A", "B", "C"]);
        assert_eq!(d.terminal_step().unwrap().id, "C");
    }

    #[test]
    fn two_cycle_named() {
        let d = WorkflowDef::new(
            "w",
            vec![
                Step::program("A", &["true"]).needs(&["B"]),
                Step::program("B", &["true"]).needs(&["A"]),
            ],
        );
        match d.validate() {
            Err(Error::Cycle(c)) => {
                let mut c = c;
                c.sort();
                assert_eq!(c, ["A", "B"]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn longer_cycle_reported_alone() {
        let d = WorkflowDef::new(
            "w",
            vec![
                Step::program("S", &["true"]),
                Step::program("X", &["true"]).needs(&["S", "Z"]),
                Step::program("Y", &["true"]).needs(&["X"]),
                Step::program("Z", &["true"]).needs(&["Y"]),
            ],
        );
        let Err(Error::Cycle(mut c)) = d.topo_order() else {
            panic!()
        };
        c.sort();
        assert_eq!(c, ["X", "Y", "Z"]);
    }

    #[test]
    fn diamond() {
        let d = WorkflowDef::new(
            "w",
            vec![
                Step::program("A", &["true"]),
                Step::program("B", &["true"]).needs(&["A"]),
                Step::program("C", &["true"]).needs(&["A"]),
                Step::program("D", &["true"]).needs(&["B", "C"]),
            ],
        );
        d.validate().unwrap();
        assert_eq!(ids(&d, &d.topo_order().unwrap()), ["A", "B", "C", "D"]);
    }

    #[test]
    fn structural_errors() {
        let base = || Step::program("A", &["true"]);
        let bad = [
            WorkflowDef::new("w", vec![]),
            WorkflowDef::new("w", vec![base(), base()]),
            WorkflowDef::new("w", vec![base().needs(&["nope"])]),
            WorkflowDef::new("w", vec![Step::program("A", &[])]),
            WorkflowDef::new("w", vec![Step::human("H", "x").needs(&[]), {
                let mut s = Step::human("G", "y");
                s.argv = vec!["ls".into()];
                s
            }]),
            WorkflowDef::new("w", vec![base().slots(0)]),
            WorkflowDef::new("w", vec![base().terminal(), Step::program("B", &["x"]).terminal()]),
            WorkflowDef::new(
                "w",
                vec![base(), Step::program("B", &["x"]).needs(&["A"]).input(StepInput::Trigger)],
            ),
        ];
        for d in bad {
            assert!(matches!(d.validate(), Err(Error::Validation(_))), "{d:?}");
        }
    }

    #[test]
    fn output_needs_single_terminal() {
        let mut d = WorkflowDef::new(
            "w",
            vec![Step::program("A", &["true"]), Step::program("B", &["true"])],
        );
        d.output = Some(OutputSpec {
            dataset: "out".into(),
            tags: vec![],
            message: None,
        });
        assert!(d.validate().is_err());
        d.steps[1].terminal = true;
        d.validate().unwrap();
        assert_eq!(d.terminal_step().unwrap().id, "B");
    }

    #[test]
    fn triggers_validated() {
        let mut d = WorkflowDef::new("w", vec![Step::program("A", &["true"])]);
        d.triggers = vec![Trigger::Schedule {
            cron: "*/5 * * * *".into(),
        }];
        d.validate().unwrap();
        d.triggers.push(Trigger::Schedule {
            cron: "0 0 30 2 *".into(),
        });
        assert!(d.validate().is_err());
    }

    #[test]
    fn json_form() {
        let text = r#"{"name":"w","steps":[
            {"id":"a","kind":"program","argv":["true"],"input":{"query":{"dataset":"raw"}}},
            {"id":"b","kind":"human","needs":["a"],"instructions":"look"}],
            "triggers":[{"kind":"event","query":{"dataset":"raw"}},{"kind":"manual"}],
            "output":{"dataset":"clean"}}"#;
        let d = WorkflowDef::from_json(text).unwrap();
        d.validate().unwrap();
        assert_eq!(d.steps[0].input, Some(StepInput::Query(QueryExpr::dataset("raw"))));
        let again = WorkflowDef::from_json(&d.canonical_json()).unwrap();
        assert_eq!(again.def_hash(), d.def_hash());
        let trig = r#"{"name":"w","steps":[{"id":"a","kind":"program","argv":["x"],"input":"trigger"}]}"#;
        assert_eq!(WorkflowDef::from_json(trig).unwrap().steps[0].input, Some(StepInput::Trigger));
        assert!(WorkflowDef::from_json(r#"{"name":"w","steps":[],"bogus":1}"#).is_err());
    }
}
