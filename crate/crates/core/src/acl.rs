//! Default-deny, role-based authorization.
//!
//! A principal's effective role on a dataset is the higher of its entry for
//! that dataset and its repository-wide (`*`) entry. Roles are totally
//! ordered, so a writer can also read and an admin can do everything.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::names::{validate_name, Principal};

pub const ANY_DATASET: &str = "*";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Reader,
    Writer,
    Admin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Read,
    Write,
    Admin,
}

impl Action {
    pub fn required_role(self) -> Role {
        match self {
            Action::Read => Role::Reader,
            Action::Write => Role::Writer,
            Action::Admin => Role::Admin,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Reader => "reader",
            Role::Writer => "writer",
            Role::Admin => "admin",
        })
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Read => "read",
            Action::Write => "write",
            Action::Admin => "admin",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reader" => Ok(Role::Reader),
            "writer" => Ok(Role::Writer),
            "admin" => Ok(Role::Admin),
            _ => Err(Error::Validation(format!(
                "unknown role {s:?}; expected reader, writer or admin"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AclEntry {
    pub principal: Principal,
    pub dataset: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny(String),
}

impl Decision {
    pub fn is_allowed(&self) -> bool {
        matches!(self, Decision::Allow)
    }

    pub fn into_result(self) -> Result<()> {
        match self {
            Decision::Allow => Ok(()),
            Decision::Deny(reason) => Err(Error::PermissionDenied(reason)),
        }
    }
}

pub fn validate_acl_dataset(dataset: &str) -> Result<()> {
    if dataset == ANY_DATASET {
        Ok(())
    } else {
        validate_name("dataset", dataset)
    }
}

/// The ACL table, kept sorted by `(principal, dataset)` with at most one
/// entry per pair.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AclTable {
    entries: Vec<AclEntry>,
}

impl AclTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<AclEntry>) -> Self {
        let mut t = AclTable::new();
        for e in entries {
            t.set(e);
        }
        t
    }

    pub fn entries(&self) -> &[AclEntry] {
        &self.entries
    }

    fn position(&self, principal: &Principal, dataset: &str) -> std::result::Result<usize, usize> {
        self.entries.binary_search_by(|e| {
            (&e.principal, e.dataset.as_str()).cmp(&(principal, dataset))
        })
    }

    /// Inserts or overwrites the entry for its `(principal, dataset)` pair.
    pub fn set(&mut self, entry: AclEntry) -> Option<AclEntry> {
        match self.position(&entry.principal, &entry.dataset) {
            Ok(i) => Some(std::mem::replace(&mut self.entries[i], entry)),
            Err(i) => {
                self.entries.insert(i, entry);
                None
            }
        }
    }

    pub fn remove(&mut self, principal: &Principal, dataset: &str) -> Option<AclEntry> {
        self.position(principal, dataset)
            .ok()
            .map(|i| self.entries.remove(i))
    }

    pub fn role_for(&self, principal: &Principal, dataset: &str) -> Option<Role> {
        let direct = self.position(principal, dataset).ok().map(|i| self.entries[i].role);
        let global = self
            .position(principal, ANY_DATASET)
            .ok()
            .map(|i| self.entries[i].role);
        direct.max(global)
    }

    pub fn authorize(&self, principal: &Principal, action: Action, dataset: &str) -> Decision {
        let need = action.required_role();
        match self.role_for(principal, dataset) {
            Some(role) if role >= need => Decision::Allow,
            Some(role) => Decision::Deny(format!(
                "{principal} is {role} on {dataset}; {action} needs {need}"
            )),
            None => Decision::Deny(format!("{principal} has no access to {dataset}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(s: &str) -> Principal {
        Principal::new(s).unwrap()
    }

    fn e(who: &str, ds: &str, role: Role) -> AclEntry {
        AclEntry {
            principal: p(who),
            dataset: ds.into(),
            role,
        }
    }

    #[test]
    fn default_deny() {
        let t = AclTable::new();
        assert!(!t.authorize(&p("alice"), Action::Read, "cats").is_allowed());
    }

    #[test]
    fn writer_reads_and_writes_only() {
        let t = AclTable::from_entries(vec![e("alice", "cats", Role::Writer)]);
        assert!(t.authorize(&p("alice"), Action::Read, "cats").is_allowed());
        assert!(t.authorize(&p("alice"), Action::Write, "cats").is_allowed());
        assert!(!t.authorize(&p("alice"), Action::Admin, "cats").is_allowed());
        assert!(!t.authorize(&p("alice"), Action::Read, "dogs").is_allowed());
    }

    #[test]
    fn max_of_applicable_entries() {
        let t = AclTable::from_entries(vec![
            e("bob", "*", Role::Reader),
            e("bob", "cats", Role::Admin),
        ]);
        assert!(t.authorize(&p("bob"), Action::Admin, "cats").is_allowed());
        assert!(t.authorize(&p("bob"), Action::Read, "dogs").is_allowed());
        assert!(!t.authorize(&p("bob"), Action::Write, "dogs").is_allowed());
    }

    #[test]
    fn set_overwrites_and_remove_is_idempotent() {
        let mut t = AclTable::new();
        assert!(t.set(e("a", "x", Role::Reader)).is_none());
        assert_eq!(t.set(e("a", "x", Role::Admin)).unwrap().role, Role::Reader);
        assert_eq!(t.entries().len(), 1);
        assert!(t.remove(&p("a"), "x").is_some());
        assert!(t.remove(&p("a"), "x").is_none());
    }

    fn role() -> impl Strategy<Value = Role> {
        prop_oneof![Just(Role::Reader), Just(Role::Writer), Just(Role::Admin)]
    }

    fn action() -> impl Strategy<Value = Action> {
        prop_oneof![Just(Action::Read), Just(Action::Write), Just(Action::Admin)]
    }

    proptest! {
        #[test]
        fn raising_a_role_never_revokes(
            entries in prop::collection::vec((0..3usize, 0..3usize, role()), 0..12),
            who in 0..4usize, ds in 0..3usize, act in action(), raise_global in any::<bool>(),
        ) {
            let names = ["u0", "u1", "u2", "u3"];
            let sets = ["d0", "d1", "*"];
            let mut t = AclTable::from_entries(
                entries.iter().map(|&(w, d, r)| e(names[w], sets[d], r)).collect(),
            );
            let principal = p(names[who]);
            let dataset = sets[ds.min(1)];
            let before = t.authorize(&principal, act, dataset).is_allowed();
            let target = if raise_global { "*" } else { dataset };
            let current = t.role_for(&principal, target);
            let raised = match current { None => Role::Reader, Some(Role::Reader) => Role::Writer, Some(_) => Role::Admin };
            t.set(e(names[who], target, raised));
            if before {
                prop_assert!(t.authorize(&principal, act, dataset).is_allowed());
            }
            // Anyone absent from the table is denied everything.
            prop_assert!(!t.authorize(&p("stranger"), act, dataset).is_allowed());
        }
    }
}
