//! Commit selection by dataset glob, tag, attributes and time window.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Commit;
use crate::error::{Error, Result};

/// A conjunction of filters; the empty expression matches every commit.
///
/// `after` and `before` are exclusive bounds in UTC seconds.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryExpr {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub after: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub before: Option<i64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub head_only: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub include_revoked: bool,
}

/// What the matcher needs to know about a commit besides its body.
#[derive(Debug, Clone, Copy)]
pub struct CommitFacts<'a> {
    pub tags: &'a [String],
    pub is_head: bool,
    pub revoked: bool,
}

pub struct CompiledQuery<'q> {
    expr: &'q QueryExpr,
    glob: Option<glob::Pattern>,
}

fn parse_time(key: &str, v: &str) -> Result<i64> {
    if let Ok(secs) = v.parse::<i64>() {
        return Ok(secs);
    }
    chrono::DateTime::parse_from_rfc3339(v)
        .map(|t| t.timestamp())
        .map_err(|_| Error::Validation(format!("{key}: expected seconds or RFC 3339, got {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Validation(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl QueryExpr {
    pub fn dataset(glob: impl Into<String>) -> Self {
        QueryExpr {
            dataset: Some(glob.into()),
            ..Default::default()
        }
    }

    pub fn tag(tag: impl Into<String>) -> Self {
        QueryExpr {
            tag: Some(tag.into()),
            ..Default::default()
        }
    }

    /// Parses the command-line form: space-separated `key=value` pairs with
    /// keys `dataset`, `tag`, `attr.<K>`, `after`, `before`, `head` and
    /// `revoked`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut q = QueryExpr::default();
        for pair in text.split_whitespace() {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("expected key=value, got {pair:?}")))?;
            match k {
                "dataset" => q.dataset = Some(v.into()),
                "tag" => q.tag = Some(v.into()),
                "after" => q.after = Some(parse_time(k, v)?),
                "before" => q.before = Some(parse_time(k, v)?),
                "head" => q.head_only = parse_bool(k, v)?,
                "revoked" => q.include_revoked = parse_bool(k, v)?,
                _ => match k.strip_prefix("attr.") {
                    Some(attr) if !attr.is_empty() => {
                        q.attrs.insert(attr.into(), v.into());
                    }
                    _ => return Err(Error::Validation(format!("unknown query key {k:?}"))),
                },
            }
        }
        q.compile()?;
        Ok(q)
    }

    pub fn compile(&self) -> Result<CompiledQuery<'_>> {
        let glob = self
            .dataset
            .as_deref()
            .map(|g| {
                glob::Pattern::new(g)
                    .map_err(|e| Error::Validation(format!("bad dataset glob {g:?}: {e}")))
            })
            .transpose()?;
        Ok(CompiledQuery { expr: self, glob })
    }
}

impl CompiledQuery<'_> {
    pub fn matches(&self, c: &Commit, facts: CommitFacts<'_>) -> bool {
        let q = self.expr;
        if facts.revoked && !q.include_revoked {
            return false;
        }
        if q.head_only && !facts.is_head {
            return false;
        }
        if let Some(g) = &self.glob {
            if !g.matches(&c.dataset) {
                return false;
            }
        }
        if let Some(t) = &q.tag {
            if !facts.tags.iter().any(|x| x == t) {
                return false;
            }
        }
        if q.after.is_some_and(|a| c.timestamp <= a) || q.before.is_some_and(|b| c.timestamp >= b) {
            return false;
        }
        q.attrs
            .iter()
            .all(|(k, v)| c.attributes.get(k).is_some_and(|x| x == v))
    }
}
