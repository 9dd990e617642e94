use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dataset, tag, principal and workflow names share one charset.
pub fn validate_name(kind: &str, name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(Error::Validation(format!("{kind} name must be nonempty")));
    }
    if let Some(c) = name
        .chars()
        .find(|c| !(c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-')))
    {
        return Err(Error::Validation(format!(
            "{kind} name {name:?} contains {c:?}; allowed: [A-Za-z0-9._-]"
        )));
    }
    if name == "." || name == ".." {
        return Err(Error::Validation(format!("{kind} name {name:?} is reserved")));
    }
    Ok(())
}

/// An asserted identity. Case-sensitive.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Principal(String);

impl Principal {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        validate_name("principal", &name)?;
        Ok(Principal(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Principal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charset() {
        assert!(validate_name("dataset", "img-train_v1.2").is_ok());
        assert!(validate_name("dataset", "").is_err());
        assert!(validate_name("dataset", "a/b").is_err());
        assert!(validate_name("dataset", "a b").is_err());
        assert!(validate_name("dataset", "..").is_err());
        assert_ne!(Principal::new("Alice").unwrap(), Principal::new("alice").unwrap());
    }
}
