//! Name-keyed registries for the interchangeable strategy families: reverse-time step rules,
//! pretraining regression targets and RL policy objectives.
//!
//! Each family exposes a `builtin()` registry; callers may register extra strategies under new
//! names and select them from config strings at runtime.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

pub struct Registry<F> {
    family: &'static str,
    entries: BTreeMap<String, F>,
}

impl<F> Registry<F> {
    pub fn new(family: &'static str) -> Self {
        Self {
            family,
            entries: BTreeMap::new(),
        }
    }

    /// Registers `factory` under `name`, replacing any earlier entry with that name.
    pub fn register(&mut self, name: impl Into<String>, factory: F) -> &mut Self {
        self.entries.insert(name.into(), factory);
        self
    }

    pub fn get(&self, name: &str) -> Result<&F> {
        self.entries.get(name).ok_or_else(|| Error::UnknownStrategy {
            family: self.family,
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

impl<F> fmt::Debug for Registry<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("family", &self.family)
            .field("names", &self.names())
            .finish()
    }
}
