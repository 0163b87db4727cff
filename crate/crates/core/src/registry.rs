//! Name-keyed registries of strategy constructors, selected at runtime from
//! config files or CLI flags.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};

type Builder<T, A> = Box<dyn Fn(&A) -> Result<T> + Send + Sync>;

pub struct Registry<T, A> {
    kind: &'static str,
    builders: BTreeMap<String, Builder<T, A>>,
}

impl<T, A> Registry<T, A> {
    pub fn new(kind: &'static str) -> Self {
        Registry {
            kind,
            builders: BTreeMap::new(),
        }
    }

    /// Registers `name`, replacing any earlier builder under the same name.
    pub fn register<F>(&mut self, name: &str, builder: F)
    where
        F: Fn(&A) -> Result<T> + Send + Sync + 'static,
    {
        self.builders.insert(name.to_string(), Box::new(builder));
    }

    pub fn names(&self) -> Vec<String> {
        self.builders.keys().cloned().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.builders.contains_key(name)
    }

    pub fn build(&self, name: &str, args: &A) -> Result<T> {
        match self.builders.get(name) {
            Some(b) => b(args),
            None => Err(Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                known: self.names().join(", "),
            }),
        }
    }
}

/// Registry of shared trait objects.
pub type ArcRegistry<T, A> = Registry<Arc<T>, A>;
