//! Named parameter arrays shared between the model, the optimizer, and the
//! checkpoint container.
//!
//! Values are `Arc`-shared so a per-sample tape can alias a parameter
//! matrix without copying it; the optimizer uses copy-on-write mutation,
//! which stays in place once the tapes of the previous batch are dropped.

use std::collections::HashMap;
use std::sync::Arc;

use crate::graph::Value;

/// Where a graph leaf's gradient lands: a whole entry, or one row of an
/// embedding table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamSlot {
    pub entry: usize,
    pub row: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Value>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Append an entry; insertion order is stable and defines entry indices.
    pub fn add(&mut self, name: &str, value: Value) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter `{name}`"
        );
        let idx = self.values.len();
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        self.index.insert(name.to_string(), idx);
        idx
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn value(&self, idx: usize) -> &Arc<Value> {
        &self.values[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Value>> {
        self.index_of(name).map(|i| &self.values[i])
    }

    /// Mutable access for the optimizer (copy-on-write).
    pub fn value_mut(&mut self, idx: usize) -> &mut Value {
        Arc::make_mut(&mut self.values[idx])
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Arc<Value>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn total_numel(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }
}
