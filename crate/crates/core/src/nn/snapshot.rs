use std::collections::BTreeSet;
use std::fmt;

use crate::tensor::Tensor;

use super::ModelError;

/// Which block of the network a parameter belongs to.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockTag {
    /// Shared feature extractor, averaged across nodes.
    Representation,
    /// Head of the named task, owned by the node that trains that task.
    Task(String),
}

pub(crate) const HEAD_PREFIX: &str = "head.";

impl BlockTag {
    /// Tag implied by a parameter path: everything under `head.<task>.` is
    /// task-owned, the rest is representation.
    pub fn for_name(name: &str) -> Self {
        match name.strip_prefix(HEAD_PREFIX).and_then(|rest| rest.split_once('.')) {
            Some((task, _)) if !task.is_empty() => BlockTag::Task(task.to_string()),
            _ => BlockTag::Representation,
        }
    }

    pub fn is_representation(&self) -> bool {
        matches!(self, BlockTag::Representation)
    }

    pub fn task(&self) -> Option<&str> {
        match self {
            BlockTag::Task(t) => Some(t),
            BlockTag::Representation => None,
        }
    }
}

impl fmt::Display for BlockTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockTag::Representation => f.write_str("representation"),
            BlockTag::Task(t) => write!(f, "task({t})"),
        }
    }
}

/// Batch-norm running statistics travel in snapshots but are not trained.
pub fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotEntry {
    pub name: String,
    pub tag: BlockTag,
    pub tensor: Tensor<f32>,
}

/// Named, tagged parameter values in lexicographic name order. This is the
/// unit exchanged between federation nodes.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSnapshot {
    entries: Vec<SnapshotEntry>,
}

impl ParamSnapshot {
    pub fn new(mut entries: Vec<SnapshotEntry>) -> Result<Self, ModelError> {
        entries.sort_by(|a, b| a.name.cmp(&b.name));
        if let Some(w) = entries.windows(2).find(|w| w[0].name == w[1].name) {
            return Err(ModelError::DuplicateName(w[0].name.clone()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[SnapshotEntry] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<SnapshotEntry> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&SnapshotEntry> {
        self.entries
            .binary_search_by(|e| e.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Tasks whose heads appear in the snapshot.
    pub fn tasks(&self) -> BTreeSet<&str> {
        self.entries.iter().filter_map(|e| e.tag.task()).collect()
    }

    /// Entries satisfying `keep`, order preserved.
    pub fn filter(&self, mut keep: impl FnMut(&SnapshotEntry) -> bool) -> Self {
        Self {
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }

    pub fn representation(&self) -> Self {
        self.filter(|e| e.tag.is_representation())
    }

    pub fn task(&self, task: &str) -> Self {
        self.filter(|e| e.tag.task() == Some(task))
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Bitwise equality of values, names, tags and shapes (distinguishes
    /// `-0.0` from `0.0`, treats identical NaN payloads as equal).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.tag == b.tag
                    && a.tensor.shape() == b.tensor.shape()
                    && a
                        .tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
