//! Federation protocol: synchronous rounds in which the representation block
//! is averaged across nodes and each task head is copied from the node that
//! owns it.

mod codec;
mod session;
mod train;
mod transport;

pub use codec::{
    decode_header, decode_message, decode_snapshot, encode_message, encode_snapshot, frame_len, CodecError,
    Header, Message, CRC_LEN, HEADER_LEN, MAGIC, VERSION,
};
pub use session::{client_trainer, run_client, run_federation, serve, FederationOutcome, RoundLog};
pub use train::{client_local_train, evaluate_samples, trainer_rng, LocalTrainer, TrainConfig};
pub use transport::{
    accept_clients, connect_tcp, inproc_pair, Connection, InprocConnection, TcpConnection, HELLO_TIMEOUT,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::nn::{is_running_stat, BlockTag, ModelError, ParamSnapshot, SnapshotEntry};
use crate::optim::OptimError;
use crate::synthdata::DataError;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum FedError {
    #[error("invalid federation config: {0}")]
    InvalidConfig(String),
    #[error("no update from node {0}")]
    MissingNode(u16),
    #[error("node {0} sent more than one update")]
    DuplicateNode(u16),
    #[error("unexpected node {0}")]
    UnknownNode(u16),
    #[error("node {node_id} sent an update for round {got} during round {expected}")]
    RoundMismatch { node_id: u16, expected: u32, got: u32 },
    #[error("task {task:?} is owned by nodes {a} and {b}")]
    TaskOwners { task: String, a: u16, b: u16 },
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("update from node {node_id} is inconsistent: {detail}")]
    BadUpdate { node_id: u16, detail: String },
    #[error("training of {task} diverged in epoch {epoch}")]
    Diverged { task: String, epoch: usize },
    #[error("transport failure with node {node}: {detail}")]
    Transport { node: String, detail: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("server rejected node {0}")]
    Rejected(u16),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl FedError {
    /// Failures of the connection itself rather than of training or config.
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            FedError::Transport { .. } | FedError::Protocol(_) | FedError::Rejected(_) | FedError::Codec(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, FedError>;

/// A participant and the task whose head it owns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeSpec {
    pub node_id: u16,
    pub task: String,
    pub sample_count: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub round: u32,
    pub node_id: u16,
    pub task: String,
    pub sample_count: u64,
    pub snapshot: ParamSnapshot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    SampleCount,
    Uniform,
}

impl FromStr for Weighting {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sample_count" => Ok(Weighting::SampleCount),
            "uniform" => Ok(Weighting::Uniform),
            _ => Err(format!("expected sample_count or uniform, got {s:?}")),
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Weighting::SampleCount => "sample_count",
            Weighting::Uniform => "uniform",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AggregationPolicy {
    pub weighting: Weighting,
    /// Average batch-norm running statistics like weights. When off, the
    /// global copy is taken from the lowest node id and clients keep their
    /// own statistics.
    pub aggregate_running_stats: bool,
}

impl Default for AggregationPolicy {
    fn default() -> Self {
        Self {
            weighting: Weighting::SampleCount,
            aggregate_running_stats: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransportKind {
    Inproc,
    Tcp,
}

impl FromStr for TransportKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "inproc" => Ok(TransportKind::Inproc),
            "tcp" => Ok(TransportKind::Tcp),
            _ => Err(format!("expected inproc or tcp, got {s:?}")),
        }
    }
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransportKind::Inproc => "inproc",
            TransportKind::Tcp => "tcp",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationConfig {
    pub rounds: u32,
    pub local_epochs: usize,
    pub nodes: Vec<NodeSpec>,
    pub policy: AggregationPolicy,
    pub transport: TransportKind,
    pub seed: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(FedError::InvalidConfig("rounds must be at least 1".into()));
        }
        if self.local_epochs == 0 {
            return Err(FedError::InvalidConfig("local_epochs must be at least 1".into()));
        }
        if self.nodes.is_empty() {
            return Err(FedError::InvalidConfig("no nodes configured".into()));
        }
        let mut ids = BTreeSet::new();
        let mut owners: BTreeMap<&str, u16> = BTreeMap::new();
        for n in &self.nodes {
            if !ids.insert(n.node_id) {
                return Err(FedError::DuplicateNode(n.node_id));
            }
            if let Some(&a) = owners.get(n.task.as_str()) {
                return Err(FedError::TaskOwners {
                    task: n.task.clone(),
                    a,
                    b: n.node_id,
                });
            }
            owners.insert(&n.task, n.node_id);
        }
        Ok(())
    }

    /// Annealing horizon of every client.
    pub fn total_local_epochs(&self) -> usize {
        self.rounds as usize * self.local_epochs
    }

    pub fn tasks(&self) -> Vec<String> {
        self.nodes.iter().map(|n| n.task.clone()).collect()
    }
}

fn weights(updates: &[&ClientUpdate], weighting: Weighting) -> Result<Vec<f64>> {
    match weighting {
        Weighting::Uniform => Ok(vec![1.0 / updates.len() as f64; updates.len()]),
        Weighting::SampleCount => {
            let total: u64 = updates.iter().map(|u| u.sample_count).sum();
            if total == 0 {
                return Err(FedError::InvalidConfig("all sample counts are zero".into()));
            }
            Ok(updates
                .iter()
                .map(|u| u.sample_count as f64 / total as f64)
                .collect())
        }
    }
}

/// Masked FedAvg. Representation tensors become the weighted mean of the
/// updates (accumulated in f64, ascending node id); each task tensor is
/// copied bit-for-bit from its owner.
pub fn server_aggregate(
    updates: &[ClientUpdate],
    nodes: &[NodeSpec],
    round: u32,
    policy: &AggregationPolicy,
) -> Result<ParamSnapshot> {
    let mut by_id: BTreeMap<u16, &ClientUpdate> = BTreeMap::new();
    for u in updates {
        if !nodes.iter().any(|n| n.node_id == u.node_id) {
            return Err(FedError::UnknownNode(u.node_id));
        }
        if by_id.insert(u.node_id, u).is_some() {
            return Err(FedError::DuplicateNode(u.node_id));
        }
        if u.round != round {
            return Err(FedError::RoundMismatch {
                node_id: u.node_id,
                expected: round,
                got: u.round,
            });
        }
    }
    if let Some(n) = nodes.iter().find(|n| !by_id.contains_key(&n.node_id)) {
        return Err(FedError::MissingNode(n.node_id));
    }
    let ordered: Vec<&ClientUpdate> = by_id.values().copied().collect();

    let mut owners: BTreeMap<&str, u16> = BTreeMap::new();
    for u in &ordered {
        if let Some(&a) = owners.get(u.task.as_str()) {
            return Err(FedError::TaskOwners {
                task: u.task.clone(),
                a,
                b: u.node_id,
            });
        }
        owners.insert(&u.task, u.node_id);
        let foreign: Vec<&str> = u.snapshot.tasks().into_iter().filter(|t| *t != u.task).collect();
        if !foreign.is_empty() {
            return Err(FedError::BadUpdate {
                node_id: u.node_id,
                detail: format!("carries heads of {foreign:?}"),
            });
        }
        if u.snapshot.task(&u.task).is_empty() {
            return Err(FedError::BadUpdate {
                node_id: u.node_id,
                detail: format!("missing its own head {:?}", u.task),
            });
        }
    }

    let reps: Vec<ParamSnapshot> = ordered.iter().map(|u| u.snapshot.representation()).collect();
    let first = &reps[0];
    for (u, r) in ordered.iter().zip(&reps).skip(1) {
        let same = r.len() == first.len()
            && r
                .entries()
                .iter()
                .zip(first.entries())
                .all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape());
        if !same {
            return Err(FedError::BadUpdate {
                node_id: u.node_id,
                detail: "representation names or shapes differ from the lowest node".into(),
            });
        }
    }

    let w = weights(&ordered, policy.weighting)?;
    let mut out = Vec::with_capacity(first.len() + ordered.len());
    for (i, entry) in first.entries().iter().enumerate() {
        if is_running_stat(&entry.name) && !policy.aggregate_running_stats {
            out.push(entry.clone());
            continue;
        }
        let mut acc: Vec<f64> = entry.tensor.data().iter().map(|&v| w[0] * f64::from(v)).collect();
        for (k, r) in reps.iter().enumerate().skip(1) {
            for (a, &v) in acc.iter_mut().zip(r.entries()[i].tensor.data()) {
                *a += w[k] * f64::from(v);
            }
        }
        out.push(SnapshotEntry {
            name: entry.name.clone(),
            tag: BlockTag::Representation,
            tensor: Tensor::new(entry.tensor.shape(), acc.into_iter().map(|v| v as f32).collect())?,
        });
    }
    for u in &ordered {
        out.extend(u.snapshot.task(&u.task).into_entries());
    }
    Ok(ParamSnapshot::new(out)?)
}

/// Representation block plus the node's own head.
pub fn server_broadcast(global: &ParamSnapshot, node: &NodeSpec) -> Result<ParamSnapshot> {
    if global.task(&node.task).is_empty() {
        return Err(FedError::UnknownTask(node.task.clone()));
    }
    Ok(global.filter(|e| e.tag.is_representation() || e.tag.task() == Some(node.task.as_str())))
}
