//! Decentralized federated learning simulation: topologies, participants,
//! the flooding pHash membership query and the synchronous round loop.
//!
//! Everything runs in one process. Rounds are barriers and messages are
//! delivered in participant-id order, so a run is fully reproducible.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Normalizer};
use crate::error::{invalid_arg, Error, Result};
use crate::image::StandardizedImage;
use crate::nn::{average_models, train_local, ModelParams, TrainConfig};
use crate::phash::{build_hash_index, HashIndex, PHash64};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    Fully,
    Ring,
    Star,
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TopologyKind::Fully => "fully",
            TopologyKind::Ring => "ring",
            TopologyKind::Star => "star",
        })
    }
}

impl FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fully" | "full" | "fully-connected" => Ok(TopologyKind::Fully),
            "ring" => Ok(TopologyKind::Ring),
            "star" => Ok(TopologyKind::Star),
            other => Err(invalid_arg!("unknown topology '{other}'")),
        }
    }
}

/// Undirected communication graph over participants `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    kind: TopologyKind,
    adjacency: Vec<Vec<usize>>,
}

/// Fully connected and star need `n ≥ 2`, ring needs `n ≥ 3`.
pub fn build_topology(kind: TopologyKind, n: usize) -> Result<Topology> {
    let min = if kind == TopologyKind::Ring { 3 } else { 2 };
    if n < min {
        return Err(invalid_arg!("{kind} topology needs at least {min} participants, got {n}"));
    }
    let adjacency = (0..n)
        .map(|i| match kind {
            TopologyKind::Fully => (0..n).filter(|&j| j != i).collect(),
            TopologyKind::Ring => {
                let mut v = vec![(i + n - 1) % n, (i + 1) % n];
                v.sort_unstable();
                v
            }
            TopologyKind::Star if i == 0 => (1..n).collect(),
            TopologyKind::Star => vec![0],
        })
        .collect();
    Ok(Topology { kind, adjacency })
}

impl Topology {
    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.adjacency.len()
    }

    /// Neighbor ids in ascending order.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    /// `i` and its neighbors, ascending.
    pub fn closed_neighborhood(&self, i: usize) -> Vec<usize> {
        let mut v = self.adjacency[i].clone();
        v.push(i);
        v.sort_unstable();
        v
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn role(&self, i: usize) -> Role {
        match (self.kind, i) {
            (TopologyKind::Star, 0) => Role::Center,
            (TopologyKind::Star, _) => Role::Leaf,
            _ => Role::Peer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Center,
    Leaf,
    Peer,
}

/// One DFL node: local data, its hash index and its current model.
#[derive(Debug, Clone)]
pub struct Participant {
    id: usize,
    role: Role,
    data: LabeledDataset,
    inputs: Vec<StandardizedImage>,
    index: HashIndex,
    model: ModelParams,
    seed: u64,
}

impl Participant {
    /// Hashes and standardizes the local partition. `seed` drives the
    /// participant's sample order in every round.
    pub fn new(
        id: usize,
        role: Role,
        data: LabeledDataset,
        normalizer: &Normalizer,
        model: ModelParams,
        seed: u64,
    ) -> Result<Self> {
        let index = build_hash_index(&data.images, id)?;
        let inputs = data
            .images
            .iter()
            .map(|img| normalizer.apply(img))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { id, role, data, inputs, index, model, seed })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn data(&self) -> &LabeledDataset {
        &self.data
    }

    pub fn inputs(&self) -> &[StandardizedImage] {
        &self.inputs
    }

    pub fn index(&self) -> &HashIndex {
        &self.index
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn set_model(&mut self, model: ModelParams) {
        self.model = model;
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryMessage {
    pub query_id: u64,
    pub phash: PHash64,
    /// Participant that forwarded this copy.
    pub from: usize,
}

/// Outcome of one flooded membership query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTrace {
    pub found: bool,
    /// Query messages sent (replies are not counted).
    pub messages: usize,
    /// Participants that checked their index, in processing order.
    pub visited: Vec<usize>,
}

/// Token identifying one query; equal for repeated queries of the same hash
/// from the same entry, which is harmless because each query is independent.
fn query_token(entry: usize, h: PHash64) -> u64 {
    seed::splitmix64(h.bits() ^ seed::splitmix64(entry as u64))
}

/// Floods a membership query for `h` from `entry`.
///
/// The entry checks its own index first; on a miss it sends the query to its
/// neighbors. Each participant handles a `query_id` at most once and
/// forwards it to every neighbor except the sender. The flood stops at the
/// first hit.
pub fn membership_query_traced(topology: &Topology, indexes: &[HashIndex], entry: usize, h: PHash64) -> Result<QueryTrace> {
    if indexes.len() != topology.n() {
        return Err(invalid_arg!(
            "{} hash indexes for {} participants",
            indexes.len(),
            topology.n()
        ));
    }
    if entry >= topology.n() {
        return Err(invalid_arg!("entry participant {entry} out of range"));
    }
    let query_id = query_token(entry, h);
    let mut seen = vec![false; topology.n()];
    let mut trace = QueryTrace { found: false, messages: 0, visited: vec![entry] };
    seen[entry] = true;
    if indexes[entry].lookup(h) {
        trace.found = true;
        return Ok(trace);
    }
    let mut queue: VecDeque<(usize, QueryMessage)> = topology
        .neighbors(entry)
        .iter()
        .map(|&to| (to, QueryMessage { query_id, phash: h, from: entry }))
        .collect();
    trace.messages = queue.len();
    while let Some((at, msg)) = queue.pop_front() {
        if seen[at] {
            continue;
        }
        seen[at] = true;
        trace.visited.push(at);
        if indexes[at].lookup(msg.phash) {
            trace.found = true;
            break;
        }
        for &to in topology.neighbors(at) {
            if to != msg.from {
                queue.push_back((to, QueryMessage { from: at, ..msg }));
                trace.messages += 1;
            }
        }
    }
    Ok(trace)
}

/// Whether `h` is in any participant's index reachable from `entry`.
pub fn membership_query(topology: &Topology, indexes: &[HashIndex], entry: usize, h: PHash64) -> Result<bool> {
    membership_query_traced(topology, indexes, entry, h).map(|t| t.found)
}

/// Runs `rounds` synchronous rounds. In each round every participant trains
/// `cfg.epochs` local epochs (sample order seeded from its own seed and the
/// round number; `cfg.seed` is not used), then replaces its model by the
/// equal-weight mean of its closed neighborhood's post-training models.
///
/// `observer(round, participant)` is called for each participant after
/// aggregation, in id order.
pub fn run_federated_training<F>(
    topology: &Topology,
    participants: &mut [Participant],
    rounds: usize,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<()>
where
    F: FnMut(usize, &Participant) -> Result<()>,
{
    if participants.len() != topology.n() {
        return Err(invalid_arg!(
            "{} participants for a topology of {}",
            participants.len(),
            topology.n()
        ));
    }
    for round in 0..rounds {
        let trained = participants
            .iter()
            .map(|p| {
                let local = TrainConfig { seed: seed::derive_indexed(p.seed, "round", round as u64), ..*cfg };
                train_local(&p.model, &p.inputs, &p.data.labels, &local)
            })
            .collect::<Result<Vec<_>>>()?;
        for p in participants.iter_mut() {
            let group: Vec<&ModelParams> = topology.closed_neighborhood(p.id).iter().map(|&j| &trained[j]).collect();
            p.model = average_models(&group)?;
        }
        for p in participants.iter() {
            observer(round, p)?;
        }
    }
    Ok(())
}
