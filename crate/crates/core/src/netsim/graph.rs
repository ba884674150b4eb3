use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::protocol::{AgentType, Phase, Role};
use crate::AgentId;

use super::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Only `a -> b`.
    Uni,
    Bi,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub a: AgentId,
    pub b: AgentId,
    pub direction: Direction,
    pub phases: BTreeSet<Phase>,
    #[serde(default = "default_latency")]
    pub latency: u64,
}

fn default_latency() -> u64 {
    1
}

const ALL_PHASES: [Phase; 3] = [Phase::Initialization, Phase::Operation, Phase::Dissolution];

impl Edge {
    pub fn bi(a: AgentId, b: AgentId, latency: u64) -> Self {
        Self {
            a,
            b,
            direction: Direction::Bi,
            phases: ALL_PHASES.into_iter().collect(),
            latency,
        }
    }

    pub fn init_only(a: AgentId, b: AgentId, latency: u64) -> Self {
        Self {
            phases: [Phase::Initialization].into_iter().collect(),
            ..Self::bi(a, b, latency)
        }
    }

    fn allows(&self, from: AgentId, to: AgentId, phase: Phase) -> bool {
        let forward = self.a == from && self.b == to;
        let backward = self.direction == Direction::Bi && self.a == to && self.b == from;
        (forward || backward) && self.phases.contains(&phase)
    }
}

/// Communication paths between agents, each valid in a set of phases.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcquaintanceGraph {
    pub nodes: BTreeSet<AgentId>,
    pub edges: Vec<Edge>,
}

/// Shape of the operation-phase paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// Hub 0 linked to everyone else.
    Star,
    /// Parent links from a tree layout; hub 0 also reaches everyone during initialization.
    Tree,
    Complete,
}

impl AcquaintanceGraph {
    pub fn new(nodes: impl IntoIterator<Item = AgentId>) -> Self {
        Self {
            nodes: nodes.into_iter().collect(),
            edges: Vec::new(),
        }
    }

    pub fn add_edge(&mut self, edge: Edge) -> Result<(), NetError> {
        if edge.a == edge.b {
            return Err(NetError::Graph(format!("self loop on agent {}", edge.a)));
        }
        if edge.phases.is_empty() {
            return Err(NetError::Graph(format!("edge {}-{} valid in no phase", edge.a, edge.b)));
        }
        if !self.nodes.contains(&edge.a) || !self.nodes.contains(&edge.b) {
            return Err(NetError::Graph(format!("edge {}-{} names an unknown agent", edge.a, edge.b)));
        }
        self.edges.push(edge);
        Ok(())
    }

    /// Latency of the first edge allowing `from -> to` in `phase`.
    pub fn route(&self, from: AgentId, to: AgentId, phase: Phase) -> Option<u64> {
        self.edges
            .iter()
            .find(|e| e.allows(from, to, phase))
            .map(|e| e.latency)
    }

    pub fn permits(&self, from: AgentId, to: AgentId, phase: Phase) -> bool {
        self.route(from, to, phase).is_some()
    }

    pub fn neighbours(&self, of: AgentId, phase: Phase) -> BTreeSet<AgentId> {
        self.nodes
            .iter()
            .copied()
            .filter(|&n| n != of && self.permits(of, n, phase))
            .collect()
    }

    pub fn bi_edge_count(&self) -> usize {
        self.edges.iter().filter(|e| e.direction == Direction::Bi).count()
    }

    /// Edges valid during operation, as unordered pairs.
    pub fn operation_pairs(&self) -> BTreeSet<(AgentId, AgentId)> {
        self.edges
            .iter()
            .filter(|e| e.phases.contains(&Phase::Operation))
            .map(|e| (e.a.min(e.b), e.a.max(e.b)))
            .collect()
    }
}

/// Lays out the topology for a roster where index = agent id.
///
/// `parents` is required for [`Topology::Tree`] and maps every non-root agent
/// to its parent.
pub fn build_acquaintance_graph(
    topology: Topology,
    roster: &[AgentType],
    parents: &BTreeMap<AgentId, AgentId>,
    latency: u64,
) -> Result<AcquaintanceGraph, NetError> {
    if roster.len() < 2 {
        return Err(NetError::Roster("at least two agents are required".into()));
    }
    let ids: Vec<AgentId> = (0..roster.len() as AgentId).collect();
    let mut g = AcquaintanceGraph::new(ids.iter().copied());
    match topology {
        Topology::Star => {
            if !roster[0].has(Role::Coordinator) || !roster[0].has(Role::Updater) {
                return Err(NetError::Roster(format!("star hub must coordinate and update, found {}", roster[0])));
            }
            for &id in &ids[1..] {
                g.add_edge(Edge::bi(0, id, latency))?;
            }
        }
        Topology::Tree => {
            for &id in &ids[1..] {
                let parent = *parents
                    .get(&id)
                    .ok_or_else(|| NetError::Roster(format!("agent {id} has no parent")))?;
                if parent as usize >= roster.len() || !roster[parent as usize].has(Role::Updater) {
                    return Err(NetError::Roster(format!("parent {parent} of agent {id} cannot update")));
                }
                g.add_edge(Edge::bi(parent, id, latency))?;
                if parent != 0 {
                    g.add_edge(Edge::init_only(0, id, latency))?;
                }
            }
        }
        Topology::Complete => {
            for (i, &a) in ids.iter().enumerate() {
                for &b in &ids[i + 1..] {
                    g.add_edge(Edge::bi(a, b, latency))?;
                }
            }
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn star_has_no_spoke_links() {
        let roster = [AgentType::ConCooSelUpd, AgentType::ConTraUpd, AgentType::ConTraUpd, AgentType::ConTraUpd];
        let g = build_acquaintance_graph(Topology::Star, &roster, &BTreeMap::new(), 1).unwrap();
        assert_eq!(g.bi_edge_count(), 3);
        assert!(!g.permits(1, 2, Phase::Operation));
        assert!(g.permits(2, 0, Phase::Operation));
    }

    #[test]
    fn complete_pair_count() {
        let roster = [AgentType::ConCooSelTraUpd, AgentType::CooSelTraUpd, AgentType::CooSelTraUpd, AgentType::CooSelTraUpd];
        let g = build_acquaintance_graph(Topology::Complete, &roster, &BTreeMap::new(), 1).unwrap();
        assert_eq!(g.bi_edge_count(), 6);
    }

    #[test]
    fn uni_edge_direction() {
        let mut g = AcquaintanceGraph::new([0, 1]);
        g.add_edge(Edge {
            direction: Direction::Uni,
            ..Edge::bi(0, 1, 2)
        })
        .unwrap();
        assert_eq!(g.route(0, 1, Phase::Operation), Some(2));
        assert_eq!(g.route(1, 0, Phase::Operation), None);
    }

    #[test]
    fn rejects_self_loops_and_empty_phases() {
        let mut g = AcquaintanceGraph::new([0, 1]);
        assert!(g.add_edge(Edge::bi(1, 1, 1)).is_err());
        let mut e = Edge::bi(0, 1, 1);
        e.phases.clear();
        assert!(g.add_edge(e).is_err());
    }

    #[test]
    fn tree_inner_links_only_during_initialization() {
        let roster = [AgentType::ConCooSelUpd, AgentType::ConCooSelUpd, AgentType::TraUpd];
        let parents: BTreeMap<_, _> = [(1, 0), (2, 1)].into_iter().collect();
        let g = build_acquaintance_graph(Topology::Tree, &roster, &parents, 1).unwrap();
        assert_eq!(g.operation_pairs().len(), 2);
        assert!(g.permits(2, 0, Phase::Initialization));
        assert!(!g.permits(2, 0, Phase::Operation));
    }
}
