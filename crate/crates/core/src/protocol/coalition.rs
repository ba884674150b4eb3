use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::message::{Message, Payload, RejectReason, Verdict};
use super::options::{AwaitApplications, DesignOptions};
use super::roles::{AgentType, Phase, Role};
use super::ProtocolError;
use crate::netsim::AcquaintanceGraph;
use crate::AgentId;

/// Public directory of a registered coalition.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    pub phase: Option<Phase>,
    pub configurator: Option<AgentId>,
    pub members: BTreeMap<AgentId, AgentType>,
}

impl Registry {
    /// Lowest-id member holding the coordinator role.
    pub fn coordinator(&self) -> Option<AgentId> {
        self.members
            .iter()
            .find(|(_, t)| t.has(Role::Coordinator))
            .map(|(&id, _)| id)
    }

    pub fn roles(&self) -> BTreeSet<Role> {
        roles_of(self.members.values().copied())
    }

    pub fn with_role(&self, role: Role) -> BTreeSet<AgentId> {
        self.members
            .iter()
            .filter(|(_, t)| t.has(role))
            .map(|(&id, _)| id)
            .collect()
    }
}

fn roles_of(types: impl IntoIterator<Item = AgentType>) -> BTreeSet<Role> {
    types.into_iter().flat_map(|t| t.roles()).collect()
}

/// All five roles present across at least two agents.
pub fn check_viability(members: &BTreeMap<AgentId, AgentType>) -> Result<(), ProtocolError> {
    if members.len() < 2 {
        return Err(ProtocolError::Viability(format!(
            "coalition has {} agent(s), needs at least 2",
            members.len()
        )));
    }
    let have = roles_of(members.values().copied());
    let missing: Vec<&str> = Role::ALL
        .iter()
        .filter(|r| !have.contains(r))
        .map(|r| match r {
            Role::Configurator => "configurator",
            Role::Coordinator => "coordinator",
            Role::Selector => "selector",
            Role::Trainer => "trainer",
            Role::Updater => "updater",
        })
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(ProtocolError::Viability(format!("missing roles: {}", missing.join(", "))))
    }
}

/// Operation continues only while some live agent can select, train and update.
pub fn operation_viable<'a>(live: impl IntoIterator<Item = &'a AgentType>) -> bool {
    let have = roles_of(live.into_iter().copied());
    [Role::Selector, Role::Trainer, Role::Updater]
        .iter()
        .all(|r| have.contains(r))
}

/// Application message for `applicant`, addressed per the coalition phase.
pub fn apply_for_coalition(
    applicant: AgentId,
    requested_roles: BTreeSet<Role>,
    dataset_size: u64,
    registry: &Registry,
    options: &DesignOptions,
    tick: u64,
) -> Result<Message, ProtocolError> {
    let recipient = match registry.phase {
        None | Some(Phase::Initialization) => registry.configurator,
        Some(Phase::Operation) => match options.await_applications {
            AwaitApplications::Always => registry.coordinator(),
            AwaitApplications::InitOnly => return Err(ProtocolError::RejectedAtSource { agent: applicant }),
        },
        Some(Phase::Dissolution) => return Err(ProtocolError::RejectedAtSource { agent: applicant }),
    }
    .ok_or(ProtocolError::RejectedAtSource { agent: applicant })?;
    Ok(Message::new(
        applicant,
        vec![recipient],
        0,
        tick,
        Payload::Application {
            requested_roles,
            dataset_size,
        },
    ))
}

/// Accept-all policy with an exact role-set match and a duplicate guard.
pub fn decide_on_application(
    applicant: AgentId,
    requested_roles: &BTreeSet<Role>,
    admitted: &BTreeMap<AgentId, AgentType>,
) -> Verdict {
    if admitted.contains_key(&applicant) {
        return Verdict::Reject {
            reason: RejectReason::Duplicate,
        };
    }
    match AgentType::from_roles(requested_roles) {
        Some(agent_type) => Verdict::Accept { agent_type },
        None => Verdict::Reject {
            reason: RejectReason::UnknownRoleSet,
        },
    }
}

/// Maps every trainer or updater to the lowest-id updater it can reach during operation.
///
/// Agents that no updater can be assigned to are skipped unless they train.
pub fn assign_recipients(
    members: &BTreeMap<AgentId, AgentType>,
    graph: &AcquaintanceGraph,
    primary: AgentId,
) -> Result<BTreeMap<AgentId, AgentId>, ProtocolError> {
    let updaters: Vec<AgentId> = members
        .iter()
        .filter(|(_, t)| t.has(Role::Updater))
        .map(|(&id, _)| id)
        .collect();
    let mut map = BTreeMap::new();
    for (&id, t) in members {
        if id == primary || !(t.has(Role::Trainer) || t.has(Role::Updater)) {
            continue;
        }
        let target = updaters
            .iter()
            .copied()
            .find(|&u| u != id && graph.permits(id, u, Phase::Operation));
        match target {
            Some(u) => {
                map.insert(id, u);
            }
            None if t.has(Role::Trainer) => {
                return Err(ProtocolError::Topology {
                    agent: id,
                    detail: "no reachable updater".into(),
                })
            }
            None => {}
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interim::{InterimKind, UpdatePolicy};
    use crate::netsim::{build_acquaintance_graph, Topology};
    use crate::protocol::options::*;

    fn options(apply: AwaitApplications) -> DesignOptions {
        DesignOptions {
            await_applications: apply,
            select_agent: SelectStrategy::Random,
            await_interim_results: AwaitInterim::ResponseBound(1),
            update_ml_model: UpdatePolicy::Batched,
            train_ml_model: TrainMode::OneComplete,
            provide_ml_task: ProvideTask::ModelAndInterim,
            announce_agent_selection: Announce::RoleOnly,
            transmit_interim_result: InterimKind::ParameterValues,
        }
    }

    fn registry(phase: Phase) -> Registry {
        Registry {
            phase: Some(phase),
            configurator: Some(0),
            members: [(0, AgentType::ConTraUpd), (1, AgentType::CooSel)].into_iter().collect(),
        }
    }

    #[test]
    fn application_routing() {
        let roles = AgentType::TraUpd.roles();
        let init = apply_for_coalition(5, roles.clone(), 10, &registry(Phase::Initialization), &options(AwaitApplications::InitOnly), 0).unwrap();
        assert_eq!(init.recipients, vec![0]);
        let op = apply_for_coalition(5, roles.clone(), 10, &registry(Phase::Operation), &options(AwaitApplications::Always), 9).unwrap();
        assert_eq!(op.recipients, vec![1]);
        let err = apply_for_coalition(5, roles, 10, &registry(Phase::Operation), &options(AwaitApplications::InitOnly), 9);
        assert_eq!(err, Err(ProtocolError::RejectedAtSource { agent: 5 }));
    }

    #[test]
    fn verdicts() {
        let admitted: BTreeMap<_, _> = [(1, AgentType::TraUpd)].into_iter().collect();
        assert_eq!(
            decide_on_application(2, &AgentType::TraUpd.roles(), &admitted),
            Verdict::Accept { agent_type: AgentType::TraUpd }
        );
        let odd: BTreeSet<Role> = [Role::Selector, Role::Trainer].into_iter().collect();
        assert!(matches!(decide_on_application(2, &odd, &admitted), Verdict::Reject { reason: RejectReason::UnknownRoleSet }));
        assert!(matches!(decide_on_application(1, &AgentType::TraUpd.roles(), &admitted), Verdict::Reject { reason: RejectReason::Duplicate }));
    }

    #[test]
    fn viability() {
        let ok: BTreeMap<_, _> = [(0, AgentType::ConCooSelUpd), (1, AgentType::TraUpd)].into_iter().collect();
        assert!(check_viability(&ok).is_ok());
        let short: BTreeMap<_, _> = [(0, AgentType::ConCooSelTraUpd)].into_iter().collect();
        assert!(check_viability(&short).is_err());
        let missing: BTreeMap<_, _> = [(0, AgentType::ConCooSelUpd), (1, AgentType::CooSel)].into_iter().collect();
        assert!(check_viability(&missing).is_err());
    }

    #[test]
    fn star_and_tree_assignment() {
        let roster = [AgentType::ConCooSelUpd, AgentType::TraUpd, AgentType::TraUpd];
        let members: BTreeMap<_, _> = roster.iter().enumerate().map(|(i, t)| (i as AgentId, *t)).collect();
        let g = build_acquaintance_graph(Topology::Star, &roster, &BTreeMap::new(), 1).unwrap();
        let map = assign_recipients(&members, &g, 0).unwrap();
        assert_eq!(map.values().copied().collect::<Vec<_>>(), vec![0, 0]);

        let roster = [AgentType::ConCooSelUpd, AgentType::ConCooSelUpd, AgentType::ConCooSelUpd, AgentType::TraUpd, AgentType::TraUpd];
        let parents: BTreeMap<_, _> = [(1, 0), (2, 0), (3, 1), (4, 2)].into_iter().collect();
        let members: BTreeMap<_, _> = roster.iter().enumerate().map(|(i, t)| (i as AgentId, *t)).collect();
        let g = build_acquaintance_graph(Topology::Tree, &roster, &parents, 1).unwrap();
        assert_eq!(assign_recipients(&members, &g, 0).unwrap(), parents);
    }

    #[test]
    fn unreachable_trainer() {
        let members: BTreeMap<_, _> = [(0, AgentType::ConCooSelUpd), (1, AgentType::TraUpd), (2, AgentType::Tra)].into_iter().collect();
        let mut g = AcquaintanceGraph::new([0, 1, 2]);
        g.add_edge(crate::netsim::Edge::bi(0, 1, 1)).unwrap();
        let err = assign_recipients(&members, &g, 0).unwrap_err();
        assert!(matches!(err, ProtocolError::Topology { agent: 2, .. }));
    }
}
