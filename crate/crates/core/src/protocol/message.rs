use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::options::ProvideTask;
use super::roles::{AgentType, ProtocolKind, Role};
use super::ProtocolError;
use crate::interim::{InterimResult, InterimResultDefinition};
use crate::ml_core::ModelSpec;
use crate::AgentId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparameters {
    pub learning_rate: f64,
    #[serde(default = "one")]
    pub local_epochs: u64,
    /// `0` trains on the full local dataset at once.
    #[serde(default)]
    pub batch_size: usize,
}

fn one() -> u64 {
    1
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            local_epochs: 1,
            batch_size: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDefinition {
    pub spec: ModelSpec,
    pub initial_parameters: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MLTask {
    pub purpose: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_definition: Option<ModelDefinition>,
    pub interim_definition: InterimResultDefinition,
    pub hyperparameters: Hyperparameters,
}

/// Assembles the task a configurator hands out.
///
/// `interim_only` withholds the model definition. When `model_must_stay_local`
/// is set, asking for `model_and_interim` is a configuration error.
pub fn build_ml_task(
    purpose: &str,
    model: Option<ModelDefinition>,
    interim_definition: InterimResultDefinition,
    hyperparameters: Hyperparameters,
    disclosure: ProvideTask,
    model_must_stay_local: bool,
) -> Result<MLTask, ProtocolError> {
    let model_definition = match disclosure {
        ProvideTask::InterimOnly => None,
        ProvideTask::ModelAndInterim => {
            if model_must_stay_local {
                return Err(ProtocolError::Config(
                    "model_and_interim discloses the model where parts must stay local".into(),
                ));
            }
            Some(model.ok_or_else(|| ProtocolError::Config("model_and_interim needs a model".into()))?)
        }
    };
    Ok(MLTask {
        purpose: purpose.to_string(),
        model_definition,
        interim_definition,
        hyperparameters,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// Requested roles match no known agent type.
    UnknownRoleSet,
    Duplicate,
    ApplicationsClosed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept { agent_type: AgentType },
    Reject { reason: RejectReason },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentMode {
    /// Always send to the listed recipients.
    Fixed,
    /// The listed agents are candidates; a selection picks per round.
    PerRoundSelection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub mode: AssignmentMode,
    pub recipients: Vec<AgentId>,
    /// Agents that report to the assignee.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<AgentId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub roles: BTreeSet<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_ids: Option<Vec<u64>>,
    /// A vote for this agent, when the selection is a ballot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ballot: Option<AgentId>,
    #[serde(default)]
    pub attempt: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Application {
        requested_roles: BTreeSet<Role>,
        dataset_size: u64,
    },
    Verdict(Verdict),
    Task(MLTask),
    Assignment(Assignment),
    Readiness {
        dataset_size: u64,
        #[serde(default)]
        attempt: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sample_ids: Option<Vec<u64>>,
    },
    Selection(Selection),
    Interim(InterimResult),
}

impl Payload {
    pub fn protocol(&self) -> ProtocolKind {
        match self {
            Payload::Application { .. } => ProtocolKind::ApplyForCoalition,
            Payload::Verdict(_) => ProtocolKind::InformApplicant,
            Payload::Task(_) => ProtocolKind::ProvideMLTask,
            Payload::Assignment(_) => ProtocolKind::AssignInterimResultRecipient,
            Payload::Readiness { .. } => ProtocolKind::SignalReadiness,
            Payload::Selection(_) => ProtocolKind::AnnounceAgentSelection,
            Payload::Interim(_) => ProtocolKind::TransmitInterimResult,
        }
    }

    /// Scalars carried, as a transport-agnostic cost measure.
    pub fn element_count(&self) -> usize {
        match self {
            Payload::Application { requested_roles, .. } => requested_roles.len() + 1,
            Payload::Verdict(_) => 1,
            Payload::Task(t) => {
                t.model_definition.as_ref().map_or(0, |m| m.initial_parameters.len()) + 3
            }
            Payload::Assignment(a) => a.recipients.len() + a.children.len(),
            Payload::Readiness { sample_ids, .. } => 1 + sample_ids.as_ref().map_or(0, Vec::len),
            Payload::Selection(s) => {
                s.roles.len() + s.sample_ids.as_ref().map_or(0, Vec::len) + usize::from(s.ballot.is_some())
            }
            Payload::Interim(r) => r.element_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub protocol: ProtocolKind,
    pub sender: AgentId,
    pub recipients: Vec<AgentId>,
    pub round: u64,
    pub sent_tick: u64,
    pub payload: Payload,
}

impl Message {
    pub fn new(sender: AgentId, recipients: Vec<AgentId>, round: u64, sent_tick: u64, payload: Payload) -> Self {
        Self {
            protocol: payload.protocol(),
            sender,
            recipients,
            round,
            sent_tick,
            payload,
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.payload.protocol() != self.protocol {
            return Err(ProtocolError::PayloadMismatch {
                protocol: self.protocol,
            });
        }
        if self.recipients.is_empty() {
            return Err(ProtocolError::NoRecipients {
                sender: self.sender,
                protocol: self.protocol,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interim::{InterimKind, ShapeContract};
    use crate::ml_core::LossKind;

    fn def() -> InterimResultDefinition {
        InterimResultDefinition {
            kind: InterimKind::ParameterValues,
            shape: ShapeContract::Flat { len: 3, lo: 0, hi: 1 },
            value_range: "real".into(),
        }
    }

    fn model() -> ModelDefinition {
        ModelDefinition {
            spec: ModelSpec::linear(2, LossKind::Mse),
            initial_parameters: vec![0.1, 0.2, 0.3],
        }
    }

    #[test]
    fn disclosure_controls_model_definition() {
        let hidden = build_ml_task("fit", Some(model()), def(), Hyperparameters::default(), ProvideTask::InterimOnly, true).unwrap();
        assert!(hidden.model_definition.is_none());
        let shown = build_ml_task("fit", Some(model()), def(), Hyperparameters::default(), ProvideTask::ModelAndInterim, false).unwrap();
        assert!(shown.model_definition.is_some());
        assert!(build_ml_task("fit", Some(model()), def(), Hyperparameters::default(), ProvideTask::ModelAndInterim, true).is_err());
    }

    #[test]
    fn task_codec_identity() {
        let t = build_ml_task("fit", Some(model()), def(), Hyperparameters::default(), ProvideTask::ModelAndInterim, false).unwrap();
        let text = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<MLTask>(&text).unwrap(), t);
    }

    #[test]
    fn protocol_follows_payload() {
        let m = Message::new(1, vec![0], 0, 0, Payload::Verdict(Verdict::Reject { reason: RejectReason::Duplicate }));
        assert_eq!(m.protocol, ProtocolKind::InformApplicant);
        assert!(m.validate().is_ok());
        let mut bad = m.clone();
        bad.protocol = ProtocolKind::ProvideMLTask;
        assert!(bad.validate().is_err());
        let mut empty = m;
        empty.recipients.clear();
        assert!(empty.validate().is_err());
    }
}
