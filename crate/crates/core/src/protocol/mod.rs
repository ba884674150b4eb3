//! Role-bearing agent state machines and the coalition lifecycle.

mod agent;
mod coalition;
mod gossip;
mod message;
mod options;
mod roles;
mod selection;
mod split;
mod swarm;
mod training;
mod tree;
mod work;

pub use agent::{
    step_agent, Abort, AgentConfig, AgentState, CoalitionSetup, Event, EventKind, Schedule, StepContext, StepOutput,
    AGENT_STREAM_BASE,
};
pub use coalition::{apply_for_coalition, assign_recipients, check_viability, decide_on_application, operation_viable, Registry};
pub use message::{
    build_ml_task, Assignment, AssignmentMode, Hyperparameters, MLTask, Message, ModelDefinition, Payload, RejectReason,
    Selection, Verdict,
};
pub use options::{
    Announce, AwaitApplications, AwaitInterim, DesignOptions, ProvideTask, SelectStrategy, TrainMode, DEFAULT_GUARD_TICKS,
    DEFAULT_TIME_BOUND,
};
pub use roles::{Activity, AgentType, Phase, ProtocolKind, Role};
pub use selection::{cast_vote, select_agents, tally_votes};
pub use split::batch_ids;
pub use training::{
    companion_features, evaluate, fingerprint, fingerprint_values, local_gradient, train_local, train_two_complete,
};

use thiserror::Error;

use crate::interim::InterimError;
use crate::ml_core::MlError;
use crate::AgentId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("agent {agent} ({agent_type}) may not perform {action}")]
    RoleViolation {
        agent: AgentId,
        agent_type: AgentType,
        action: String,
    },
    #[error("application from agent {agent} rejected at source")]
    RejectedAtSource { agent: AgentId },
    #[error("agent {agent}: {detail}")]
    IllegalEvent { agent: AgentId, detail: String },
    #[error("payload does not match protocol {protocol}")]
    PayloadMismatch { protocol: ProtocolKind },
    #[error("agent {sender} sent {protocol} to nobody")]
    NoRecipients { sender: AgentId, protocol: ProtocolKind },
    #[error("topology: agent {agent}: {detail}")]
    Topology { agent: AgentId, detail: String },
    #[error("coalition not viable: {0}")]
    Viability(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("selection: {0}")]
    Selection(String),
    #[error(transparent)]
    Interim(#[from] InterimError),
    #[error(transparent)]
    Ml(#[from] MlError),
}
