//! Deterministic discrete-event network with acquaintance graphs, faults and traces.

mod fault;
mod graph;
mod sim;
mod trace;

pub use fault::{CrashAt, FaultSpec};
pub use graph::{build_acquaintance_graph, AcquaintanceGraph, Direction, Edge, Topology};
pub use sim::{Authority, RunOutcome, RunStatus, Sim, StopRule, FAULT_STREAM};
pub use trace::{DropReason, Trace, TraceRecord};

use thiserror::Error;

use crate::protocol::{Phase, ProtocolError, ProtocolKind};
use crate::AgentId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("graph: {0}")]
    Graph(String),
    #[error("roster: {0}")]
    Roster(String),
    #[error("routing violation: {protocol} from {from} to {to} has no edge valid in {phase:?}")]
    RoutingViolation {
        from: AgentId,
        to: AgentId,
        phase: Phase,
        protocol: ProtocolKind,
    },
    #[error("fault: {0}")]
    Fault(String),
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}
