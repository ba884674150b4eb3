use serde::{Deserialize, Serialize};

use super::NetError;
use crate::AgentId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrashAt {
    Tick(u64),
    /// Once the round authority has completed this many rounds.
    Round(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "fault", deny_unknown_fields)]
pub enum FaultSpec {
    CrashAgent {
        agent: AgentId,
        at: CrashAt,
    },
    /// Each delivery in `[from_tick, to_tick]` is lost with `probability`.
    DropMessages {
        probability: f64,
        seed: u64,
        from_tick: u64,
        to_tick: u64,
    },
    /// Deliveries across the listed pairs, in either direction, are lost in `[from_tick, to_tick]`.
    Partition {
        edges: Vec<(AgentId, AgentId)>,
        from_tick: u64,
        to_tick: u64,
    },
}

impl FaultSpec {
    pub fn validate(&self) -> Result<(), NetError> {
        match self {
            FaultSpec::CrashAgent { .. } => Ok(()),
            FaultSpec::DropMessages {
                probability,
                from_tick,
                to_tick,
                ..
            } => {
                if !(0.0..=1.0).contains(probability) {
                    return Err(NetError::Fault(format!("drop probability {probability} outside [0, 1]")));
                }
                check_range(*from_tick, *to_tick)
            }
            FaultSpec::Partition {
                edges,
                from_tick,
                to_tick,
            } => {
                if edges.iter().any(|(a, b)| a == b) {
                    return Err(NetError::Fault("partition lists a self pair".into()));
                }
                check_range(*from_tick, *to_tick)
            }
        }
    }

    pub(crate) fn active_at(&self, tick: u64) -> bool {
        match *self {
            FaultSpec::CrashAgent { .. } => false,
            FaultSpec::DropMessages { from_tick, to_tick, .. } | FaultSpec::Partition { from_tick, to_tick, .. } => {
                (from_tick..=to_tick).contains(&tick)
            }
        }
    }
}

fn check_range(from: u64, to: u64) -> Result<(), NetError> {
    if from > to {
        return Err(NetError::Fault(format!("tick range {from}..={to} is reversed")));
    }
    Ok(())
}
