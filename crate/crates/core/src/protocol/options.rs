use serde::{Deserialize, Serialize};

use crate::interim::{InterimKind, UpdatePolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AwaitApplications {
    Always,
    InitOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectStrategy {
    Votes,
    Attributes,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AwaitInterim {
    /// Wait for `k` results.
    ResponseBound(u64),
    /// Wait at most this many ticks; stop early once every expected result is in.
    TimeBound(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    TwoComplete,
    OneComplete,
    Part,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProvideTask {
    InterimOnly,
    ModelAndInterim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Announce {
    RoleOnly,
    RoleAndSampleIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignOptions {
    pub await_applications: AwaitApplications,
    pub select_agent: SelectStrategy,
    pub await_interim_results: AwaitInterim,
    pub update_ml_model: UpdatePolicy,
    pub train_ml_model: TrainMode,
    pub provide_ml_task: ProvideTask,
    pub announce_agent_selection: Announce,
    pub transmit_interim_result: InterimKind,
}

/// Tick bound used when an option does not carry its own.
pub const DEFAULT_TIME_BOUND: u64 = 4;

/// Ticks a response-bound wait may last before the deadlock guard trips.
pub const DEFAULT_GUARD_TICKS: u64 = 10 * DEFAULT_TIME_BOUND;

impl DesignOptions {
    pub fn validate(&self) -> Result<(), String> {
        match self.await_interim_results {
            AwaitInterim::ResponseBound(0) => Err("response_bound needs k >= 1".into()),
            AwaitInterim::TimeBound(0) => Err("time_bound needs at least 1 tick".into()),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serde_shape() {
        let o = DesignOptions {
            await_applications: AwaitApplications::Always,
            select_agent: SelectStrategy::Random,
            await_interim_results: AwaitInterim::ResponseBound(3),
            update_ml_model: UpdatePolicy::Batched,
            train_ml_model: TrainMode::OneComplete,
            provide_ml_task: ProvideTask::ModelAndInterim,
            announce_agent_selection: Announce::RoleOnly,
            transmit_interim_result: InterimKind::ParameterValues,
        };
        let text = serde_json::to_string(&o).unwrap();
        assert!(text.contains(r#""await_interim_results":{"response_bound":3}"#), "{text}");
        assert_eq!(serde_json::from_str::<DesignOptions>(&text).unwrap(), o);
        assert!(o.validate().is_ok());
        let bad = DesignOptions {
            await_interim_results: AwaitInterim::TimeBound(0),
            ..o
        };
        assert!(bad.validate().is_err());
    }
}
