//! The four archetypes as ready-made scenarios, plus conformance checking.

mod conformance;

pub(crate) use conformance::check_option_tags;
pub use conformance::{conformance_check, conformance_check_value, Cell, ConformanceReport, Violation};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::harness::{DataConfig, MetricsOptions, ScenarioConfig, Timing};
use crate::interim::{InterimKind, UpdatePolicy};
use crate::ml_core::{Activation, DataSpec, LossKind, ModelSpec, Task};
use crate::netsim::{StopRule, Topology};
use crate::protocol::{
    AgentType, Announce, AwaitApplications, AwaitInterim, DesignOptions, Hyperparameters, ProvideTask, Schedule,
    SelectStrategy, TrainMode,
};
use crate::AgentId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchetypeKind {
    Confidentiality,
    Control,
    Flexibility,
    Robustness,
}

impl ArchetypeKind {
    pub const ALL: [ArchetypeKind; 4] = [
        ArchetypeKind::Confidentiality,
        ArchetypeKind::Control,
        ArchetypeKind::Flexibility,
        ArchetypeKind::Robustness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchetypeKind::Confidentiality => "confidentiality",
            ArchetypeKind::Control => "control",
            ArchetypeKind::Flexibility => "flexibility",
            ArchetypeKind::Robustness => "robustness",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn traits(self) -> TraitProfile {
        use Hierarchy::{Strong, Weak};
        let (hierarchy, coalition_wide_sync) = match self {
            ArchetypeKind::Confidentiality => (Strong, false),
            ArchetypeKind::Control => (Strong, true),
            ArchetypeKind::Flexibility => (Weak, false),
            ArchetypeKind::Robustness => (Weak, true),
        };
        TraitProfile {
            hierarchy,
            coalition_wide_sync,
        }
    }

    pub fn schedule(self) -> Schedule {
        match self {
            ArchetypeKind::Confidentiality => Schedule::Split,
            ArchetypeKind::Control => Schedule::Tree,
            ArchetypeKind::Flexibility => Schedule::Gossip,
            ArchetypeKind::Robustness => Schedule::Swarm,
        }
    }

    /// Variant flags this archetype accepts.
    pub fn variant_names(self) -> &'static [&'static str] {
        match self {
            ArchetypeKind::Confidentiality => &["u_shaped", "parallel_clients"],
            ArchetypeKind::Control => &["one_shot_tra", "hierarchical_levels", "two_complete_models"],
            ArchetypeKind::Flexibility => &["dedicated_coosel"],
            ArchetypeKind::Robustness => &["updater_subset_size"],
        }
    }
}

impl fmt::Display for ArchetypeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The archetype a scenario claims to follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchetypeClaim {
    Custom,
    Confidentiality,
    Control,
    Flexibility,
    Robustness,
}

impl ArchetypeClaim {
    pub fn kind(self) -> Option<ArchetypeKind> {
        match self {
            ArchetypeClaim::Custom => None,
            ArchetypeClaim::Confidentiality => Some(ArchetypeKind::Confidentiality),
            ArchetypeClaim::Control => Some(ArchetypeKind::Control),
            ArchetypeClaim::Flexibility => Some(ArchetypeKind::Flexibility),
            ArchetypeClaim::Robustness => Some(ArchetypeKind::Robustness),
        }
    }
}

impl From<ArchetypeKind> for ArchetypeClaim {
    fn from(k: ArchetypeKind) -> Self {
        match k {
            ArchetypeKind::Confidentiality => ArchetypeClaim::Confidentiality,
            ArchetypeKind::Control => ArchetypeClaim::Control,
            ArchetypeKind::Flexibility => ArchetypeClaim::Flexibility,
            ArchetypeKind::Robustness => ArchetypeClaim::Robustness,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hierarchy {
    Strong,
    Weak,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraitProfile {
    pub hierarchy: Hierarchy,
    pub coalition_wide_sync: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantFlags {
    #[serde(default, skip_serializing_if = "is_false")]
    pub u_shaped: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub parallel_clients: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub one_shot_tra: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hierarchical_levels: Option<u32>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub two_complete_models: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub dedicated_coosel: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub updater_subset_size: Option<usize>,
}

impl VariantFlags {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    /// Names of the flags that are set.
    pub fn set_names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.u_shaped {
            v.push("u_shaped");
        }
        if self.parallel_clients {
            v.push("parallel_clients");
        }
        if self.one_shot_tra {
            v.push("one_shot_tra");
        }
        if self.hierarchical_levels.is_some() {
            v.push("hierarchical_levels");
        }
        if self.two_complete_models {
            v.push("two_complete_models");
        }
        if self.dedicated_coosel {
            v.push("dedicated_coosel");
        }
        if self.updater_subset_size.is_some() {
            v.push("updater_subset_size");
        }
        v
    }

    /// Sets one flag from `name` or `name=value`.
    pub fn set(&mut self, flag: &str) -> Result<(), String> {
        let (name, value) = match flag.split_once('=') {
            Some((n, v)) => (n.trim(), Some(v.trim())),
            None => (flag.trim(), None),
        };
        let number = |default: u64| -> Result<u64, String> {
            value.map_or(Ok(default), |v| v.parse().map_err(|_| format!("{name} needs an integer, got {v:?}")))
        };
        let boolean = || -> Result<bool, String> {
            value.map_or(Ok(true), |v| v.parse().map_err(|_| format!("{name} needs true or false, got {v:?}")))
        };
        match name {
            "u_shaped" => self.u_shaped = boolean()?,
            "parallel_clients" => self.parallel_clients = boolean()?,
            "one_shot_tra" => self.one_shot_tra = boolean()?,
            "two_complete_models" => self.two_complete_models = boolean()?,
            "dedicated_coosel" => self.dedicated_coosel = boolean()?,
            "hierarchical_levels" => self.hierarchical_levels = Some(number(3)? as u32),
            "updater_subset_size" => self.updater_subset_size = Some(number(2)? as usize),
            _ => return Err(format!("unknown variant flag {name:?}")),
        }
        Ok(())
    }

    /// One instance of every documented variant, for listing and conformance sweeps.
    pub fn documented(kind: ArchetypeKind) -> Vec<VariantFlags> {
        let d = Self::default();
        match kind {
            ArchetypeKind::Confidentiality => vec![
                Self { u_shaped: true, ..d },
                Self { parallel_clients: true, ..d },
            ],
            ArchetypeKind::Control => vec![
                Self { one_shot_tra: true, ..d },
                Self { hierarchical_levels: Some(3), ..d },
                Self { two_complete_models: true, ..d },
            ],
            ArchetypeKind::Flexibility => vec![Self { dedicated_coosel: true, ..d }],
            ArchetypeKind::Robustness => vec![Self { updater_subset_size: Some(2), ..d }],
        }
    }
}

/// Roster, schedule and acquaintance layout of an archetype instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub roster: Vec<AgentType>,
    pub schedule: Schedule,
    pub topology: Topology,
    pub parents: BTreeMap<AgentId, AgentId>,
}

/// Agent 0 always holds the configurator role.
pub fn layout(kind: ArchetypeKind, n: usize, variants: &VariantFlags) -> Result<Layout, String> {
    if n < 2 {
        return Err(format!("{kind} needs at least 2 agents, got {n}"));
    }
    let mut parents = BTreeMap::new();
    let (roster, topology) = match kind {
        ArchetypeKind::Confidentiality => {
            let mut r = vec![AgentType::ConCooSelUpd];
            r.resize(n, AgentType::ConTraUpd);
            (r, Topology::Star)
        }
        ArchetypeKind::Control => {
            let levels = variants.hierarchical_levels.unwrap_or(2);
            if levels < 2 {
                return Err(format!("hierarchical_levels must be at least 2, got {levels}"));
            }
            let inner_layers = (levels - 2) as usize;
            let inner = 2 * inner_layers;
            let min_leaves = if inner_layers > 0 { 2 } else { 1 };
            if n < 1 + inner + min_leaves {
                return Err(format!("{levels} levels need at least {} agents, got {n}", 1 + inner + min_leaves));
            }
            let leaf = if variants.one_shot_tra { AgentType::Tra } else { AgentType::TraUpd };
            let mut r = vec![AgentType::ConCooSelUpd; 1 + inner];
            r.resize(n, leaf);
            // Two inner nodes per layer; every node hangs off the layer above round-robin.
            let mut above: Vec<AgentId> = vec![0];
            let mut next: AgentId = 1;
            for _ in 0..inner_layers {
                let layer: Vec<AgentId> = (next..next + 2).collect();
                for (i, &id) in layer.iter().enumerate() {
                    parents.insert(id, above[i % above.len()]);
                }
                next += 2;
                above = layer;
            }
            for (i, id) in (next..n as AgentId).enumerate() {
                parents.insert(id, above[i % above.len()]);
            }
            (r, Topology::Tree)
        }
        ArchetypeKind::Flexibility if variants.dedicated_coosel => {
            if n < 3 {
                return Err(format!("dedicated_coosel needs at least 3 agents, got {n}"));
            }
            let mut r = vec![AgentType::ConTraUpd, AgentType::CooSel];
            r.resize(n, AgentType::TraUpd);
            (r, Topology::Complete)
        }
        ArchetypeKind::Flexibility | ArchetypeKind::Robustness => {
            let mut r = vec![AgentType::ConCooSelTraUpd];
            r.resize(n, AgentType::CooSelTraUpd);
            (r, Topology::Complete)
        }
    };
    Ok(Layout {
        roster,
        schedule: kind.schedule(),
        topology,
        parents,
    })
}

/// Design-option choices an instantiation may override.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub variants: VariantFlags,
    pub await_applications: Option<AwaitApplications>,
    pub select_agent: Option<SelectStrategy>,
    pub await_interim_results: Option<AwaitInterim>,
    pub update_ml_model: Option<UpdatePolicy>,
    pub train_ml_model: Option<TrainMode>,
    pub transmit_interim_result: Option<InterimKind>,
    pub rounds: Option<u64>,
    pub seed: Option<u64>,
}

fn default_options(kind: ArchetypeKind, n: usize, v: &VariantFlags) -> DesignOptions {
    match kind {
        ArchetypeKind::Confidentiality => DesignOptions {
            await_applications: AwaitApplications::InitOnly,
            select_agent: SelectStrategy::Attributes,
            await_interim_results: AwaitInterim::ResponseBound(1),
            update_ml_model: UpdatePolicy::Individual,
            train_ml_model: TrainMode::Part,
            provide_ml_task: ProvideTask::InterimOnly,
            announce_agent_selection: Announce::RoleAndSampleIds,
            transmit_interim_result: if v.u_shaped {
                InterimKind::ActivationsWithoutLabels
            } else {
                InterimKind::ActivationsWithLabels
            },
        },
        ArchetypeKind::Control => DesignOptions {
            await_applications: AwaitApplications::Always,
            select_agent: SelectStrategy::Random,
            await_interim_results: AwaitInterim::ResponseBound(n.saturating_sub(1).max(1) as u64),
            update_ml_model: UpdatePolicy::Batched,
            train_ml_model: if v.two_complete_models { TrainMode::TwoComplete } else { TrainMode::OneComplete },
            provide_ml_task: ProvideTask::ModelAndInterim,
            announce_agent_selection: Announce::RoleOnly,
            transmit_interim_result: InterimKind::ParameterValues,
        },
        ArchetypeKind::Flexibility => DesignOptions {
            await_applications: AwaitApplications::InitOnly,
            select_agent: SelectStrategy::Random,
            await_interim_results: AwaitInterim::ResponseBound(1),
            update_ml_model: UpdatePolicy::Individual,
            train_ml_model: TrainMode::OneComplete,
            provide_ml_task: ProvideTask::ModelAndInterim,
            announce_agent_selection: Announce::RoleOnly,
            transmit_interim_result: InterimKind::ParameterValues,
        },
        ArchetypeKind::Robustness => DesignOptions {
            await_applications: AwaitApplications::InitOnly,
            select_agent: SelectStrategy::Votes,
            await_interim_results: AwaitInterim::TimeBound(4),
            update_ml_model: UpdatePolicy::Batched,
            train_ml_model: TrainMode::OneComplete,
            provide_ml_task: ProvideTask::ModelAndInterim,
            announce_agent_selection: Announce::RoleOnly,
            transmit_interim_result: InterimKind::ParameterValues,
        },
    }
}

pub fn default_n_agents(kind: ArchetypeKind, v: &VariantFlags) -> usize {
    match kind {
        ArchetypeKind::Confidentiality => 3,
        ArchetypeKind::Control if v.hierarchical_levels.is_some_and(|l| l > 2) => {
            1 + 2 * (v.hierarchical_levels.unwrap_or(2) as usize - 2) + 4
        }
        ArchetypeKind::Control => 5,
        ArchetypeKind::Flexibility | ArchetypeKind::Robustness => 4,
    }
}

fn default_rounds(kind: ArchetypeKind, v: &VariantFlags) -> u64 {
    match kind {
        ArchetypeKind::Confidentiality => 20,
        ArchetypeKind::Control if v.one_shot_tra => 1,
        ArchetypeKind::Control | ArchetypeKind::Robustness => 10,
        ArchetypeKind::Flexibility => 50,
    }
}

pub fn default_model(kind: ArchetypeKind, d: usize, v: &VariantFlags) -> ModelSpec {
    match kind {
        ArchetypeKind::Confidentiality if v.u_shaped => {
            ModelSpec::mlp(vec![d, 8, 8, 8, 1], Activation::Relu, LossKind::Mse)
        }
        ArchetypeKind::Confidentiality => ModelSpec::mlp(vec![d, 8, 1], Activation::Relu, LossKind::Mse),
        _ => ModelSpec::linear(d, LossKind::Mse),
    }
}

pub fn default_data(kind: ArchetypeKind) -> DataSpec {
    DataSpec {
        n: 240,
        d: 4,
        task: Task::Regression,
        noise: 0.1,
        skew: match kind {
            ArchetypeKind::Flexibility => 0.8,
            _ => 0.0,
        },
    }
}

/// Builds a scenario of `kind` and checks it against the archetype's design-option row.
pub fn instantiate_archetype(
    kind: ArchetypeKind,
    n_agents: usize,
    model: Option<ModelSpec>,
    data: Option<DataSpec>,
    overrides: &Overrides,
) -> Result<ScenarioConfig, ConformanceReport> {
    let v = overrides.variants;
    let data = data.unwrap_or_else(|| default_data(kind));
    let mut options = default_options(kind, n_agents, &v);
    if let Some(x) = overrides.await_applications {
        options.await_applications = x;
    }
    if let Some(x) = overrides.select_agent {
        options.select_agent = x;
    }
    if let Some(x) = overrides.await_interim_results {
        options.await_interim_results = x;
    }
    if let Some(x) = overrides.update_ml_model {
        options.update_ml_model = x;
    }
    if let Some(x) = overrides.train_ml_model {
        options.train_ml_model = x;
    }
    if let Some(x) = overrides.transmit_interim_result {
        options.transmit_interim_result = x;
    }
    let two = options.train_ml_model == TrainMode::TwoComplete;
    let (model, companion_model) = if two {
        let companion = model.unwrap_or_else(|| ModelSpec::linear(data.d, LossKind::Mse));
        (ModelSpec::linear(1, companion.loss), Some(companion))
    } else {
        (model.unwrap_or_else(|| default_model(kind, data.d, &v)), None)
    };
    let cut_points = match kind {
        ArchetypeKind::Confidentiality if v.u_shaped => vec![1, model.layer_count() - 1],
        ArchetypeKind::Confidentiality => vec![1],
        _ => Vec::new(),
    };
    let hyperparameters = match kind {
        ArchetypeKind::Confidentiality => Hyperparameters {
            learning_rate: 0.05,
            local_epochs: 1,
            batch_size: 20,
        },
        _ => Hyperparameters {
            learning_rate: 0.1,
            local_epochs: 1,
            batch_size: 0,
        },
    };
    let rounds = overrides.rounds.unwrap_or_else(|| default_rounds(kind, &v));
    let timing = Timing {
        updater_subset_size: v.updater_subset_size.unwrap_or(1),
        ..Timing::default()
    };
    let name = std::iter::once(kind.name())
        .chain(v.set_names())
        .collect::<Vec<_>>()
        .join("-");
    let cfg = ScenarioConfig {
        name,
        archetype: kind.into(),
        variants: v,
        traits: Some(kind.traits()),
        n_agents,
        roster: None,
        schedule: None,
        parents: None,
        data: DataConfig {
            spec: data,
            shard_sizes: None,
            heldout_n: 200,
        },
        model,
        companion_model,
        cut_points,
        options,
        hyperparameters,
        timing,
        topology: None,
        latency: 1,
        faults: Vec::new(),
        join_ticks: BTreeMap::new(),
        stop: StopRule {
            max_ticks: Some(1_000 + 200 * rounds),
            max_rounds: Some(rounds),
            loss_below: None,
            quiescent: false,
        },
        seed: overrides.seed.unwrap_or(7),
        metrics: MetricsOptions::default(),
    };
    let report = conformance_check(&cfg);
    if report.passed() {
        Ok(cfg)
    } else {
        Err(report)
    }
}

/// The archetype's default scenario with the given variant flags.
pub fn preset(kind: ArchetypeKind, variants: VariantFlags) -> Result<ScenarioConfig, ConformanceReport> {
    let overrides = Overrides {
        variants,
        ..Overrides::default()
    };
    instantiate_archetype(kind, default_n_agents(kind, &variants), None, None, &overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosters_match_rows() {
        let d = VariantFlags::default();
        let l = layout(ArchetypeKind::Control, 5, &d).unwrap();
        assert_eq!(l.roster[0], AgentType::ConCooSelUpd);
        assert!(l.roster[1..].iter().all(|&t| t == AgentType::TraUpd));
        assert_eq!(l.parents.len(), 4);
        let l = layout(ArchetypeKind::Confidentiality, 4, &d).unwrap();
        assert_eq!(l.roster.iter().filter(|&&t| t == AgentType::ConTraUpd).count(), 3);
        let l = layout(ArchetypeKind::Robustness, 4, &d).unwrap();
        assert_eq!(l.roster[0], AgentType::ConCooSelTraUpd);
        assert_eq!(l.topology, Topology::Complete);
    }

    #[test]
    fn hierarchy_has_inner_nodes() {
        let v = VariantFlags {
            hierarchical_levels: Some(3),
            ..VariantFlags::default()
        };
        let l = layout(ArchetypeKind::Control, 7, &v).unwrap();
        assert_eq!(l.roster.iter().filter(|&&t| t == AgentType::ConCooSelUpd).count(), 3);
        assert_eq!(l.parents[&1], 0);
        assert_eq!(l.parents[&2], 0);
        assert!(l.parents[&3] == 1 || l.parents[&3] == 2);
        assert!(layout(ArchetypeKind::Control, 4, &v).is_err());
    }

    #[test]
    fn flags_parse() {
        let mut v = VariantFlags::default();
        v.set("hierarchical_levels=4").unwrap();
        v.set("u_shaped").unwrap();
        assert_eq!(v.hierarchical_levels, Some(4));
        assert!(v.u_shaped);
        assert!(v.set("bogus").is_err());
        assert!(v.set("updater_subset_size=x").is_err());
    }

    #[test]
    fn trait_table() {
        assert_eq!(
            ArchetypeKind::Flexibility.traits(),
            TraitProfile {
                hierarchy: Hierarchy::Weak,
                coalition_wide_sync: false
            }
        );
        assert!(ArchetypeKind::Control.traits().coalition_wide_sync);
    }
}
