use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::archetypes::{check_option_tags, conformance_check, layout, ArchetypeClaim, Layout, TraitProfile, VariantFlags};
use crate::ml_core::{gen_synthetic_dataset, heldout_dataset, partition, split_model, DataSpec, Dataset, Model, ModelSpec};
use crate::netsim::{build_acquaintance_graph, Authority, FaultSpec, Sim, StopRule, Topology};
use crate::protocol::{
    AgentConfig, AgentState, AgentType, CoalitionSetup, DesignOptions, Hyperparameters, Role, Schedule, TrainMode,
    DEFAULT_GUARD_TICKS, DEFAULT_TIME_BOUND,
};
use crate::AgentId;

const MODEL_STREAM: u64 = 5;
const COMPANION_STREAM_BASE: u64 = 6 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Pooled training data; `spec.n` rows are shared out among trainers.
    pub spec: DataSpec,
    /// Contiguous shard sizes in trainer id order, instead of a skewed partition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shard_sizes: Option<Vec<usize>>,
    #[serde(default = "default_heldout")]
    pub heldout_n: usize,
}

fn default_heldout() -> usize {
    200
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timing {
    #[serde(default = "default_init_window")]
    pub init_window: u64,
    #[serde(default = "default_readiness_window")]
    pub readiness_window: u64,
    #[serde(default = "default_guard")]
    pub guard_ticks: u64,
    #[serde(default = "default_one")]
    pub local_rounds_per_sync: u64,
    #[serde(default = "default_one_usize")]
    pub updater_subset_size: usize,
    /// Trainers selected per round; all ready trainers when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_count: Option<usize>,
}

fn default_init_window() -> u64 {
    3
}
fn default_readiness_window() -> u64 {
    DEFAULT_TIME_BOUND
}
fn default_guard() -> u64 {
    DEFAULT_GUARD_TICKS
}
fn default_one() -> u64 {
    1
}
fn default_one_usize() -> usize {
    1
}

impl Default for Timing {
    fn default() -> Self {
        Self {
            init_window: default_init_window(),
            readiness_window: default_readiness_window(),
            guard_ticks: default_guard(),
            local_rounds_per_sync: 1,
            updater_subset_size: 1,
            selection_count: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsOptions {
    /// Mean held-out loss that counts as reaching the threshold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_threshold: Option<f64>,
    /// Records wall time, which makes reports differ between runs.
    #[serde(default)]
    pub wall_time: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub archetype: ArchetypeClaim,
    #[serde(default, skip_serializing_if = "VariantFlags::is_empty")]
    pub variants: VariantFlags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traits: Option<TraitProfile>,
    pub n_agents: usize,
    /// Agent types by id; derived from the archetype when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roster: Option<Vec<AgentType>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Schedule>,
    /// Parent of every non-root agent, for tree layouts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parents: Option<BTreeMap<AgentId, AgentId>>,
    pub data: DataConfig,
    pub model: ModelSpec,
    /// Raw-data model whose predictions feed `model` under two_complete training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub companion_model: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cut_points: Vec<usize>,
    pub options: DesignOptions,
    pub hyperparameters: Hyperparameters,
    #[serde(default)]
    pub timing: Timing,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<Topology>,
    #[serde(default = "default_latency")]
    pub latency: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub faults: Vec<FaultSpec>,
    /// Initialization start tick of late joiners.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub join_ticks: BTreeMap<AgentId, u64>,
    pub stop: StopRule,
    pub seed: u64,
    #[serde(default)]
    pub metrics: MetricsOptions,
}

fn default_latency() -> u64 {
    1
}

/// Parses and validates a scenario; every error names the offending field.
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, HarnessError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| HarnessError::Parse {
        path: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    let precheck = check_option_tags(&value).map_err(|message| HarnessError::Parse {
        path: "archetype".into(),
        message,
    })?;
    if !precheck.passed() {
        return Err(HarnessError::Conformance(precheck));
    }
    let cfg: ScenarioConfig = serde_path_to_error::deserialize(&value).map_err(|e| HarnessError::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    validate(&cfg)?;
    Ok(cfg)
}

/// Pretty JSON with a trailing newline; parses back to an equal config.
pub fn emit_scenario(cfg: &ScenarioConfig) -> String {
    let mut s = serde_json::to_string_pretty(cfg).expect("scenario serializes");
    s.push('\n');
    s
}

fn config_err(path: &str, message: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        path: path.into(),
        message: message.into(),
    }
}

/// Structural checks plus conformance with the claimed archetype.
pub fn validate(cfg: &ScenarioConfig) -> Result<(), HarnessError> {
    let report = conformance_check(cfg);
    if !report.passed() {
        return Err(HarnessError::Conformance(report));
    }
    cfg.data.spec.validate().map_err(|e| config_err("data.spec", e.to_string()))?;
    cfg.model.validate().map_err(|e| config_err("model", e.to_string()))?;
    if let Some(c) = &cfg.companion_model {
        c.validate().map_err(|e| config_err("companion_model", e.to_string()))?;
    }
    cfg.options.validate().map_err(|e| config_err("options.await_interim_results", e))?;
    if cfg.data.heldout_n == 0 {
        return Err(config_err("data.heldout_n", "must be at least 1"));
    }
    if cfg.latency == 0 {
        return Err(config_err("latency", "must be at least 1 tick"));
    }
    if !cfg.hyperparameters.learning_rate.is_finite() || cfg.hyperparameters.learning_rate <= 0.0 {
        return Err(config_err("hyperparameters.learning_rate", "must be positive and finite"));
    }
    let input = match (&cfg.companion_model, cfg.options.train_ml_model) {
        (Some(c), TrainMode::TwoComplete) => {
            if cfg.model.input_width() != 1 {
                return Err(config_err("model", "two_complete shared model takes the companion output as its one input"));
            }
            c.input_width()
        }
        _ => cfg.model.input_width(),
    };
    if input != cfg.data.spec.d {
        return Err(config_err("model", format!("input width {input} does not match data.spec.d {}", cfg.data.spec.d)));
    }
    let layers = cfg.model.layer_count();
    if cfg.cut_points.windows(2).any(|w| w[0] >= w[1]) || cfg.cut_points.iter().any(|&c| c == 0 || c >= layers) {
        return Err(config_err("cut_points", format!("need strictly increasing cuts inside 1..{layers}")));
    }
    for (i, f) in cfg.faults.iter().enumerate() {
        f.validate().map_err(|e| config_err(&format!("faults[{i}]"), e.to_string()))?;
        if let FaultSpec::CrashAgent { agent, .. } = f {
            if *agent as usize >= cfg.n_agents {
                return Err(config_err(&format!("faults[{i}].agent"), format!("no agent {agent}")));
            }
        }
    }
    if let Some(&id) = cfg.join_ticks.keys().find(|&&id| id as usize >= cfg.n_agents) {
        return Err(config_err("join_ticks", format!("no agent {id}")));
    }
    resolve_layout(cfg)?;
    Ok(())
}

/// Roster, schedule and graph shape, from the archetype or from the custom fields.
pub fn resolve_layout(cfg: &ScenarioConfig) -> Result<Layout, HarnessError> {
    let mut l = match cfg.archetype.kind() {
        Some(kind) => layout(kind, cfg.n_agents, &cfg.variants).map_err(|e| config_err("n_agents", e))?,
        None => {
            let roster = cfg.roster.clone().ok_or_else(|| config_err("roster", "custom scenarios list their roster"))?;
            let schedule = cfg.schedule.ok_or_else(|| config_err("schedule", "custom scenarios name a schedule"))?;
            let topology = cfg.topology.unwrap_or(match schedule {
                Schedule::Split => Topology::Star,
                Schedule::Tree => Topology::Tree,
                Schedule::Gossip | Schedule::Swarm => Topology::Complete,
            });
            let parents = match (&cfg.parents, topology) {
                (Some(p), _) => p.clone(),
                (None, Topology::Tree) => (1..roster.len() as AgentId).map(|id| (id, 0)).collect(),
                (None, _) => BTreeMap::new(),
            };
            Layout {
                roster,
                schedule,
                topology,
                parents,
            }
        }
    };
    if let Some(r) = &cfg.roster {
        l.roster = r.clone();
    }
    if let Some(p) = &cfg.parents {
        l.parents = p.clone();
    }
    if l.roster.len() != cfg.n_agents {
        return Err(config_err("roster", format!("{} agents listed, n_agents is {}", l.roster.len(), cfg.n_agents)));
    }
    if !l.roster[0].has(Role::Configurator) {
        return Err(config_err("roster[0]", "agent 0 must hold the configurator role"));
    }
    Ok(l)
}

fn trainer_shards(cfg: &ScenarioConfig, trainers: usize) -> Result<Vec<Dataset>, HarnessError> {
    let pooled = gen_synthetic_dataset(&cfg.data.spec, cfg.seed).map_err(|e| config_err("data.spec", e.to_string()))?;
    if trainers == 0 {
        return Ok(Vec::new());
    }
    match &cfg.data.shard_sizes {
        Some(sizes) => {
            if sizes.len() != trainers || sizes.iter().sum::<usize>() != pooled.len() || sizes.contains(&0) {
                return Err(config_err(
                    "data.shard_sizes",
                    format!("need {trainers} positive sizes summing to {}", pooled.len()),
                ));
            }
            let mut at = 0;
            Ok(sizes
                .iter()
                .map(|&n| {
                    let rows: Vec<usize> = (at..at + n).collect();
                    at += n;
                    pooled.subset(&rows)
                })
                .collect())
        }
        None => partition(&pooled, trainers, cfg.data.spec.skew, cfg.seed).map_err(|e| config_err("data.spec", e.to_string())),
    }
}

/// The initial full model every scenario run starts from.
pub fn initial_model(cfg: &ScenarioConfig) -> Result<Model, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(MODEL_STREAM);
    Model::init(&cfg.model, &mut rng).map_err(|e| config_err("model", e.to_string()))
}

/// Held-out evaluation rows for a scenario.
pub fn heldout(cfg: &ScenarioConfig) -> Result<Dataset, HarnessError> {
    heldout_dataset(&cfg.data.spec, cfg.seed, cfg.data.heldout_n).map_err(|e| config_err("data", e.to_string()))
}

/// Builds the simulator with agents, data, graph and faults in place.
pub fn build_sim(cfg: &ScenarioConfig) -> Result<Sim, HarnessError> {
    validate(cfg)?;
    let l = resolve_layout(cfg)?;
    let graph = build_acquaintance_graph(l.topology, &l.roster, &l.parents, cfg.latency)?;
    let trainer_ids: Vec<AgentId> = (0..cfg.n_agents as AgentId)
        .filter(|&id| l.roster[id as usize].has(Role::Trainer))
        .collect();
    let mut shards = trainer_shards(cfg, trainer_ids.len())?.into_iter();
    let full = initial_model(cfg)?;
    let segments = if l.schedule == Schedule::Split {
        split_model(&full, &cfg.cut_points).map_err(|e| config_err("cut_points", e.to_string()))?
    } else {
        Vec::new()
    };
    let u_shaped = cfg.cut_points.len() >= 2;

    let mut agents = Vec::with_capacity(cfg.n_agents);
    for (i, &agent_type) in l.roster.iter().enumerate() {
        let id = i as AgentId;
        let mut config = AgentConfig::new(l.schedule);
        config.init_window = cfg.timing.init_window;
        config.readiness_window = cfg.timing.readiness_window;
        config.guard_ticks = cfg.timing.guard_ticks;
        config.local_rounds_per_sync = cfg.timing.local_rounds_per_sync;
        config.updater_subset_size = cfg.timing.updater_subset_size;
        config.selection_count = cfg.timing.selection_count.unwrap_or(usize::MAX);
        config.parallel_clients = cfg.variants.parallel_clients;
        config.cut_points = cfg.cut_points.clone();
        if id == 0 {
            config.setup = Some(CoalitionSetup {
                purpose: cfg.name.clone(),
                spec: cfg.model.clone(),
                cut_points: cfg.cut_points.clone(),
                hyperparameters: cfg.hyperparameters.clone(),
                model_must_stay_local: l.schedule == Schedule::Split,
            });
        }
        let mut st = AgentState::new(id, agent_type, config, cfg.seed);
        if agent_type.has(Role::Trainer) {
            st = st.with_dataset(shards.next().expect("one shard per trainer"));
        }
        if l.schedule == Schedule::Split {
            if agent_type.has(Role::Trainer) {
                st.segments.push(segments[0].clone());
                if u_shaped {
                    st.segments.push(segments[2].clone());
                }
            } else if id == 0 {
                st.segments.push(segments[1].clone());
            }
        } else if id == 0 {
            st.model = Some(full.clone());
        }
        if cfg.options.train_ml_model == TrainMode::TwoComplete && agent_type.has(Role::Trainer) {
            let spec = cfg.companion_model.as_ref().expect("validated");
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(COMPANION_STREAM_BASE + u64::from(id));
            st.companion = Some(Model::init(spec, &mut rng).map_err(|e| config_err("companion_model", e.to_string()))?);
        }
        agents.push(st);
    }

    let authority = match l.schedule {
        Schedule::Split | Schedule::Tree => Authority::Agent(0),
        Schedule::Gossip | Schedule::Swarm => Authority::MinLiveTrainer,
    };
    let mut sim = Sim::new(agents, graph, cfg.options, authority)?.with_heldout(heldout(cfg)?);
    for f in &cfg.faults {
        sim.inject_fault(f.clone())?;
    }
    for (&id, &tick) in &cfg.join_ticks {
        sim.set_join_tick(id, tick)?;
    }
    Ok(sim)
}

/// The pooled training set before sharding.
pub fn pooled_data(cfg: &ScenarioConfig) -> Result<Dataset, HarnessError> {
    gen_synthetic_dataset(&cfg.data.spec, cfg.seed).map_err(|e| config_err("data.spec", e.to_string()))
}

/// Shards in trainer id order, as handed out by [`build_sim`].
pub fn shards(cfg: &ScenarioConfig) -> Result<Vec<Dataset>, HarnessError> {
    let l = resolve_layout(cfg)?;
    let trainers = l.roster.iter().filter(|t| t.has(Role::Trainer)).count();
    trainer_shards(cfg, trainers)
}
