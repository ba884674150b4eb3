use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{layout, ArchetypeClaim, ArchetypeKind, Hierarchy, VariantFlags};
use crate::harness::ScenarioConfig;
use crate::interim::{InterimKind, UpdatePolicy};
use crate::netsim::Topology;
use crate::protocol::{AgentType, Announce, AwaitInterim, ProvideTask, SelectStrategy, TrainMode};

/// A row of the archetype table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    Hierarchy,
    Synchronization,
    AwaitApplications,
    AwaitInterimResults,
    SelectAgent,
    TrainMlModel,
    UpdateMlModel,
    AnnounceAgentSelection,
    ProvideMlTask,
    TransmitInterimResult,
    AgentTypes,
    VariantFlags,
}

impl Cell {
    pub fn name(self) -> &'static str {
        match self {
            Cell::Hierarchy => "hierarchy",
            Cell::Synchronization => "coalition_wide_sync",
            Cell::AwaitApplications => "awaitApplications",
            Cell::AwaitInterimResults => "awaitInterimResults",
            Cell::SelectAgent => "selectAgent",
            Cell::TrainMlModel => "trainMLModel",
            Cell::UpdateMlModel => "updateMLModel",
            Cell::AnnounceAgentSelection => "announceAgentSelection",
            Cell::ProvideMlTask => "provideMLTask",
            Cell::TransmitInterimResult => "transmitInterimResult",
            Cell::AgentTypes => "agent_types",
            Cell::VariantFlags => "variant_flags",
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub cell: Cell,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub archetype: Option<ArchetypeKind>,
    pub violations: Vec<Violation>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut c: Vec<Cell> = self.violations.iter().map(|v| v.cell).collect();
        c.dedup();
        c
    }
}

impl fmt::Display for ConformanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = self.archetype.map_or("custom", ArchetypeKind::name);
        if self.passed() {
            return write!(f, "{name}: conforms");
        }
        write!(f, "{name}: ")?;
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "[{}] {}", v.cell, v.detail)?;
        }
        Ok(())
    }
}

struct Row {
    select: &'static [SelectStrategy],
    train: &'static [TrainMode],
    update: &'static [UpdatePolicy],
    announce: Announce,
    provide: ProvideTask,
    transmit: &'static [InterimKind],
    topology: Topology,
}

fn row(kind: ArchetypeKind) -> Row {
    use InterimKind::*;
    use SelectStrategy::{Attributes, Random, Votes};
    use TrainMode::{OneComplete, Part, TwoComplete};
    const BOTH: &[UpdatePolicy] = &[UpdatePolicy::Batched, UpdatePolicy::Individual];
    const MODEL_KINDS: &[InterimKind] = &[Gradients, ParameterValues];
    match kind {
        ArchetypeKind::Confidentiality => Row {
            select: &[Attributes, Random],
            train: &[Part],
            update: BOTH,
            announce: Announce::RoleAndSampleIds,
            provide: ProvideTask::InterimOnly,
            transmit: &[ActivationsWithLabels, ActivationsWithoutLabels, Gradients, PseudoResiduals],
            topology: Topology::Star,
        },
        ArchetypeKind::Control => Row {
            select: &[Attributes, Random],
            train: &[Part, OneComplete, TwoComplete],
            update: BOTH,
            announce: Announce::RoleOnly,
            provide: ProvideTask::ModelAndInterim,
            transmit: MODEL_KINDS,
            topology: Topology::Tree,
        },
        ArchetypeKind::Flexibility => Row {
            select: &[Attributes, Random],
            train: &[OneComplete, TwoComplete],
            update: BOTH,
            announce: Announce::RoleOnly,
            provide: ProvideTask::ModelAndInterim,
            transmit: MODEL_KINDS,
            topology: Topology::Complete,
        },
        ArchetypeKind::Robustness => Row {
            select: &[Votes],
            train: &[OneComplete],
            update: &[UpdatePolicy::Batched],
            announce: Announce::RoleOnly,
            provide: ProvideTask::ModelAndInterim,
            transmit: MODEL_KINDS,
            topology: Topology::Complete,
        },
    }
}

fn json_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(Value::String(s)) => s,
        Ok(Value::Object(m)) => m.keys().next().cloned().unwrap_or_default(),
        Ok(other) => other.to_string(),
        Err(_) => "?".into(),
    }
}

struct Checker {
    violations: Vec<Violation>,
}

impl Checker {
    fn fail(&mut self, cell: Cell, detail: String) {
        self.violations.push(Violation { cell, detail });
    }

    fn one_of<T: PartialEq + Serialize>(&mut self, cell: Cell, value: &T, allowed: &[T]) {
        if !allowed.contains(value) {
            let names: Vec<String> = allowed.iter().map(json_name).collect();
            self.fail(cell, format!("{} not in {{{}}}", json_name(value), names.join(", ")));
        }
    }
}

fn roster_violation(kind: ArchetypeKind, v: &VariantFlags, roster: &[AgentType]) -> Option<String> {
    let mut counts: BTreeMap<AgentType, usize> = BTreeMap::new();
    for t in roster {
        *counts.entry(*t).or_default() += 1;
    }
    let inner = 2 * v.hierarchical_levels.map_or(0, |l| l.saturating_sub(2) as usize);
    // (type, exact count or None for at least one)
    let expected: Vec<(AgentType, Option<usize>)> = match kind {
        ArchetypeKind::Confidentiality => vec![(AgentType::ConCooSelUpd, Some(1)), (AgentType::ConTraUpd, None)],
        ArchetypeKind::Control if v.one_shot_tra => vec![(AgentType::ConCooSelUpd, Some(1 + inner)), (AgentType::Tra, None)],
        ArchetypeKind::Control => vec![(AgentType::ConCooSelUpd, Some(1 + inner)), (AgentType::TraUpd, None)],
        ArchetypeKind::Flexibility if v.dedicated_coosel => vec![
            (AgentType::ConTraUpd, Some(1)),
            (AgentType::CooSel, Some(1)),
            (AgentType::TraUpd, None),
        ],
        ArchetypeKind::Flexibility | ArchetypeKind::Robustness => {
            vec![(AgentType::ConCooSelTraUpd, Some(1)), (AgentType::CooSelTraUpd, None)]
        }
    };
    let render = || {
        expected
            .iter()
            .map(|(t, n)| match n {
                Some(n) => format!("{t} x{n}"),
                None => format!("{t} x>=1"),
            })
            .collect::<Vec<_>>()
            .join(" + ")
    };
    for (t, n) in &expected {
        let have = counts.remove(t).unwrap_or(0);
        let ok = match n {
            Some(n) => have == *n,
            None => have >= 1,
        };
        if !ok {
            return Some(format!("found {have} {t}, expected {}", render()));
        }
    }
    counts
        .keys()
        .next()
        .map(|extra| format!("unexpected {extra}, expected {}", render()))
}

/// Checks a typed scenario against its claimed archetype row.
pub fn conformance_check(cfg: &ScenarioConfig) -> ConformanceReport {
    let Some(kind) = cfg.archetype.kind() else {
        return ConformanceReport {
            archetype: None,
            violations: Vec::new(),
        };
    };
    let mut c = Checker { violations: Vec::new() };
    let r = row(kind);
    let o = &cfg.options;
    let v = &cfg.variants;

    let traits = kind.traits();
    if let Some(claimed) = cfg.traits {
        if claimed.hierarchy != traits.hierarchy {
            c.fail(Cell::Hierarchy, format!("claimed {:?}, archetype is {:?}", claimed.hierarchy, traits.hierarchy));
        }
        if claimed.coalition_wide_sync != traits.coalition_wide_sync {
            c.fail(
                Cell::Synchronization,
                format!("claimed {}, archetype is {}", claimed.coalition_wide_sync, traits.coalition_wide_sync),
            );
        }
    }
    if let Some(t) = cfg.topology {
        if t != r.topology {
            let shape = if traits.hierarchy == Hierarchy::Strong { "hierarchical" } else { "peer-to-peer" };
            c.fail(Cell::Hierarchy, format!("topology {} is not the {shape} {}", json_name(&t), json_name(&r.topology)));
        }
    }
    if cfg.parents.is_some() && kind != ArchetypeKind::Control {
        c.fail(Cell::Hierarchy, "parent links only apply to tree layouts".into());
    }
    if cfg.schedule.is_some_and(|s| s != kind.schedule()) {
        c.fail(Cell::Synchronization, format!("schedule {} does not belong to {kind}", json_name(&cfg.schedule)));
    }

    if let AwaitInterim::ResponseBound(0) | AwaitInterim::TimeBound(0) = o.await_interim_results {
        c.fail(Cell::AwaitInterimResults, "threshold must be at least 1".into());
    }
    c.one_of(Cell::SelectAgent, &o.select_agent, r.select);
    c.one_of(Cell::TrainMlModel, &o.train_ml_model, r.train);
    c.one_of(Cell::UpdateMlModel, &o.update_ml_model, r.update);
    c.one_of(Cell::AnnounceAgentSelection, &o.announce_agent_selection, &[r.announce]);
    c.one_of(Cell::ProvideMlTask, &o.provide_ml_task, &[r.provide]);
    c.one_of(Cell::TransmitInterimResult, &o.transmit_interim_result, r.transmit);

    let allowed = kind.variant_names();
    for name in v.set_names() {
        if !allowed.contains(&name) {
            c.fail(Cell::VariantFlags, format!("{name} is not a {kind} variant"));
        }
    }
    match kind {
        ArchetypeKind::Confidentiality => {
            let want = if v.u_shaped { 2 } else { 1 };
            if cfg.cut_points.len() != want {
                c.fail(Cell::TrainMlModel, format!("expected {want} cut point(s), found {}", cfg.cut_points.len()));
            }
            if v.u_shaped
                && !matches!(
                    o.transmit_interim_result,
                    InterimKind::ActivationsWithoutLabels | InterimKind::Gradients
                )
            {
                c.fail(
                    Cell::TransmitInterimResult,
                    "u_shaped keeps labels local: activations_without_labels or gradients".into(),
                );
            }
        }
        ArchetypeKind::Control => {
            if v.two_complete_models != (o.train_ml_model == TrainMode::TwoComplete) {
                c.fail(Cell::TrainMlModel, "two_complete_models pairs with train_ml_model two_complete".into());
            }
            if v.hierarchical_levels.is_some_and(|l| l < 2) {
                c.fail(Cell::VariantFlags, "hierarchical_levels must be at least 2".into());
            }
        }
        ArchetypeKind::Flexibility => {}
        ArchetypeKind::Robustness => {
            if let Some(k) = v.updater_subset_size {
                if k == 0 || k > cfg.n_agents {
                    c.fail(Cell::VariantFlags, format!("updater_subset_size {k} outside 1..={}", cfg.n_agents));
                }
            }
        }
    }
    if o.train_ml_model == TrainMode::TwoComplete && cfg.companion_model.is_none() {
        c.fail(Cell::TrainMlModel, "two_complete needs a companion_model".into());
    }

    let roster = match &cfg.roster {
        Some(r) => Ok(r.clone()),
        None => layout(kind, cfg.n_agents, v).map(|l| l.roster),
    };
    match roster {
        Ok(r) if r.len() != cfg.n_agents => {
            c.fail(Cell::AgentTypes, format!("roster lists {} agents, n_agents is {}", r.len(), cfg.n_agents))
        }
        Ok(r) => {
            if let Some(detail) = roster_violation(kind, v, &r) {
                c.fail(Cell::AgentTypes, detail);
            }
        }
        Err(detail) => c.fail(Cell::AgentTypes, detail),
    }
    ConformanceReport {
        archetype: Some(kind),
        violations: c.violations,
    }
}

const OPTION_CELLS: [(&str, Cell, &[&str]); 8] = [
    ("await_applications", Cell::AwaitApplications, &["always", "init_only"]),
    ("select_agent", Cell::SelectAgent, &["votes", "attributes", "random"]),
    ("await_interim_results", Cell::AwaitInterimResults, &["response_bound", "time_bound"]),
    ("update_ml_model", Cell::UpdateMlModel, &["batched", "individual"]),
    ("train_ml_model", Cell::TrainMlModel, &["two_complete", "one_complete", "part"]),
    ("provide_ml_task", Cell::ProvideMlTask, &["interim_only", "model_and_interim"]),
    ("announce_agent_selection", Cell::AnnounceAgentSelection, &["role_only", "role_and_sample_ids"]),
    (
        "transmit_interim_result",
        Cell::TransmitInterimResult,
        &[
            "parameter_values",
            "gradients",
            "activations_with_labels",
            "activations_without_labels",
            "pseudo_residuals",
        ],
    ),
];

/// Conformance of an untyped scenario, including option values no typed config can hold.
///
/// Errors on an archetype claim that names no archetype or on a scenario that
/// does not parse once its option values are known.
pub fn conformance_check_value(value: &Value) -> Result<ConformanceReport, String> {
    let tags = check_option_tags(value)?;
    if !tags.passed() {
        return Ok(tags);
    }
    let cfg: ScenarioConfig = serde_json::from_value(value.clone()).map_err(|e| e.to_string())?;
    Ok(conformance_check(&cfg))
}

/// Reports option values outside the closed option sets before typed parsing.
pub(crate) fn check_option_tags(value: &Value) -> Result<ConformanceReport, String> {
    let claim = match value.get("archetype") {
        Some(a) => serde_json::from_value::<ArchetypeClaim>(a.clone()).map_err(|_| format!("unknown archetype claim {a}"))?,
        None => return Err("missing field `archetype`".into()),
    };
    let mut c = Checker { violations: Vec::new() };
    if let Some(options) = value.get("options").and_then(Value::as_object) {
        for (field, cell, names) in OPTION_CELLS {
            let Some(v) = options.get(field) else {
                continue;
            };
            let tag = match v {
                Value::String(s) => Some(s.as_str()),
                Value::Object(m) if m.len() == 1 => m.keys().next().map(String::as_str),
                _ => None,
            };
            match tag {
                Some(t) if names.contains(&t) => {}
                _ => c.fail(cell, format!("{field} = {v} is not one of {{{}}}", names.join(", "))),
            }
        }
    }
    Ok(ConformanceReport {
        archetype: claim.kind(),
        violations: c.violations,
    })
}
