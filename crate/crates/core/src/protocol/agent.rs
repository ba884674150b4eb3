use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::coalition::{apply_for_coalition, assign_recipients, check_viability, decide_on_application, Registry};
use super::gossip::GossipFlow;
use super::message::{
    build_ml_task, Assignment, AssignmentMode, Hyperparameters, MLTask, Message, ModelDefinition, Payload,
    RejectReason, Verdict,
};
use super::options::{AwaitApplications, DesignOptions, ProvideTask, DEFAULT_GUARD_TICKS, DEFAULT_TIME_BOUND};
use super::roles::{Activity, AgentType, Phase, Role};
use super::split::SplitFlow;
use super::swarm::SwarmFlow;
use super::tree::TreeFlow;
use super::training::fingerprint;
use super::ProtocolError;
use crate::interim::{InterimResultDefinition, ShapeContract};
use crate::ml_core::{Dataset, Model, ModelSegment, ModelSpec, Parameterized};
use crate::netsim::AcquaintanceGraph;
use crate::AgentId;

/// Round schedule an agent follows during operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Segments on either side of a cut; activations and gradients cross it.
    Split,
    /// Hub sends the model down, children train and report back up.
    Tree,
    /// Peers train and push to one ready peer at a time.
    Gossip,
    /// Readiness broadcast, vote, results to elected updaters, shared update.
    Swarm,
}

/// What the coalition configurator defines and publishes.
#[derive(Debug, Clone, PartialEq)]
pub struct CoalitionSetup {
    pub purpose: String,
    pub spec: ModelSpec,
    pub cut_points: Vec<usize>,
    pub hyperparameters: Hyperparameters,
    /// Forbids disclosing the model definition.
    pub model_must_stay_local: bool,
}

/// Static per-agent settings fixed when the scenario is built.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub schedule: Schedule,
    pub init_window: u64,
    pub readiness_window: u64,
    pub guard_ticks: u64,
    pub selection_count: usize,
    pub local_rounds_per_sync: u64,
    pub updater_subset_size: usize,
    pub parallel_clients: bool,
    /// Cut layer indices of the parent model, when it is split.
    pub cut_points: Vec<usize>,
    /// Present only on the agent that configures the coalition.
    pub setup: Option<CoalitionSetup>,
}

impl AgentConfig {
    pub fn new(schedule: Schedule) -> Self {
        Self {
            schedule,
            init_window: 3,
            readiness_window: DEFAULT_TIME_BOUND,
            guard_ticks: DEFAULT_GUARD_TICKS,
            selection_count: usize::MAX,
            local_rounds_per_sync: 1,
            updater_subset_size: 1,
            parallel_clients: false,
            cut_points: Vec::new(),
            setup: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    Deliver(Message),
    Tick,
    StartPhase(Phase),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub tick: u64,
    pub kind: EventKind,
}

/// Read-only view handed to every step.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub tick: u64,
    pub options: &'a DesignOptions,
    pub registry: &'a Registry,
    pub graph: &'a AcquaintanceGraph,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Abort {
    Viability(String),
    Deadlock(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutput {
    pub messages: Vec<Message>,
    pub activities: Vec<Activity>,
    pub round_completed: Option<u64>,
    /// `(round, mean training loss)`.
    pub train_losses: Vec<(u64, f64)>,
    /// `(round, parameter fingerprint)` after each local model change.
    pub model_updates: Vec<(u64, u64)>,
    pub notes: Vec<String>,
    pub guard_trips: Vec<u64>,
    pub registered: bool,
    pub coalition_initialized: bool,
    pub phase_entered: Option<Phase>,
    pub abort: Option<Abort>,
}

impl StepOutput {
    fn is_quiet(&self) -> bool {
        self.messages.is_empty() && self.activities.is_empty() && self.round_completed.is_none()
    }
}

/// Collects the effects of one step and checks role legality as they happen.
pub(crate) struct Out {
    id: AgentId,
    agent_type: AgentType,
    pub(crate) tick: u64,
    pub(crate) out: StepOutput,
}

impl Out {
    pub(crate) fn perform(&mut self, activity: Activity) -> Result<(), ProtocolError> {
        if !self.agent_type.may_perform(activity) {
            return Err(ProtocolError::RoleViolation {
                agent: self.id,
                agent_type: self.agent_type,
                action: format!("{activity:?}"),
            });
        }
        self.out.activities.push(activity);
        Ok(())
    }

    pub(crate) fn send(&mut self, recipients: Vec<AgentId>, round: u64, payload: Payload) -> Result<(), ProtocolError> {
        let protocol = payload.protocol();
        if !self.agent_type.may_send(protocol) {
            return Err(ProtocolError::RoleViolation {
                agent: self.id,
                agent_type: self.agent_type,
                action: protocol.name().to_string(),
            });
        }
        let msg = Message::new(self.id, recipients, round, self.tick, payload);
        msg.validate()?;
        self.out.messages.push(msg);
        Ok(())
    }

    pub(crate) fn note(&mut self, text: impl Into<String>) {
        self.out.notes.push(text.into());
    }

    pub(crate) fn loss(&mut self, round: u64, loss: f64) {
        self.out.train_losses.push((round, loss));
    }

    pub(crate) fn model_changed(&mut self, round: u64, fp: u64) {
        self.out.model_updates.push((round, fp));
    }

    pub(crate) fn round_done(&mut self, completed: u64) {
        self.out.round_completed = Some(completed);
    }

    pub(crate) fn guard_trip(&mut self, round: u64, what: &str) {
        self.out.guard_trips.push(round);
        self.out.abort = Some(Abort::Deadlock(format!(
            "agent {} waited past the guard for {what} in round {round}",
            self.id
        )));
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) enum Flow {
    #[default]
    Idle,
    Split(Box<SplitFlow>),
    Tree(Box<TreeFlow>),
    Gossip(Box<GossipFlow>),
    Swarm(Box<SwarmFlow>),
}

#[derive(Debug, Clone, PartialEq)]
struct InitDuty {
    deadline: u64,
    admitted: BTreeMap<AgentId, AgentType>,
    closed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub id: AgentId,
    pub agent_type: AgentType,
    pub active_roles: BTreeSet<Role>,
    pub phase: Phase,
    pub dataset: Option<Dataset>,
    pub model: Option<Model>,
    pub segments: Vec<ModelSegment>,
    pub companion: Option<Model>,
    pub ready: bool,
    pub assigned_recipient: Option<AgentId>,
    pub assignment: Option<Assignment>,
    pub task: Option<MLTask>,
    pub admitted: bool,
    pub rounds_completed: u64,
    pub idle_ticks: u64,
    pub rng: ChaCha8Rng,
    pub config: AgentConfig,
    pub(crate) flow: Flow,
    init: Option<InitDuty>,
    last_active_tick: Option<u64>,
    started: bool,
}

/// Stream offset separating agent streams from data and fault streams.
pub const AGENT_STREAM_BASE: u64 = 1 << 32;

impl AgentState {
    pub fn new(id: AgentId, agent_type: AgentType, config: AgentConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(AGENT_STREAM_BASE + u64::from(id));
        Self {
            id,
            agent_type,
            active_roles: BTreeSet::new(),
            phase: Phase::Initialization,
            dataset: None,
            model: None,
            segments: Vec::new(),
            companion: None,
            ready: false,
            assigned_recipient: None,
            assignment: None,
            task: None,
            admitted: false,
            rounds_completed: 0,
            idle_ticks: 0,
            rng,
            config,
            flow: Flow::Idle,
            init: None,
            last_active_tick: None,
            started: false,
        }
    }

    pub fn with_dataset(mut self, data: Dataset) -> Self {
        self.dataset = Some(data);
        self
    }

    pub fn data_len(&self) -> u64 {
        self.dataset.as_ref().map_or(0, |d| d.len() as u64)
    }

    pub fn is_configurator(&self) -> bool {
        self.config.setup.is_some()
    }

    pub fn started(&self) -> bool {
        self.started
    }

    /// Whether the agent has deadlines or queued work that future ticks will act on.
    pub fn is_armed(&self) -> bool {
        if self.phase == Phase::Dissolution {
            return false;
        }
        if let Some(duty) = &self.init {
            if !duty.closed {
                return true;
            }
        }
        match &self.flow {
            Flow::Idle => false,
            Flow::Split(f) => f.armed(),
            Flow::Tree(f) => f.armed(),
            Flow::Gossip(f) => f.armed(),
            Flow::Swarm(f) => f.armed(),
        }
    }

    /// Parameters of every segment or the full model, in layer order.
    pub fn parameters(&self) -> Vec<f64> {
        if let Some(m) = &self.model {
            return m.flatten_parameters();
        }
        self.segments.iter().flat_map(|s| s.flatten_parameters()).collect()
    }

    pub fn fingerprint(&self) -> u64 {
        super::training::fingerprint_values(&self.parameters())
    }

    fn can(&self, role: Role) -> bool {
        self.agent_type.has(role)
    }
}

/// Advances one agent by one event.
pub fn step_agent(
    mut state: AgentState,
    event: &Event,
    ctx: &StepContext<'_>,
) -> Result<(AgentState, StepOutput), ProtocolError> {
    let mut out = Out {
        id: state.id,
        agent_type: state.agent_type,
        tick: event.tick,
        out: StepOutput::default(),
    };
    match &event.kind {
        EventKind::StartPhase(Phase::Initialization) => start_initialization(&mut state, ctx, &mut out)?,
        EventKind::StartPhase(Phase::Dissolution) => {
            if state.phase != Phase::Dissolution {
                state.phase = Phase::Dissolution;
                state.flow = Flow::Idle;
                state.active_roles.clear();
                out.out.phase_entered = Some(Phase::Dissolution);
            }
        }
        EventKind::StartPhase(Phase::Operation) => {
            return Err(ProtocolError::IllegalEvent {
                agent: state.id,
                detail: "operation starts when the task and assignment arrive".into(),
            })
        }
        EventKind::Deliver(msg) => on_deliver(&mut state, msg, ctx, &mut out)?,
        EventKind::Tick => on_tick(&mut state, ctx, &mut out)?,
    }
    let quiet = out.out.is_quiet();
    if event.kind == EventKind::Tick && quiet && state.last_active_tick != Some(event.tick) {
        state.idle_ticks += 1;
    } else if !quiet {
        state.last_active_tick = Some(event.tick);
    }
    Ok((state, out.out))
}

fn start_initialization(st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
    if st.started {
        return Ok(());
    }
    st.started = true;
    st.phase = Phase::Initialization;
    out.out.phase_entered = Some(Phase::Initialization);
    if st.can(Role::Configurator) && (st.model.is_some() || !st.segments.is_empty()) {
        out.perform(Activity::DefineInitialMLModel)?;
    }
    if st.is_configurator() {
        out.perform(Activity::DefineInterimResult)?;
        out.perform(Activity::RegisterCoalition)?;
        out.perform(Activity::AwaitApplications)?;
        out.out.registered = true;
        st.admitted = true;
        st.active_roles = st.agent_type.roles();
        st.init = Some(InitDuty {
            deadline: ctx.tick + st.config.init_window,
            admitted: [(st.id, st.agent_type)].into_iter().collect(),
            closed: false,
        });
        return Ok(());
    }
    match apply_for_coalition(st.id, st.agent_type.roles(), st.data_len(), ctx.registry, ctx.options, ctx.tick) {
        Ok(msg) => out.send(msg.recipients, 0, msg.payload),
        Err(ProtocolError::RejectedAtSource { .. }) => {
            out.note("application rejected at source");
            Ok(())
        }
        Err(e) => Err(e),
    }
}

fn on_tick(st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
    let close = matches!(&st.init, Some(d) if !d.closed && ctx.tick >= d.deadline);
    if close {
        close_initialization(st, ctx, out)?;
    }
    if st.phase == Phase::Operation {
        with_flow(st, |flow, st| match flow {
            Flow::Idle => Ok(()),
            Flow::Split(f) => f.on_tick(st, ctx, out),
            Flow::Tree(f) => f.on_tick(st, ctx, out),
            Flow::Gossip(f) => f.on_tick(st, ctx, out),
            Flow::Swarm(f) => f.on_tick(st, ctx, out),
        })?;
    }
    Ok(())
}

fn with_flow<T>(
    st: &mut AgentState,
    f: impl FnOnce(&mut Flow, &mut AgentState) -> Result<T, ProtocolError>,
) -> Result<T, ProtocolError> {
    let mut flow = std::mem::take(&mut st.flow);
    let r = f(&mut flow, st);
    st.flow = flow;
    r
}

fn close_initialization(st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
    let duty = st.init.as_mut().expect("checked by caller");
    duty.closed = true;
    let members = duty.admitted.clone();
    if let Err(ProtocolError::Viability(reason)) = check_viability(&members) {
        out.out.abort = Some(Abort::Viability(reason));
        return Ok(());
    }
    let setup = st.config.setup.clone().expect("configurator holds the setup");
    let task = build_task(st, &setup, ctx.options)?;
    let others: Vec<AgentId> = members.keys().copied().filter(|&id| id != st.id).collect();
    out.send(others, 0, Payload::Task(task.clone()))?;
    st.task = Some(task);
    out.out.coalition_initialized = true;
    let primary = members
        .iter()
        .find(|(_, t)| t.has(Role::Coordinator))
        .map(|(&id, _)| id);
    if primary == Some(st.id) {
        send_assignments(st, &members, ctx, out)?;
    }
    maybe_enter_operation(st, ctx, out)
}

fn build_task(st: &AgentState, setup: &CoalitionSetup, options: &DesignOptions) -> Result<MLTask, ProtocolError> {
    let (shape, model) = match st.config.schedule {
        Schedule::Split => {
            let cut = *setup
                .cut_points
                .first()
                .ok_or_else(|| ProtocolError::Config("split schedule needs a cut point".into()))?;
            (
                ShapeContract::PerSample {
                    width: setup.spec.layer_widths[cut],
                },
                None,
            )
        }
        _ => {
            let model = st
                .model
                .as_ref()
                .ok_or_else(|| ProtocolError::Config("configurator has no initial model".into()))?;
            let lo = trained_from(&st.config, options);
            let hi = setup.spec.layer_count();
            (
                ShapeContract::Flat {
                    len: setup.spec.parameter_count(lo, hi),
                    lo,
                    hi,
                },
                Some(ModelDefinition {
                    spec: setup.spec.clone(),
                    initial_parameters: model.flatten_parameters(),
                }),
            )
        }
    };
    let interim = InterimResultDefinition {
        kind: options.transmit_interim_result,
        shape,
        value_range: "finite reals".into(),
    };
    build_ml_task(
        &setup.purpose,
        model,
        interim,
        setup.hyperparameters.clone(),
        options.provide_ml_task,
        setup.model_must_stay_local,
    )
}

/// First layer that local training touches and transmits.
pub(crate) fn trained_from(config: &AgentConfig, options: &DesignOptions) -> usize {
    match options.train_ml_model {
        super::options::TrainMode::Part if config.schedule != Schedule::Split => {
            config.cut_points.first().copied().unwrap_or(0)
        }
        _ => 0,
    }
}

fn send_assignments(
    st: &mut AgentState,
    members: &BTreeMap<AgentId, AgentType>,
    ctx: &StepContext<'_>,
    out: &mut Out,
) -> Result<(), ProtocolError> {
    let plan = plan_assignments(st.id, st.config.schedule, members, ctx.graph)?;
    for (id, assignment) in plan {
        if id == st.id {
            st.assigned_recipient = assignment.recipients.first().copied().filter(|_| assignment.mode == AssignmentMode::Fixed);
            st.assignment = Some(assignment);
        } else {
            out.send(vec![id], 0, Payload::Assignment(assignment))?;
        }
    }
    Ok(())
}

fn plan_assignments(
    primary: AgentId,
    schedule: Schedule,
    members: &BTreeMap<AgentId, AgentType>,
    graph: &AcquaintanceGraph,
) -> Result<BTreeMap<AgentId, Assignment>, ProtocolError> {
    let mut plan = BTreeMap::new();
    let dedicated_selector = !members[&primary].has(Role::Trainer);
    match schedule {
        Schedule::Split | Schedule::Tree => {
            let map = assign_recipients(members, graph, primary)?;
            for &id in members.keys() {
                let children: Vec<AgentId> = map.iter().filter(|(_, &p)| p == id).map(|(&c, _)| c).collect();
                plan.insert(
                    id,
                    Assignment {
                        mode: AssignmentMode::Fixed,
                        recipients: map.get(&id).copied().into_iter().collect(),
                        children,
                    },
                );
            }
        }
        Schedule::Gossip if dedicated_selector => {
            for (&id, t) in members {
                if id == primary {
                    let trainers = members.iter().filter(|(_, t)| t.has(Role::Trainer)).map(|(&c, _)| c).collect();
                    plan.insert(
                        id,
                        Assignment {
                            mode: AssignmentMode::PerRoundSelection,
                            recipients: Vec::new(),
                            children: trainers,
                        },
                    );
                } else if t.has(Role::Trainer) {
                    if !graph.permits(id, primary, Phase::Operation) {
                        return Err(ProtocolError::Topology {
                            agent: id,
                            detail: "cannot reach the selecting coordinator".into(),
                        });
                    }
                    plan.insert(
                        id,
                        Assignment {
                            mode: AssignmentMode::Fixed,
                            recipients: vec![primary],
                            children: Vec::new(),
                        },
                    );
                }
            }
        }
        Schedule::Gossip | Schedule::Swarm => {
            for &id in members.keys() {
                let peers = graph
                    .neighbours(id, Phase::Operation)
                    .into_iter()
                    .filter(|p| members.get(p).is_some_and(|t| t.has(Role::Trainer) || t.has(Role::Updater)))
                    .collect();
                plan.insert(
                    id,
                    Assignment {
                        mode: AssignmentMode::PerRoundSelection,
                        recipients: peers,
                        children: Vec::new(),
                    },
                );
            }
        }
    }
    Ok(plan)
}

fn on_deliver(st: &mut AgentState, msg: &Message, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
    msg.validate()?;
    if st.phase == Phase::Dissolution {
        out.note(format!("ignored {} after dissolution", msg.protocol));
        return Ok(());
    }
    match &msg.payload {
        Payload::Application { requested_roles, .. } => on_application(st, msg.sender, requested_roles, ctx, out),
        Payload::Verdict(v) => {
            match v {
                Verdict::Accept { agent_type } => {
                    st.admitted = true;
                    st.agent_type = *agent_type;
                }
                Verdict::Reject { reason } => out.note(format!("application rejected: {reason:?}")),
            }
            Ok(())
        }
        Payload::Task(task) => {
            if st.task.is_none() {
                install_task(st, task)?;
                let primary = ctx.registry.coordinator();
                if primary == Some(st.id) && !st.is_configurator() && st.phase == Phase::Initialization {
                    let members = ctx.registry.members.clone();
                    send_assignments(st, &members, ctx, out)?;
                }
            }
            maybe_enter_operation(st, ctx, out)
        }
        Payload::Assignment(a) => {
            if st.phase == Phase::Operation {
                return with_flow(st, |flow, st| match flow {
                    Flow::Gossip(f) => f.on_message(st, msg, ctx, out),
                    _ => Err(ProtocolError::IllegalEvent {
                        agent: st.id,
                        detail: "assignment during operation".into(),
                    }),
                });
            }
            st.assigned_recipient = a.recipients.first().copied().filter(|_| a.mode == AssignmentMode::Fixed);
            st.assignment = Some(a.clone());
            maybe_enter_operation(st, ctx, out)
        }
        Payload::Readiness { .. } | Payload::Selection(_) | Payload::Interim(_) => {
            if st.phase != Phase::Operation {
                return Err(ProtocolError::IllegalEvent {
                    agent: st.id,
                    detail: format!("{} before operation", msg.protocol),
                });
            }
            with_flow(st, |flow, st| match flow {
                Flow::Idle => Ok(()),
                Flow::Split(f) => f.on_message(st, msg, ctx, out),
                Flow::Tree(f) => f.on_message(st, msg, ctx, out),
                Flow::Gossip(f) => f.on_message(st, msg, ctx, out),
                Flow::Swarm(f) => f.on_message(st, msg, ctx, out),
            })
        }
    }
}

fn install_task(st: &mut AgentState, task: &MLTask) -> Result<(), ProtocolError> {
    if let Some(def) = &task.model_definition {
        let mut model = Model::init(&def.spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        model.load_parameters(&def.initial_parameters)?;
        st.model = Some(model);
    }
    st.task = Some(task.clone());
    Ok(())
}

fn on_application(
    st: &mut AgentState,
    applicant: AgentId,
    requested: &BTreeSet<Role>,
    ctx: &StepContext<'_>,
    out: &mut Out,
) -> Result<(), ProtocolError> {
    if let Some(duty) = st.init.as_mut().filter(|d| !d.closed) {
        out.perform(Activity::DecideOnApplication)?;
        let verdict = decide_on_application(applicant, requested, &duty.admitted);
        if let Verdict::Accept { agent_type } = verdict {
            duty.admitted.insert(applicant, agent_type);
        }
        return out.send(vec![applicant], 0, Payload::Verdict(verdict));
    }
    let coordinating = st.phase == Phase::Operation && st.can(Role::Coordinator);
    if !coordinating || ctx.options.await_applications == AwaitApplications::InitOnly {
        if st.can(Role::Configurator) || st.can(Role::Coordinator) {
            out.perform(Activity::DecideOnApplication)?;
            return out.send(
                vec![applicant],
                0,
                Payload::Verdict(Verdict::Reject {
                    reason: RejectReason::ApplicationsClosed,
                }),
            );
        }
        return Err(ProtocolError::RoleViolation {
            agent: st.id,
            agent_type: st.agent_type,
            action: "DecideOnApplication".into(),
        });
    }
    out.perform(Activity::DecideOnApplication)?;
    let verdict = decide_on_application(applicant, requested, &ctx.registry.members);
    out.send(vec![applicant], 0, Payload::Verdict(verdict.clone()))?;
    let Verdict::Accept { agent_type } = verdict else {
        return Ok(());
    };
    let Some(mut task) = st.task.clone() else {
        return Err(ProtocolError::IllegalEvent {
            agent: st.id,
            detail: "coordinator admitted an agent without holding the task".into(),
        });
    };
    if ctx.options.provide_ml_task == ProvideTask::ModelAndInterim {
        if let (Some(def), Some(m)) = (task.model_definition.as_mut(), st.model.as_ref()) {
            def.initial_parameters = m.flatten_parameters();
        }
    }
    out.send(vec![applicant], 0, Payload::Task(task))?;
    let mut members = ctx.registry.members.clone();
    members.insert(applicant, agent_type);
    let plan = plan_assignments(st.id, st.config.schedule, &members, ctx.graph)?;
    if let Some(a) = plan.get(&applicant) {
        out.send(vec![applicant], 0, Payload::Assignment(a.clone()))?;
    }
    with_flow(st, |flow, st| {
        match flow {
            Flow::Tree(f) => f.add_child(st, applicant, &plan),
            Flow::Split(f) => f.add_child(applicant, &plan, st.id),
            _ => {}
        }
        Ok(())
    })
}

fn maybe_enter_operation(st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
    if st.phase != Phase::Initialization || st.task.is_none() {
        return Ok(());
    }
    let primary = ctx.registry.coordinator() == Some(st.id) || st.is_configurator() && st.assignment.is_some();
    if st.assignment.is_none() && !primary {
        return Ok(());
    }
    st.phase = Phase::Operation;
    st.active_roles = st.agent_type.roles();
    out.out.phase_entered = Some(Phase::Operation);
    if st.can(Role::Coordinator) && ctx.options.await_applications == AwaitApplications::Always {
        out.perform(Activity::AwaitApplications)?;
    }
    if let Some(m) = &st.model {
        let fp = fingerprint(m);
        out.model_changed(0, fp);
    }
    let mut flow = match st.config.schedule {
        Schedule::Split => Flow::Split(Box::new(SplitFlow::new(st))),
        Schedule::Tree => Flow::Tree(Box::new(TreeFlow::new(st))),
        Schedule::Gossip => Flow::Gossip(Box::new(GossipFlow::new(st))),
        Schedule::Swarm => Flow::Swarm(Box::new(SwarmFlow::new(st))),
    };
    let r = match &mut flow {
        Flow::Idle => Ok(()),
        Flow::Split(f) => f.start(st, ctx, out),
        Flow::Tree(f) => f.start(st, ctx, out),
        Flow::Gossip(f) => f.start(st, ctx, out),
        Flow::Swarm(f) => f.start(st, ctx, out),
    };
    st.flow = flow;
    r
}
