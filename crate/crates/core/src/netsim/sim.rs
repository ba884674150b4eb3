use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::trace::{DropReason, Trace, TraceRecord};
use super::{AcquaintanceGraph, CrashAt, FaultSpec, NetError};
use crate::ml_core::{reassemble, Dataset, ModelSegment};
use crate::protocol::{
    companion_features, evaluate, operation_viable, step_agent, Abort, AgentState, DesignOptions, Event, EventKind, Message, Payload,
    Phase, Registry, Role, Schedule, StepContext, StepOutput, Verdict,
};
use crate::AgentId;

/// Stream id for drop decisions, disjoint from data and agent streams.
pub const FAULT_STREAM: u64 = 7 << 40;

const TICK_CAP: u64 = 1_000_000;

/// Whose completed-round count is the global round count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Authority {
    Agent(AgentId),
    /// Minimum over live trainers.
    MinLiveTrainer,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_ticks: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_rounds: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_below: Option<f64>,
    #[serde(default)]
    pub quiescent: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Converged,
    TickLimit,
    Quiescent,
    AbortedViability,
    AbortedDeadlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub rounds: u64,
    pub ticks: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
struct Envelope {
    id: u64,
    recipient: AgentId,
    message: Message,
}

#[derive(Debug, Clone, PartialEq)]
struct FaultState {
    spec: FaultSpec,
    rng: ChaCha8Rng,
    applied: bool,
}

/// Single-threaded event loop over agent state machines.
#[derive(Debug, Clone, PartialEq)]
pub struct Sim {
    pub tick: u64,
    pub agents: Vec<AgentState>,
    pub graph: AcquaintanceGraph,
    pub options: DesignOptions,
    pub registry: Registry,
    pub trace: Trace,
    pub crashed: BTreeSet<AgentId>,
    pub authority: Authority,
    queue: BTreeMap<(u64, u64), Envelope>,
    next_seq: u64,
    faults: Vec<FaultState>,
    joins: BTreeMap<AgentId, u64>,
    heldout: Option<Dataset>,
    rounds: u64,
    last_losses: Vec<f64>,
    outcome: Option<RunOutcome>,
    round_cap: Option<u64>,
}

impl Sim {
    /// `agents[i]` must have id `i`.
    pub fn new(
        agents: Vec<AgentState>,
        graph: AcquaintanceGraph,
        options: DesignOptions,
        authority: Authority,
    ) -> Result<Self, NetError> {
        for (i, a) in agents.iter().enumerate() {
            if a.id as usize != i {
                return Err(NetError::Roster(format!("agent at index {i} has id {}", a.id)));
            }
            if !graph.nodes.contains(&a.id) {
                return Err(NetError::UnknownAgent(a.id));
            }
        }
        let joins = agents.iter().map(|a| (a.id, 0)).collect();
        Ok(Self {
            tick: 0,
            agents,
            graph,
            options,
            registry: Registry::default(),
            trace: Trace::default(),
            crashed: BTreeSet::new(),
            authority,
            queue: BTreeMap::new(),
            next_seq: 0,
            faults: Vec::new(),
            joins,
            heldout: None,
            rounds: 0,
            last_losses: Vec::new(),
            outcome: None,
            round_cap: None,
        })
    }

    pub fn with_heldout(mut self, data: Dataset) -> Self {
        self.heldout = Some(data);
        self
    }

    /// Delays the agent's initialization start to `tick`.
    pub fn set_join_tick(&mut self, agent: AgentId, tick: u64) -> Result<(), NetError> {
        let slot = self.joins.get_mut(&agent).ok_or(NetError::UnknownAgent(agent))?;
        *slot = tick;
        Ok(())
    }

    pub fn inject_fault(&mut self, spec: FaultSpec) -> Result<(), NetError> {
        spec.validate()?;
        if let FaultSpec::CrashAgent { agent, .. } = spec {
            if agent as usize >= self.agents.len() {
                return Err(NetError::UnknownAgent(agent));
            }
        }
        let seed = match spec {
            FaultSpec::DropMessages { seed, .. } => seed,
            _ => 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(FAULT_STREAM + self.faults.len() as u64);
        self.faults.push(FaultState {
            spec,
            rng,
            applied: false,
        });
        Ok(())
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    pub fn outcome(&self) -> Option<&RunOutcome> {
        self.outcome.as_ref()
    }

    pub fn is_live(&self, id: AgentId) -> bool {
        !self.crashed.contains(&id)
    }

    /// Queues one delivery per recipient after checking the sender may reach it.
    pub fn schedule(&mut self, message: Message, phases: &[Phase]) -> Result<(), NetError> {
        message.validate()?;
        for &to in &message.recipients {
            let latency = phases
                .iter()
                .find_map(|&p| self.graph.route(message.sender, to, p))
                .ok_or(NetError::RoutingViolation {
                    from: message.sender,
                    to,
                    phase: phases.first().copied().unwrap_or(Phase::Operation),
                    protocol: message.protocol,
                })?;
            let id = self.next_seq;
            self.next_seq += 1;
            let deliver_at = self.tick + latency.max(1);
            self.trace.push(TraceRecord::Sent {
                tick: self.tick,
                id,
                protocol: message.protocol,
                from: message.sender,
                to,
                round: message.round,
                deliver_at,
                elements: message.payload.element_count(),
                payload: message.payload.clone(),
            });
            self.queue.insert(
                (deliver_at, id),
                Envelope {
                    id,
                    recipient: to,
                    message: message.clone(),
                },
            );
        }
        Ok(())
    }

    fn authority_rounds(&self) -> u64 {
        match self.authority {
            Authority::Agent(id) => self.agents[id as usize].rounds_completed,
            Authority::MinLiveTrainer => self
                .agents
                .iter()
                .filter(|a| self.is_live(a.id) && a.admitted && a.agent_type.has(Role::Trainer) && a.phase != Phase::Initialization)
                .map(|a| a.rounds_completed)
                .min()
                .unwrap_or(0),
        }
    }

    fn any_armed(&self) -> bool {
        self.agents.iter().any(|a| self.is_live(a.id) && a.is_armed())
    }

    fn stop_reason(&self, stop: &StopRule) -> Option<RunStatus> {
        if stop.max_rounds.is_some_and(|r| self.rounds >= r) {
            return Some(RunStatus::Completed);
        }
        if let Some(threshold) = stop.loss_below {
            if !self.last_losses.is_empty() {
                let mean = self.last_losses.iter().sum::<f64>() / self.last_losses.len() as f64;
                if mean < threshold {
                    return Some(RunStatus::Converged);
                }
            }
        }
        if self.tick >= stop.max_ticks.unwrap_or(TICK_CAP).min(TICK_CAP) {
            return Some(RunStatus::TickLimit);
        }
        None
    }

    /// Runs until the stop rule, an abort, or a stall; then dissolves the coalition.
    pub fn run_until(&mut self, stop: &StopRule) -> Result<RunOutcome, NetError> {
        if let Some(done) = &self.outcome {
            return Ok(done.clone());
        }
        self.round_cap = stop.max_rounds;
        let (status, reason) = loop {
            self.apply_crashes();
            if self.tick == 0 {
                self.start_joiners()?;
            }
            if let Some(s) = self.stop_reason(stop) {
                break (s, None);
            }
            if self.tick > 0 {
                self.start_joiners()?;
            }
            if let Some(abort) = self.process_tick(stop.max_rounds)? {
                break abort;
            }
            if let Some(reason) = self.viability_failure() {
                break (RunStatus::AbortedViability, Some(reason));
            }
            let pending_joins = self.joins.values().any(|&t| t > self.tick);
            if self.queue.is_empty() && !self.any_armed() && !pending_joins {
                self.tick += 1;
                if stop.quiescent {
                    break (RunStatus::Quiescent, None);
                }
                break (RunStatus::AbortedDeadlock, Some("no pending events and no waiting agent".into()));
            }
            self.tick += 1;
        };
        let (status, reason) = match (status, stop.max_rounds) {
            (RunStatus::Completed, Some(target)) => match self.drain(target, stop)? {
                Some(abort) => abort,
                None => (status, reason),
            },
            _ => (status, reason),
        };
        self.dissolve()?;
        let outcome = RunOutcome {
            status,
            rounds: self.rounds,
            ticks: self.tick,
            reason,
        };
        self.outcome = Some(outcome.clone());
        Ok(outcome)
    }

    fn apply_crashes(&mut self) {
        for f in &mut self.faults {
            if f.applied {
                continue;
            }
            match f.spec {
                FaultSpec::CrashAgent { agent, at } => {
                    let due = match at {
                        CrashAt::Tick(t) => self.tick >= t,
                        CrashAt::Round(r) => self.rounds >= r,
                    };
                    if due {
                        f.applied = true;
                        self.crashed.insert(agent);
                        self.trace.push(TraceRecord::Fault {
                            tick: self.tick,
                            fault: f.spec.clone(),
                        });
                    }
                }
                _ if f.spec.active_at(self.tick) => {
                    f.applied = true;
                    self.trace.push(TraceRecord::Fault {
                        tick: self.tick,
                        fault: f.spec.clone(),
                    });
                }
                _ => {}
            }
        }
    }

    fn start_joiners(&mut self) -> Result<(), NetError> {
        let due: Vec<AgentId> = self
            .joins
            .iter()
            .filter(|(&id, &t)| t == self.tick && self.is_live(id) && !self.agents[id as usize].started())
            .map(|(&id, _)| id)
            .collect();
        for id in due {
            self.step(id, EventKind::StartPhase(Phase::Initialization))?;
        }
        Ok(())
    }

    /// Stops mid-tick once `target` rounds are done, so nobody starts the next round.
    fn process_tick(&mut self, target: Option<u64>) -> Result<Option<(RunStatus, Option<String>)>, NetError> {
        let reached = |sim: &Self| target.is_some_and(|r| sim.rounds >= r);
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 != self.tick {
                break;
            }
            let env = entry.remove();
            if let Some(reason) = self.drop_reason(&env) {
                self.trace.push(TraceRecord::Dropped {
                    tick: self.tick,
                    id: env.id,
                    reason,
                });
                continue;
            }
            self.trace.push(TraceRecord::Delivered {
                tick: self.tick,
                id: env.id,
            });
            if let Payload::Verdict(Verdict::Accept { agent_type }) = env.message.payload {
                self.registry.members.insert(env.recipient, agent_type);
            }
            if let Some(abort) = self.step(env.recipient, EventKind::Deliver(env.message))? {
                return Ok(Some(abort));
            }
            if reached(self) {
                return Ok(Some((RunStatus::Completed, None)));
            }
        }
        for id in 0..self.agents.len() as AgentId {
            let a = &self.agents[id as usize];
            if !self.is_live(id) || !a.started() || a.phase == Phase::Dissolution {
                continue;
            }
            if let Some(abort) = self.step(id, EventKind::Tick)? {
                return Ok(Some(abort));
            }
            if reached(self) {
                return Ok(Some((RunStatus::Completed, None)));
            }
        }
        Ok(None)
    }

    /// Delivers what is still in flight for rounds before `target`, without ticking agents.
    fn drain(&mut self, target: u64, stop: &StopRule) -> Result<Option<(RunStatus, Option<String>)>, NetError> {
        let limit = stop.max_ticks.unwrap_or(TICK_CAP).min(TICK_CAP);
        loop {
            let next = self
                .queue
                .iter()
                .find(|(_, env)| env.message.round < target)
                .map(|(&key, _)| key);
            let Some(key) = next else {
                return Ok(None);
            };
            if key.0 >= limit {
                return Ok(None);
            }
            self.tick = self.tick.max(key.0);
            let env = self.queue.remove(&key).expect("key just found");
            if let Some(reason) = self.drop_reason(&env) {
                self.trace.push(TraceRecord::Dropped {
                    tick: self.tick,
                    id: env.id,
                    reason,
                });
                continue;
            }
            self.trace.push(TraceRecord::Delivered {
                tick: self.tick,
                id: env.id,
            });
            if let Some(abort) = self.step(env.recipient, EventKind::Deliver(env.message))? {
                return Ok(Some(abort));
            }
        }
    }

    fn drop_reason(&mut self, env: &Envelope) -> Option<DropReason> {
        if self.crashed.contains(&env.recipient) {
            return Some(DropReason::RecipientCrashed);
        }
        let tick = self.tick;
        let (a, b) = (env.message.sender, env.recipient);
        for f in &mut self.faults {
            if !f.spec.active_at(tick) {
                continue;
            }
            match &f.spec {
                FaultSpec::Partition { edges, .. } => {
                    if edges.iter().any(|&(x, y)| (x, y) == (a, b) || (y, x) == (a, b)) {
                        return Some(DropReason::Partition);
                    }
                }
                FaultSpec::DropMessages { probability, .. } => {
                    let p = *probability;
                    if p > 0.0 && (p >= 1.0 || f.rng.random_bool(p)) {
                        return Some(DropReason::Fault);
                    }
                }
                FaultSpec::CrashAgent { .. } => {}
            }
        }
        None
    }

    fn viability_failure(&self) -> Option<String> {
        match self.registry.phase {
            Some(Phase::Initialization) => {
                let c = self.registry.configurator?;
                self.crashed
                    .contains(&c)
                    .then(|| format!("configurator {c} crashed during initialization"))
            }
            Some(Phase::Operation) => {
                let live: Vec<_> = self
                    .registry
                    .members
                    .iter()
                    .filter(|(id, _)| self.is_live(**id))
                    .map(|(_, t)| *t)
                    .collect();
                (!operation_viable(&live)).then(|| "live agents no longer cover selector, trainer and updater".into())
            }
            _ => None,
        }
    }

    fn step(&mut self, id: AgentId, kind: EventKind) -> Result<Option<(RunStatus, Option<String>)>, NetError> {
        let event = Event { tick: self.tick, kind };
        let state = self.agents[id as usize].clone();
        let before = state.phase;
        let (state, out) = {
            let ctx = StepContext {
                tick: self.tick,
                options: &self.options,
                registry: &self.registry,
                graph: &self.graph,
            };
            step_agent(state, &event, &ctx)?
        };
        let after = state.phase;
        self.agents[id as usize] = state;
        self.record(id, before, after, out)
    }

    fn record(
        &mut self,
        id: AgentId,
        before: Phase,
        after: Phase,
        out: StepOutput,
    ) -> Result<Option<(RunStatus, Option<String>)>, NetError> {
        let tick = self.tick;
        if out.registered {
            self.registry.configurator = Some(id);
            self.registry.phase = Some(Phase::Initialization);
            self.registry.members.insert(id, self.agents[id as usize].agent_type);
        }
        for activity in out.activities {
            self.trace.push(TraceRecord::Activity { tick, agent: id, activity });
        }
        for text in out.notes {
            self.trace.push(TraceRecord::Note { tick, agent: id, text });
        }
        for (round, value) in out.train_losses {
            self.trace.push(TraceRecord::Metric {
                tick,
                agent: id,
                round,
                name: "train_loss".into(),
                value,
            });
        }
        for (round, fingerprint) in out.model_updates {
            self.trace.push(TraceRecord::ModelUpdated {
                tick,
                agent: id,
                round,
                fingerprint,
            });
        }
        let phases = if before == after { vec![before] } else { vec![before, after] };
        for msg in out.messages {
            self.schedule(msg, &phases)?;
        }
        if out.coalition_initialized {
            self.registry.phase = Some(Phase::Operation);
        }
        if let Some(phase) = out.phase_entered {
            self.trace.push(TraceRecord::Phase { tick, agent: id, phase });
        }
        for round in &out.guard_trips {
            self.trace.push(TraceRecord::DeadlockGuard {
                tick,
                agent: id,
                round: *round,
            });
        }
        let rounds = self.authority_rounds();
        while self.rounds < rounds && self.round_cap.is_none_or(|c| self.rounds < c) {
            self.rounds += 1;
            self.trace.push(TraceRecord::RoundCompleted { tick, round: self.rounds });
            self.evaluate_round();
        }
        Ok(out.abort.map(|a| match a {
            Abort::Viability(r) => (RunStatus::AbortedViability, Some(r)),
            Abort::Deadlock(r) => (RunStatus::AbortedDeadlock, Some(r)),
        }))
    }

    /// Held-out loss of every live model holder, or of the whole split model per trainer.
    fn evaluate_round(&mut self) {
        let Some(heldout) = &self.heldout else {
            return;
        };
        let mut losses = Vec::new();
        for a in &self.agents {
            if !self.is_live(a.id) || !a.admitted || !(a.agent_type.has(Role::Trainer) || a.model.is_some()) {
                continue;
            }
            let loss = if let (Some(m), Some(c)) = (&a.model, &a.companion) {
                companion_features(c, heldout).and_then(|lifted| evaluate(m, &lifted)).ok()
            } else if let Some(m) = &a.model {
                evaluate(m, heldout).ok()
            } else if a.config.schedule == Schedule::Split {
                self.split_model_of(a).and_then(|m| evaluate(&m, heldout).ok())
            } else {
                None
            };
            if let Some(value) = loss {
                losses.push(value);
                self.trace.push(TraceRecord::Metric {
                    tick: self.tick,
                    agent: a.id,
                    round: self.rounds,
                    name: "heldout_loss".into(),
                    value,
                });
            }
        }
        self.last_losses = losses;
    }

    fn split_model_of(&self, trainer: &AgentState) -> Option<crate::ml_core::Model> {
        let hub = trainer.assigned_recipient?;
        let mut parts: Vec<ModelSegment> = trainer.segments.clone();
        parts.extend(self.agents[hub as usize].segments.iter().cloned());
        parts.sort_by_key(|s| s.lo);
        reassemble(&parts).ok()
    }

    fn dissolve(&mut self) -> Result<(), NetError> {
        if self.registry.phase.is_some() {
            self.registry.phase = Some(Phase::Dissolution);
        }
        for id in 0..self.agents.len() as AgentId {
            let a = &self.agents[id as usize];
            if self.is_live(id) && a.started() && a.phase != Phase::Dissolution {
                self.step(id, EventKind::StartPhase(Phase::Dissolution))?;
            }
        }
        let tick = self.tick;
        for (_, env) in std::mem::take(&mut self.queue) {
            self.trace.push(TraceRecord::Dropped {
                tick,
                id: env.id,
                reason: DropReason::Dissolution,
            });
        }
        Ok(())
    }
}
