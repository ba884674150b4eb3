//! Hub-and-children rounds: the hub selects ready children, sends its model down,
//! waits for results and folds them in. Inner hubs report their aggregate upward.

use std::collections::{BTreeMap, BTreeSet};

use super::agent::{AgentState, Out, StepContext};
use super::message::{Assignment, Message, Payload, Selection};
use super::options::AwaitInterim;
use super::roles::{Activity, Role};
use super::selection::select_agents;
use super::work::{adopt, apply_results, check_contract, own_parameters, produce_result};
use super::ProtocolError;
use crate::interim::{aggregate_weighted, InterimKind, InterimResult};
use crate::AgentId;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
enum Stage {
    #[default]
    Idle,
    Readiness,
    Results,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Hub {
    stage: Stage,
    ready: BTreeMap<AgentId, u64>,
    selected: BTreeSet<AgentId>,
    received: Vec<InterimResult>,
    since: u64,
    /// Exchanges completed with the children; the message round on child links.
    exchange: u64,
    sub_round: u64,
    /// Round of the parent exchange being served.
    up_round: u64,
    acc_weight: u64,
    sync_weight: u64,
    forwarded: Option<InterimResult>,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Leaf {
    selected_for: Option<u64>,
    params: Option<InterimResult>,
    done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeFlow {
    parent: Option<AgentId>,
    children: Vec<AgentId>,
    hub: Hub,
    leaf: Leaf,
}

impl TreeFlow {
    pub(crate) fn new(st: &AgentState) -> Self {
        Self {
            parent: st.assigned_recipient,
            children: st.assignment.as_ref().map(|a| a.children.clone()).unwrap_or_default(),
            hub: Hub::default(),
            leaf: Leaf::default(),
        }
    }

    pub(crate) fn armed(&self) -> bool {
        self.hub.stage != Stage::Idle
    }

    pub(crate) fn add_child(&mut self, st: &AgentState, child: AgentId, plan: &BTreeMap<AgentId, Assignment>) {
        if plan.get(&child).is_some_and(|a| a.recipients.contains(&st.id)) && !self.children.contains(&child) {
            self.children.push(child);
            self.children.sort_unstable();
        }
    }

    pub(crate) fn start(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        if self.parent.is_some() {
            self.signal_ready(st, 0, out)?;
        } else if !self.children.is_empty() {
            self.begin_exchange(ctx, out)?;
        }
        Ok(())
    }

    fn signal_ready(&mut self, st: &AgentState, round: u64, out: &mut Out) -> Result<(), ProtocolError> {
        let parent = self.parent.expect("leaf has a parent");
        let size = if self.children.is_empty() { st.data_len() } else { self.hub.sync_weight.max(1) };
        out.send(
            vec![parent],
            round,
            Payload::Readiness {
                dataset_size: size,
                attempt: 0,
                sample_ids: None,
            },
        )?;
        out.perform(Activity::AwaitSelectionSignal)
    }

    fn begin_exchange(&mut self, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        out.perform(Activity::AwaitReadinessSignal)?;
        self.hub.stage = Stage::Readiness;
        self.hub.since = ctx.tick;
        Ok(())
    }

    pub(crate) fn on_tick(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        match self.hub.stage {
            Stage::Readiness => self.try_select(st, ctx, out),
            Stage::Results => self.try_update(st, ctx, out),
            Stage::Idle => Ok(()),
        }
    }

    pub(crate) fn on_message(
        &mut self,
        st: &mut AgentState,
        msg: &Message,
        ctx: &StepContext<'_>,
        out: &mut Out,
    ) -> Result<(), ProtocolError> {
        let from_parent = Some(msg.sender) == self.parent;
        match &msg.payload {
            Payload::Readiness { dataset_size, .. } if self.children.contains(&msg.sender) => {
                self.hub.ready.insert(msg.sender, *dataset_size);
                self.try_select(st, ctx, out)
            }
            Payload::Interim(r) if self.children.contains(&msg.sender) => {
                let fresh = self.hub.stage == Stage::Results
                    && msg.round == self.hub.exchange
                    && self.hub.selected.contains(&msg.sender)
                    && !self.hub.received.iter().any(|x| x.sender == msg.sender);
                if !fresh {
                    out.note(format!("late result from {} discarded", msg.sender));
                    return Ok(());
                }
                check_contract(st, r)?;
                self.hub.received.push(r.clone());
                self.try_update(st, ctx, out)
            }
            Payload::Selection(_) if from_parent => {
                self.leaf.selected_for = Some(msg.round);
                if !st.agent_type.has(Role::Updater) {
                    return self.one_shot(st, ctx, msg.round, out);
                }
                self.try_act(st, ctx, out)
            }
            Payload::Interim(r) if from_parent => {
                self.leaf.params = Some(r.clone());
                self.try_act(st, ctx, out)
            }
            _ => Err(ProtocolError::IllegalEvent {
                agent: st.id,
                detail: format!("unexpected {} from {}", msg.protocol, msg.sender),
            }),
        }
    }

    fn one_shot(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, round: u64, out: &mut Out) -> Result<(), ProtocolError> {
        if self.leaf.done {
            out.note("one-shot trainer already reported");
            return Ok(());
        }
        self.leaf.done = true;
        let result = produce_result(st, ctx.options, round, out)?;
        out.send(vec![self.parent.expect("leaf")], round, Payload::Interim(result))?;
        st.rounds_completed += 1;
        Ok(())
    }

    fn try_act(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        let Some(round) = self.leaf.selected_for else {
            return Ok(());
        };
        let Some(params) = self.leaf.params.take_if(|p| p.round == round) else {
            return Ok(());
        };
        self.leaf.selected_for = None;
        adopt(st, &params, round, out)?;
        if !self.children.is_empty() {
            self.hub.up_round = round;
            self.hub.sync_weight = 0;
            return self.begin_exchange(ctx, out);
        }
        let result = produce_result(st, ctx.options, round, out)?;
        out.send(vec![self.parent.expect("leaf")], round, Payload::Interim(result))?;
        st.rounds_completed += 1;
        self.signal_ready(st, round, out)
    }

    fn try_select(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        if self.hub.stage != Stage::Readiness {
            return Ok(());
        }
        let waited = ctx.tick.saturating_sub(self.hub.since);
        let all_in = self.children.iter().all(|c| self.hub.ready.contains_key(c));
        if self.hub.ready.is_empty() || !(all_in || waited >= st.config.readiness_window) {
            if self.hub.ready.is_empty() && waited >= st.config.guard_ticks {
                out.guard_trip(self.hub.exchange, "readiness");
                self.hub.stage = Stage::Idle;
            }
            return Ok(());
        }
        out.perform(Activity::SelectAgent)?;
        let ready: BTreeSet<AgentId> = self.hub.ready.keys().copied().collect();
        let chosen = select_agents(
            &ready,
            ctx.options.select_agent,
            st.config.selection_count,
            &self.hub.ready,
            &BTreeMap::new(),
            &mut st.rng,
        )?;
        for c in &chosen {
            self.hub.ready.remove(c);
        }
        let round = self.hub.exchange;
        let mut groups: BTreeMap<BTreeSet<Role>, Vec<AgentId>> = BTreeMap::new();
        for &c in &chosen {
            let roles: BTreeSet<Role> = ctx
                .registry
                .members
                .get(&c)
                .map(|t| t.roles())
                .unwrap_or_default()
                .into_iter()
                .filter(|r| matches!(r, Role::Trainer | Role::Updater))
                .collect();
            groups.entry(roles).or_default().push(c);
        }
        let mut receivers = Vec::new();
        for (roles, ids) in groups {
            if roles.contains(&Role::Updater) {
                receivers.extend(ids.iter().copied());
            }
            out.send(
                ids,
                round,
                Payload::Selection(Selection {
                    roles,
                    sample_ids: None,
                    ballot: None,
                    attempt: 0,
                }),
            )?;
        }
        if !receivers.is_empty() {
            receivers.sort_unstable();
            let params = own_parameters(st, ctx.options, 1, round)?;
            out.send(receivers, round, Payload::Interim(params))?;
        }
        self.hub.selected = chosen;
        self.hub.received.clear();
        self.hub.acc_weight = 0;
        self.hub.stage = Stage::Results;
        self.hub.since = ctx.tick;
        out.perform(Activity::AwaitInterimResults)
    }

    fn try_update(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        if self.hub.stage != Stage::Results {
            return Ok(());
        }
        let expected = self.hub.selected.len();
        let got = self.hub.received.len();
        let waited = ctx.tick.saturating_sub(self.hub.since);
        let proceed = match ctx.options.await_interim_results {
            AwaitInterim::ResponseBound(k) => {
                if got >= (k as usize).min(expected) {
                    true
                } else {
                    if waited >= st.config.guard_ticks {
                        out.guard_trip(self.hub.exchange, "interim results");
                        self.hub.stage = Stage::Idle;
                    }
                    false
                }
            }
            AwaitInterim::TimeBound(t) => got == expected || waited >= t,
        };
        if !proceed {
            return Ok(());
        }
        let received = std::mem::take(&mut self.hub.received);
        let round = self.hub.exchange;
        let inner = self.parent.is_some();
        if received.is_empty() {
            out.note(format!("round {round} closed without results"));
        } else if inner && ctx.options.transmit_interim_result == InterimKind::Gradients {
            out.perform(Activity::UpdateMLModel)?;
            let agg = aggregate_weighted(&received, st.id)?;
            self.hub.sync_weight = agg.weight;
            self.hub.forwarded = Some(agg);
        } else {
            let mut acc = self.hub.acc_weight;
            self.hub.sync_weight = apply_results(st, &received, ctx.options.update_ml_model, &mut acc, round, out)?;
            self.hub.acc_weight = acc;
        }
        self.hub.exchange += 1;
        self.hub.stage = Stage::Idle;
        if !inner {
            st.rounds_completed = self.hub.exchange;
            out.round_done(self.hub.exchange);
            return self.begin_exchange(ctx, out);
        }
        self.hub.sub_round += 1;
        let gradients = ctx.options.transmit_interim_result == InterimKind::Gradients;
        if self.hub.sub_round < st.config.local_rounds_per_sync && !gradients {
            return self.begin_exchange(ctx, out);
        }
        self.hub.sub_round = 0;
        let up = self.hub.up_round;
        let report = match self.hub.forwarded.take() {
            Some(mut g) => {
                g.round = up;
                g
            }
            None => own_parameters(st, ctx.options, self.hub.sync_weight, up)?,
        };
        out.send(vec![self.parent.expect("inner")], up, Payload::Interim(report))?;
        st.rounds_completed += 1;
        self.signal_ready(st, up, out)
    }
}
