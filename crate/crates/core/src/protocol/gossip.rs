//! Peer-to-peer push rounds: train, announce readiness, push the model to one ready peer.

use std::collections::{BTreeMap, BTreeSet};

use super::agent::{AgentState, Out, StepContext};
use super::message::{Message, Payload, Selection};
use super::options::AwaitInterim;
use super::roles::{Activity, Role};
use super::selection::select_agents;
use super::work::{apply_results, check_contract, own_parameters, produce_result};
use super::ProtocolError;
use crate::interim::{InterimResult, UpdatePolicy};
use crate::AgentId;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
enum Stage {
    #[default]
    Idle,
    AwaitReady,
    AwaitAssignment,
    Coordinating,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GossipFlow {
    peers: Vec<AgentId>,
    /// Dedicated selecting coordinator, when trainers do not pick peers themselves.
    selector: Option<AgentId>,
    stage: Stage,
    start_at: Option<u64>,
    since: u64,
    /// Latest readiness per peer: `(tick heard, dataset size)`.
    heard: BTreeMap<AgentId, (u64, u64)>,
    /// Pending pairing requests: `(tick heard, dataset size, round)`.
    requests: BTreeMap<AgentId, (u64, u64, u64)>,
    buffer: Vec<InterimResult>,
    buffer_since: u64,
}

impl GossipFlow {
    pub(crate) fn new(st: &AgentState) -> Self {
        let assignment = st.assignment.clone().unwrap_or_else(|| super::message::Assignment {
            mode: super::message::AssignmentMode::PerRoundSelection,
            recipients: Vec::new(),
            children: Vec::new(),
        });
        let coordinating = !st.agent_type.has(Role::Trainer);
        Self {
            peers: if st.assigned_recipient.is_some() { Vec::new() } else { assignment.recipients.clone() },
            selector: st.assigned_recipient,
            stage: if coordinating { Stage::Coordinating } else { Stage::Idle },
            ..Self::default()
        }
    }

    pub(crate) fn armed(&self) -> bool {
        self.stage != Stage::Idle || self.start_at.is_some() || !self.buffer.is_empty()
    }

    pub(crate) fn start(&mut self, _st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        match self.stage {
            Stage::Coordinating => out.perform(Activity::AwaitReadinessSignal),
            _ => {
                self.start_at = Some(ctx.tick);
                Ok(())
            }
        }
    }

    pub(crate) fn on_tick(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        if let AwaitInterim::TimeBound(t) = ctx.options.await_interim_results {
            if !self.buffer.is_empty() && ctx.tick >= self.buffer_since + t {
                self.flush(st, ctx, out)?;
            }
        }
        match self.stage {
            Stage::Coordinating => return self.pair(st, ctx, out),
            Stage::AwaitReady => return self.try_push(st, ctx, out),
            _ => {}
        }
        if self.start_at.is_some_and(|t| ctx.tick >= t) {
            self.start_at = None;
            self.begin_round(st, ctx, out)?;
        }
        Ok(())
    }

    fn begin_round(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        let round = st.rounds_completed;
        produce_result(st, ctx.options, round, out)?;
        let (to, stage) = match self.selector {
            Some(s) => (vec![s], Stage::AwaitAssignment),
            None => (self.peers.clone(), Stage::AwaitReady),
        };
        self.since = ctx.tick;
        self.stage = stage;
        if to.is_empty() {
            return self.finish(st, ctx, out);
        }
        out.send(
            to,
            round,
            Payload::Readiness {
                dataset_size: st.data_len(),
                attempt: 0,
                sample_ids: None,
            },
        )?;
        if stage == Stage::AwaitReady {
            out.perform(Activity::AwaitReadinessSignal)
        } else {
            out.perform(Activity::AwaitSelectionSignal)
        }
    }

    fn try_push(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        let fresh: BTreeMap<AgentId, u64> = self
            .heard
            .iter()
            .filter(|(_, (t, _))| *t >= self.since)
            .map(|(&id, (_, size))| (id, *size))
            .collect();
        let all_in = self.peers.iter().all(|p| fresh.contains_key(p));
        if !(all_in || ctx.tick.saturating_sub(self.since) >= st.config.readiness_window) {
            return Ok(());
        }
        if fresh.is_empty() {
            out.note(format!("round {} closed with no ready peer", st.rounds_completed));
            return self.finish(st, ctx, out);
        }
        out.perform(Activity::SelectAgent)?;
        let pool: BTreeSet<AgentId> = fresh.keys().copied().collect();
        let chosen = select_agents(&pool, ctx.options.select_agent, 1, &fresh, &BTreeMap::new(), &mut st.rng)?;
        let peer = *chosen.first().expect("one peer");
        let round = st.rounds_completed;
        out.send(
            vec![peer],
            round,
            Payload::Selection(Selection {
                roles: [Role::Updater].into_iter().collect(),
                sample_ids: None,
                ballot: None,
                attempt: 0,
            }),
        )?;
        self.push(st, ctx, peer, out)?;
        self.finish(st, ctx, out)
    }

    fn push(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, peer: AgentId, out: &mut Out) -> Result<(), ProtocolError> {
        let round = st.rounds_completed;
        let params = own_parameters(st, ctx.options, st.data_len(), round)?;
        out.send(vec![peer], round, Payload::Interim(params))
    }

    fn finish(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        st.rounds_completed += 1;
        out.round_done(st.rounds_completed);
        self.stage = Stage::Idle;
        self.start_at = Some(ctx.tick + 1);
        Ok(())
    }

    pub(crate) fn on_message(
        &mut self,
        st: &mut AgentState,
        msg: &Message,
        ctx: &StepContext<'_>,
        out: &mut Out,
    ) -> Result<(), ProtocolError> {
        match &msg.payload {
            Payload::Readiness { dataset_size, .. } if self.stage == Stage::Coordinating => {
                self.requests.insert(msg.sender, (ctx.tick, *dataset_size, msg.round));
                Ok(())
            }
            Payload::Readiness { dataset_size, .. } => {
                self.heard.insert(msg.sender, (ctx.tick, *dataset_size));
                if self.stage == Stage::AwaitReady {
                    self.try_push(st, ctx, out)?;
                }
                Ok(())
            }
            Payload::Selection(sel) => {
                if sel.roles.contains(&Role::Updater) {
                    st.active_roles.insert(Role::Updater);
                    out.perform(Activity::AwaitInterimResults)?;
                }
                Ok(())
            }
            Payload::Interim(r) => {
                check_contract(st, r)?;
                match (ctx.options.update_ml_model, ctx.options.await_interim_results) {
                    (UpdatePolicy::Individual, _) => {
                        let mut acc = st.data_len().max(1);
                        apply_results(st, std::slice::from_ref(r), UpdatePolicy::Individual, &mut acc, msg.round, out)?;
                    }
                    (UpdatePolicy::Batched, wait) => {
                        if self.buffer.is_empty() {
                            self.buffer_since = ctx.tick;
                        }
                        self.buffer.push(r.clone());
                        if let AwaitInterim::ResponseBound(k) = wait {
                            if self.buffer.len() as u64 >= k {
                                self.flush(st, ctx, out)?;
                            }
                        }
                    }
                }
                Ok(())
            }
            Payload::Assignment(a) if Some(msg.sender) == self.selector && self.stage == Stage::AwaitAssignment => {
                if let Some(&peer) = a.recipients.first() {
                    self.push(st, ctx, peer, out)?;
                } else {
                    out.note(format!("round {} closed with no ready peer", st.rounds_completed));
                }
                self.finish(st, ctx, out)
            }
            _ => Err(ProtocolError::IllegalEvent {
                agent: st.id,
                detail: format!("unexpected {} from {}", msg.protocol, msg.sender),
            }),
        }
    }

    fn flush(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        let round = st.rounds_completed;
        let mut all = vec![own_parameters(st, ctx.options, st.data_len(), round)?];
        all.append(&mut self.buffer);
        let mut acc = 0;
        apply_results(st, &all, UpdatePolicy::Batched, &mut acc, round, out)?;
        Ok(())
    }

    /// Dedicated selector: pairs every waiting trainer with another ready trainer.
    fn pair(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        if self.requests.is_empty() {
            return Ok(());
        }
        let snapshot: BTreeMap<AgentId, u64> = self.requests.iter().map(|(&id, (_, s, _))| (id, *s)).collect();
        let waiting: Vec<(AgentId, u64, u64)> = self.requests.iter().map(|(&id, (t, _, r))| (id, *t, *r)).collect();
        let mut selected_any = false;
        for (trainer, since, round) in waiting {
            let others: BTreeSet<AgentId> = snapshot.keys().copied().filter(|&id| id != trainer).collect();
            if others.is_empty() {
                if ctx.tick.saturating_sub(since) >= st.config.readiness_window {
                    self.requests.remove(&trainer);
                    out.send(
                        vec![trainer],
                        round,
                        Payload::Assignment(super::message::Assignment {
                            mode: super::message::AssignmentMode::Fixed,
                            recipients: Vec::new(),
                            children: Vec::new(),
                        }),
                    )?;
                }
                continue;
            }
            if !selected_any {
                out.perform(Activity::SelectAgent)?;
                selected_any = true;
            }
            let peer = *select_agents(&others, ctx.options.select_agent, 1, &snapshot, &BTreeMap::new(), &mut st.rng)?
                .first()
                .expect("one peer");
            self.requests.remove(&trainer);
            out.send(
                vec![peer],
                round,
                Payload::Selection(Selection {
                    roles: [Role::Updater].into_iter().collect(),
                    sample_ids: None,
                    ballot: None,
                    attempt: 0,
                }),
            )?;
            out.send(
                vec![trainer],
                round,
                Payload::Assignment(super::message::Assignment {
                    mode: super::message::AssignmentMode::Fixed,
                    recipients: vec![peer],
                    children: Vec::new(),
                }),
            )?;
        }
        Ok(())
    }
}
