//! Voting rounds: broadcast readiness, vote for updaters, send results to the
//! elected updaters, then everyone adopts the lowest elected updater's model.
//!
//! Readiness and ballots are keyed by `(round, attempt)`; a round that stalls
//! past its timeout restarts from the round-start model with the next attempt.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;

use super::agent::{AgentState, Out, StepContext};
use super::message::{Message, Payload, Selection};
use super::options::{AwaitInterim, SelectStrategy};
use super::roles::{Activity, Role};
use super::selection::{cast_vote, select_agents};
use super::work::{adopt, apply_results, check_contract, model_mut, own_parameters, produce_result};
use super::ProtocolError;
use crate::interim::{InterimResult, UpdatePolicy};
use crate::ml_core::Parameterized;
use crate::AgentId;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
enum Stage {
    #[default]
    Idle,
    Readiness,
    Voting,
    Collecting,
    AwaitModel,
}

type Key = (u64, u64);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SwarmFlow {
    peers: Vec<AgentId>,
    stage: Stage,
    attempt: u64,
    since: u64,
    attempt_start: u64,
    start_at: Option<u64>,
    snapshot: Option<Vec<f64>>,
    ready: BTreeMap<Key, BTreeMap<AgentId, u64>>,
    ballots: BTreeMap<Key, BTreeMap<AgentId, AgentId>>,
    inbox: BTreeMap<u64, Vec<InterimResult>>,
    pool: BTreeSet<AgentId>,
    updaters: BTreeSet<AgentId>,
    results: BTreeMap<AgentId, InterimResult>,
    model: Option<InterimResult>,
}

impl SwarmFlow {
    pub(crate) fn new(st: &AgentState) -> Self {
        Self {
            peers: st.assignment.as_ref().map(|a| a.recipients.clone()).unwrap_or_default(),
            ..Self::default()
        }
    }

    pub(crate) fn armed(&self) -> bool {
        self.stage != Stage::Idle || self.start_at.is_some()
    }

    pub(crate) fn start(&mut self, _st: &mut AgentState, ctx: &StepContext<'_>, _out: &mut Out) -> Result<(), ProtocolError> {
        self.start_at = Some(ctx.tick);
        Ok(())
    }

    fn key(&self, st: &AgentState) -> Key {
        (st.rounds_completed, self.attempt)
    }

    fn leader(&self) -> Option<AgentId> {
        self.updaters.first().copied()
    }

    fn timeout(st: &AgentState, ctx: &StepContext<'_>) -> u64 {
        let t = match ctx.options.await_interim_results {
            AwaitInterim::TimeBound(t) => t,
            AwaitInterim::ResponseBound(_) => st.config.readiness_window,
        };
        2 * st.config.readiness_window + t + 2
    }

    pub(crate) fn on_tick(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        if self.start_at.is_some_and(|t| ctx.tick >= t) {
            self.start_at = None;
            self.attempt = 0;
            self.snapshot = Some(model_mut(st)?.flatten_parameters());
            return self.begin(st, ctx, out);
        }
        if self.stage != Stage::Idle && ctx.tick.saturating_sub(self.attempt_start) >= Self::timeout(st, ctx) {
            out.note(format!("round {} attempt {} timed out", st.rounds_completed, self.attempt));
            if let Some(snap) = &self.snapshot {
                model_mut(st)?.load_parameters(snap)?;
            }
            self.attempt += 1;
            return self.begin(st, ctx, out);
        }
        self.advance(st, ctx, out)
    }

    fn advance(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        let key = self.key(st);
        let waited = ctx.tick.saturating_sub(self.since);
        let window = st.config.readiness_window;
        match self.stage {
            Stage::Readiness => {
                let heard = self.ready.get(&key).map_or(0, BTreeMap::len);
                if heard >= self.peers.len() || waited >= window {
                    self.vote(st, ctx, out)?;
                }
            }
            Stage::Voting => {
                let have = self.ballots.get(&key).map_or(0, |b| b.keys().filter(|v| self.pool.contains(v)).count());
                if have >= self.pool.len() || waited >= window {
                    self.elect_and_train(st, ctx, out)?;
                }
            }
            Stage::Collecting => self.try_update(st, ctx, out)?,
            Stage::AwaitModel => self.try_adopt(st, ctx, out)?,
            Stage::Idle => {}
        }
        Ok(())
    }

    fn begin(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        self.stage = Stage::Readiness;
        self.since = ctx.tick;
        self.attempt_start = ctx.tick;
        self.pool.clear();
        self.updaters.clear();
        self.results.clear();
        self.model = None;
        let round = st.rounds_completed;
        if !self.peers.is_empty() {
            out.send(
                self.peers.clone(),
                round,
                Payload::Readiness {
                    dataset_size: st.data_len(),
                    attempt: self.attempt,
                    sample_ids: None,
                },
            )?;
        }
        out.perform(Activity::AwaitReadinessSignal)?;
        self.advance(st, ctx, out)
    }

    fn vote(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        let key = self.key(st);
        let mut sizes = self.ready.get(&key).cloned().unwrap_or_default();
        sizes.insert(st.id, st.data_len());
        self.pool = sizes.keys().copied().collect();
        let ballot = cast_vote(st.id, &self.pool, &sizes);
        if ballot == st.id {
            out.note("self-vote: no other agent is ready");
        }
        self.ballots.entry(key).or_default().insert(st.id, ballot);
        let others: Vec<AgentId> = self.pool.iter().copied().filter(|&p| p != st.id).collect();
        if !others.is_empty() {
            out.send(
                others,
                key.0,
                Payload::Selection(Selection {
                    roles: [Role::Updater].into_iter().collect(),
                    sample_ids: None,
                    ballot: Some(ballot),
                    attempt: key.1,
                }),
            )?;
        }
        self.stage = Stage::Voting;
        self.since = ctx.tick;
        self.advance(st, ctx, out)
    }

    fn elect_and_train(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        let key = self.key(st);
        out.perform(Activity::SelectAgent)?;
        let votes: BTreeMap<AgentId, AgentId> = self
            .ballots
            .get(&key)
            .map(|b| b.iter().filter(|(v, _)| self.pool.contains(v)).map(|(&v, &c)| (v, c)).collect())
            .unwrap_or_default();
        let mut sizes = self.ready.get(&key).cloned().unwrap_or_default();
        sizes.insert(st.id, st.data_len());
        let strategy = ctx.options.select_agent;
        let count = st.config.updater_subset_size.max(1);
        self.updaters = match strategy {
            SelectStrategy::Random => {
                let mut seeded = rand_chacha::ChaCha8Rng::seed_from_u64(key.0 ^ (key.1 << 32));
                select_agents(&self.pool, strategy, count, &sizes, &votes, &mut seeded)?
            }
            _ => select_agents(&self.pool, strategy, count, &sizes, &votes, &mut st.rng)?,
        };
        if self.updaters.contains(&st.id) {
            st.active_roles.insert(Role::Updater);
            out.note("selected itself as updater");
        }
        let round = key.0;
        let result = produce_result(st, ctx.options, round, out)?;
        let remote: Vec<AgentId> = self.updaters.iter().copied().filter(|&u| u != st.id).collect();
        if !remote.is_empty() {
            out.send(remote, round, Payload::Interim(result.clone()))?;
        }
        if self.updaters.contains(&st.id) {
            self.results.insert(st.id, result);
            self.stage = Stage::Collecting;
            out.perform(Activity::AwaitInterimResults)?;
        } else {
            self.stage = Stage::AwaitModel;
            out.perform(Activity::AwaitSelectionSignal)?;
        }
        self.since = ctx.tick;
        self.sort_inbox(st, round, out)?;
        self.advance(st, ctx, out)
    }

    /// Classifies buffered parameter messages once the updater set is known.
    fn sort_inbox(&mut self, st: &AgentState, round: u64, out: &mut Out) -> Result<(), ProtocolError> {
        if self.stage != Stage::Collecting && self.stage != Stage::AwaitModel {
            return Ok(());
        }
        let pending = self.inbox.remove(&round).unwrap_or_default();
        let me_updater = self.updaters.contains(&st.id);
        for r in pending {
            let s = r.sender;
            if me_updater && self.pool.contains(&s) && !self.results.contains_key(&s) {
                check_contract(st, &r)?;
                self.results.insert(s, r);
            } else if Some(s) == self.leader() {
                self.model = Some(r);
            } else {
                out.note(format!("unexpected parameters from {s} discarded"));
            }
        }
        Ok(())
    }

    fn try_update(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        let expected = self.pool.len();
        let got = self.results.len();
        let waited = ctx.tick.saturating_sub(self.since);
        let proceed = match ctx.options.await_interim_results {
            AwaitInterim::TimeBound(t) => got >= expected || waited >= t,
            AwaitInterim::ResponseBound(k) => got >= (k as usize).min(expected),
        };
        if !proceed {
            return Ok(());
        }
        let round = st.rounds_completed;
        let received: Vec<InterimResult> = self.results.values().cloned().collect();
        let mut acc = 0;
        let total = apply_results(st, &received, UpdatePolicy::Batched, &mut acc, round, out)?;
        if self.leader() == Some(st.id) {
            let model = own_parameters(st, ctx.options, total, round)?;
            if !self.peers.is_empty() {
                out.send(self.peers.clone(), round, Payload::Interim(model))?;
            }
            return self.finish(st, ctx, out);
        }
        self.stage = Stage::AwaitModel;
        self.try_adopt(st, ctx, out)
    }

    fn try_adopt(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        let Some(model) = self.model.take() else {
            return Ok(());
        };
        let round = st.rounds_completed;
        if st.agent_type.has(Role::Updater) {
            adopt(st, &model, round, out)?;
        }
        self.finish(st, ctx, out)
    }

    fn finish(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        st.rounds_completed += 1;
        out.round_done(st.rounds_completed);
        st.active_roles.remove(&Role::Updater);
        let done = st.rounds_completed;
        self.ready.retain(|(r, _), _| *r >= done);
        self.ballots.retain(|(r, _), _| *r >= done);
        self.inbox.retain(|r, _| *r >= done);
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
            Payload::Readiness {
                dataset_size, attempt, ..
            } => {
                self.ready
                    .entry((msg.round, *attempt))
                    .or_default()
                    .insert(msg.sender, *dataset_size);
            }
            Payload::Selection(sel) => {
                let Some(ballot) = sel.ballot else {
                    return Err(ProtocolError::IllegalEvent {
                        agent: st.id,
                        detail: "selection without a ballot".into(),
                    });
                };
                self.ballots
                    .entry((msg.round, sel.attempt))
                    .or_default()
                    .insert(msg.sender, ballot);
            }
            Payload::Interim(r) => {
                if msg.round < st.rounds_completed {
                    out.note(format!("stale parameters from {} discarded", msg.sender));
                    return Ok(());
                }
                self.inbox.entry(msg.round).or_default().push(r.clone());
                if msg.round == st.rounds_completed {
                    self.sort_inbox(st, msg.round, out)?;
                }
            }
            _ => {
                return Err(ProtocolError::IllegalEvent {
                    agent: st.id,
                    detail: format!("unexpected {} from {}", msg.protocol, msg.sender),
                })
            }
        }
        if self.stage != Stage::Idle {
            self.advance(st, ctx, out)?;
        }
        Ok(())
    }
}
