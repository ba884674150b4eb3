//! Cut-layer exchanges between one hub and its trainers.
//!
//! Plain split: trainers send head activations, the hub owns the tail and sends
//! the cut gradient back. With pseudo-residuals the hub returns predictions and
//! trainers answer with residuals. U-shaped: the hub owns the middle segment and
//! trainers keep both the head and the tail, so labels never leave them.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::agent::{AgentState, Out, StepContext};
use super::message::{Assignment, Message, Payload, Selection};
use super::options::Announce;
use super::roles::{Activity, Role};
use super::selection::select_agents;
use super::training::fingerprint_values;
use super::work::learning_rate;
use super::ProtocolError;
use crate::interim::{aggregate_weighted, apply_interim, ApplyMode, InterimKind, InterimResult, Shape};
use crate::ml_core::{
    apply_update, backward_segment, compute_pseudo_residuals, forward_segment_cached, loss_gradient, loss_value, residual_to_output_gradient,
    ForwardCache, LossKind, Matrix, Parameterized,
};
use crate::AgentId;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
enum Stage {
    #[default]
    Idle,
    Readiness,
    Serving,
}

#[derive(Debug, Clone, PartialEq)]
struct HubExchange {
    cache: Option<ForwardCache>,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct TrainerExchange {
    round: u64,
    head: Option<ForwardCache>,
    targets: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitFlow {
    hub: Option<AgentId>,
    trainers: Vec<AgentId>,
    stage: Stage,
    round: u64,
    since: u64,
    ready: BTreeMap<AgentId, (u64, u64, Option<Vec<u64>>)>,
    queue: VecDeque<AgentId>,
    serving: BTreeMap<AgentId, HubExchange>,
    deferred: Vec<InterimResult>,
    local: Option<TrainerExchange>,
}

impl SplitFlow {
    pub(crate) fn new(st: &AgentState) -> Self {
        Self {
            hub: st.assigned_recipient,
            trainers: st.assignment.as_ref().map(|a| a.children.clone()).unwrap_or_default(),
            ..Self::default()
        }
    }

    pub(crate) fn armed(&self) -> bool {
        self.stage != Stage::Idle
    }

    pub(crate) fn add_child(&mut self, child: AgentId, plan: &BTreeMap<AgentId, Assignment>, me: AgentId) {
        if plan.get(&child).is_some_and(|a| a.recipients.contains(&me)) && !self.trainers.contains(&child) {
            self.trainers.push(child);
            self.trainers.sort_unstable();
        }
    }

    fn u_shaped(st: &AgentState) -> bool {
        st.config.cut_points.len() >= 2
    }

    pub(crate) fn start(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        if self.hub.is_some() {
            return self.signal_ready(st, 0, ctx, out);
        }
        if !self.trainers.is_empty() {
            self.begin_round(ctx, out)?;
        }
        Ok(())
    }

    fn signal_ready(&mut self, st: &AgentState, round: u64, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        let sample_ids = match ctx.options.announce_agent_selection {
            Announce::RoleAndSampleIds => st.dataset.as_ref().map(|d| d.sample_ids.clone()),
            Announce::RoleOnly => None,
        };
        out.send(
            vec![self.hub.expect("trainer has a hub")],
            round,
            Payload::Readiness {
                dataset_size: st.data_len(),
                attempt: 0,
                sample_ids,
            },
        )?;
        out.perform(Activity::AwaitSelectionSignal)
    }

    fn begin_round(&mut self, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        out.perform(Activity::AwaitReadinessSignal)?;
        self.stage = Stage::Readiness;
        self.since = ctx.tick;
        Ok(())
    }

    pub(crate) fn on_tick(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        match self.stage {
            Stage::Readiness => self.try_select(st, ctx, out),
            Stage::Serving if ctx.tick.saturating_sub(self.since) >= st.config.guard_ticks => {
                out.guard_trip(self.round, "cut-layer exchange");
                self.stage = Stage::Idle;
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn try_select(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        let ready: BTreeMap<AgentId, u64> = self
            .ready
            .iter()
            .filter(|(_, (r, _, _))| *r == self.round)
            .map(|(&id, (_, size, _))| (id, *size))
            .collect();
        let waited = ctx.tick.saturating_sub(self.since);
        let all_in = self.trainers.iter().all(|t| ready.contains_key(t));
        if ready.is_empty() || !(all_in || waited >= st.config.readiness_window) {
            if ready.is_empty() && waited >= st.config.guard_ticks {
                out.guard_trip(self.round, "readiness");
                self.stage = Stage::Idle;
            }
            return Ok(());
        }
        out.perform(Activity::SelectAgent)?;
        let pool: BTreeSet<AgentId> = ready.keys().copied().collect();
        let chosen = select_agents(
            &pool,
            ctx.options.select_agent,
            st.config.selection_count,
            &ready,
            &BTreeMap::new(),
            &mut st.rng,
        )?;
        self.queue = chosen.into_iter().collect();
        self.serving.clear();
        self.deferred.clear();
        self.stage = Stage::Serving;
        self.since = ctx.tick;
        out.perform(Activity::AwaitInterimResults)?;
        if st.config.parallel_clients {
            while let Some(t) = self.queue.pop_front() {
                self.announce(st, t, out)?;
            }
            Ok(())
        } else {
            let t = self.queue.pop_front().expect("selection is nonempty");
            self.announce(st, t, out)
        }
    }

    /// Names the batch for this round when the trainer advertised its sample ids.
    fn announce(&mut self, st: &AgentState, trainer: AgentId, out: &mut Out) -> Result<(), ProtocolError> {
        let batch = st.task.as_ref().map_or(0, |t| t.hyperparameters.batch_size);
        let sample_ids = self
            .ready
            .get(&trainer)
            .and_then(|(_, _, ids)| ids.as_ref())
            .map(|ids| batch_ids(ids, batch, self.round));
        self.serving.insert(trainer, HubExchange { cache: None });
        out.send(
            vec![trainer],
            self.round,
            Payload::Selection(Selection {
                roles: [Role::Trainer, Role::Updater].into_iter().collect(),
                sample_ids,
                ballot: None,
                attempt: 0,
            }),
        )
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
                dataset_size,
                sample_ids,
                ..
            } if self.trainers.contains(&msg.sender) => {
                self.ready.insert(msg.sender, (msg.round, *dataset_size, sample_ids.clone()));
                if self.stage == Stage::Readiness {
                    self.try_select(st, ctx, out)?;
                }
                Ok(())
            }
            Payload::Interim(r) if self.trainers.contains(&msg.sender) => self.hub_receive(st, msg.sender, msg.round, r, ctx, out),
            Payload::Selection(sel) if Some(msg.sender) == self.hub => self.trainer_selected(st, msg.round, sel, ctx, out),
            Payload::Interim(r) if Some(msg.sender) == self.hub => self.trainer_receive(st, msg.round, r, ctx, out),
            _ => Err(ProtocolError::IllegalEvent {
                agent: st.id,
                detail: format!("unexpected {} from {}", msg.protocol, msg.sender),
            }),
        }
    }

    fn trainer_selected(
        &mut self,
        st: &mut AgentState,
        round: u64,
        sel: &Selection,
        ctx: &StepContext<'_>,
        out: &mut Out,
    ) -> Result<(), ProtocolError> {
        out.perform(Activity::TrainMLModel)?;
        let data = st.dataset.as_ref().ok_or_else(|| missing(st.id, "dataset"))?;
        let rows: Vec<usize> = match &sel.sample_ids {
            Some(ids) => data.rows_for_ids(ids),
            None => {
                let batch = st.task.as_ref().map_or(0, |t| t.hyperparameters.batch_size);
                let ranges = data.batch_ranges(batch);
                let (lo, hi) = ranges[(round as usize) % ranges.len()];
                (lo..hi).collect()
            }
        };
        if rows.is_empty() {
            return Err(ProtocolError::IllegalEvent {
                agent: st.id,
                detail: "selection names no local samples".into(),
            });
        }
        let x = data.features.select_rows(&rows);
        let y: Vec<f64> = rows.iter().map(|&i| data.targets[i]).collect();
        let head = st.segments.first().ok_or_else(|| missing(st.id, "head segment"))?;
        let (acts, cache) = forward_segment_cached(head, &x)?;
        let width = acts.cols();
        let kind = ctx.options.transmit_interim_result;
        let with_labels = kind == InterimKind::ActivationsWithLabels;
        let result = InterimResult::per_sample(
            if with_labels {
                InterimKind::ActivationsWithLabels
            } else {
                InterimKind::ActivationsWithoutLabels
            },
            acts.into_vec(),
            width,
            with_labels.then(|| y.clone()),
            round,
            st.id,
        );
        self.local = Some(TrainerExchange {
            round,
            head: Some(cache),
            targets: y,
        });
        out.send(vec![self.hub.expect("trainer")], round, Payload::Interim(result))
    }

    fn trainer_receive(
        &mut self,
        st: &mut AgentState,
        round: u64,
        r: &InterimResult,
        ctx: &StepContext<'_>,
        out: &mut Out,
    ) -> Result<(), ProtocolError> {
        let Some(mut ex) = self.local.take().filter(|e| e.round == round) else {
            out.note(format!("stale cut-layer message for round {round} discarded"));
            return Ok(());
        };
        let lr = learning_rate(st);
        let Shape::PerSample { width, .. } = r.shape else {
            return Err(ProtocolError::IllegalEvent {
                agent: st.id,
                detail: "cut-layer payload must be per-sample".into(),
            });
        };
        let upstream = Matrix::from_vec(r.values.len() / width.max(1), width, r.values.clone())?;
        let hub = self.hub.expect("trainer");
        match r.kind {
            InterimKind::Gradients => {
                let head = st.segments.first().ok_or_else(|| missing(st.id, "head segment"))?;
                let cache = ex.head.take().ok_or_else(|| missing(st.id, "head cache"))?;
                let (grads, _) = backward_segment(head, &cache, &upstream)?;
                out.perform(Activity::UpdateMLModel)?;
                apply_update(&mut st.segments[0], &grads, lr)?;
                out.model_changed(round, fingerprint_values(&st.parameters()));
                st.rounds_completed = round + 1;
                self.signal_ready(st, round + 1, ctx, out)
            }
            InterimKind::ActivationsWithoutLabels if Self::u_shaped(st) => {
                let tail = st.segments.get(1).ok_or_else(|| missing(st.id, "tail segment"))?;
                let (preds, cache) = forward_segment_cached(tail, &upstream)?;
                let loss_kind = tail.parent_spec.loss;
                let loss = loss_value(loss_kind, preds.as_slice(), &ex.targets)?;
                out.loss(round, loss);
                let g = Matrix::column(&loss_gradient(loss_kind, preds.as_slice(), &ex.targets)?);
                let (grads, back) = backward_segment(tail, &cache, &g)?;
                out.perform(Activity::UpdateMLModel)?;
                apply_update(&mut st.segments[1], &grads, lr)?;
                let w = back.cols();
                let reply = InterimResult::per_sample(InterimKind::Gradients, back.into_vec(), w, None, round, st.id);
                self.local = Some(ex);
                out.send(vec![hub], round, Payload::Interim(reply))
            }
            InterimKind::ActivationsWithoutLabels => {
                let residuals = compute_pseudo_residuals(&r.values, &ex.targets, st.segments[0].parent_spec.loss)?;
                let reply = InterimResult::per_sample(InterimKind::PseudoResiduals, residuals, 1, None, round, st.id);
                self.local = Some(ex);
                out.send(vec![hub], round, Payload::Interim(reply))
            }
            other => Err(ProtocolError::IllegalEvent {
                agent: st.id,
                detail: format!("trainer cannot consume {}", other.name()),
            }),
        }
    }

    fn hub_receive(
        &mut self,
        st: &mut AgentState,
        sender: AgentId,
        round: u64,
        r: &InterimResult,
        ctx: &StepContext<'_>,
        out: &mut Out,
    ) -> Result<(), ProtocolError> {
        if self.stage != Stage::Serving || round != self.round || !self.serving.contains_key(&sender) {
            out.note(format!("late result from {sender} discarded"));
            return Ok(());
        }
        r.check_well_formed()?;
        let Shape::PerSample { rows, width } = r.shape else {
            return Err(ProtocolError::IllegalEvent {
                agent: st.id,
                detail: "cut-layer payload must be per-sample".into(),
            });
        };
        let input = Matrix::from_vec(rows, width, r.values.clone())?;
        let seg = st.segments.first().ok_or_else(|| missing(st.id, "hub segment"))?;
        let loss_kind = seg.parent_spec.loss;
        let ex = self.serving.get_mut(&sender).expect("checked");
        let upstream = match r.kind {
            InterimKind::ActivationsWithLabels | InterimKind::ActivationsWithoutLabels if ex.cache.is_none() => {
                check_cut_width(st, r)?;
                let (outp, cache) = forward_segment_cached(seg, &input)?;
                ex.cache = Some(cache);
                if let Some(labels) = &r.labels {
                    let loss = loss_value(loss_kind, outp.as_slice(), labels)?;
                    out.loss(round, loss);
                    Matrix::column(&loss_gradient(loss_kind, outp.as_slice(), labels)?)
                } else {
                    let w = outp.cols();
                    let reply = InterimResult::per_sample(InterimKind::ActivationsWithoutLabels, outp.into_vec(), w, None, round, st.id);
                    return out.send(vec![sender], round, Payload::Interim(reply));
                }
            }
            InterimKind::PseudoResiduals => {
                let preds = ex.cache.as_ref().and_then(|c| c.output()).ok_or_else(|| missing(st.id, "forward cache"))?.as_slice().to_vec();
                let targets: Vec<f64> = preds.iter().zip(&r.values).map(|(p, res)| p + res).collect();
                let loss = match loss_kind {
                    LossKind::Mse => r.values.iter().map(|v| v * v).sum::<f64>() / r.values.len() as f64,
                    LossKind::BinaryCrossEntropy => loss_value(loss_kind, &preds, &targets)?,
                };
                out.loss(round, loss);
                Matrix::column(&residual_to_output_gradient(loss_kind, &r.values, &preds)?)
            }
            InterimKind::Gradients => input,
            other => {
                return Err(ProtocolError::IllegalEvent {
                    agent: st.id,
                    detail: format!("hub cannot consume {}", other.name()),
                })
            }
        };
        let ex = self.serving.remove(&sender).expect("checked");
        let cache = ex.cache.ok_or_else(|| missing(st.id, "forward cache"))?;
        let seg = &st.segments[0];
        let (grads, down) = backward_segment(seg, &cache, &upstream)?;
        out.perform(Activity::UpdateMLModel)?;
        let weight = cache.batch_rows() as u64;
        match ctx.options.update_ml_model {
            crate::interim::UpdatePolicy::Individual => {
                let lr = learning_rate(st);
                apply_update(&mut st.segments[0], &grads, lr)?;
                out.model_changed(round, fingerprint_values(&st.parameters()));
            }
            crate::interim::UpdatePolicy::Batched => {
                let (lo, hi) = seg.layer_range();
                self.deferred.push(InterimResult::gradients(grads.flatten(), lo, hi, weight.max(1), round, sender));
            }
        }
        let w = down.cols();
        let reply = InterimResult::per_sample(InterimKind::Gradients, down.into_vec(), w, None, round, st.id);
        out.send(vec![sender], round, Payload::Interim(reply))?;
        if let Some(next) = self.queue.pop_front() {
            self.since = ctx.tick;
            return self.announce(st, next, out);
        }
        if self.serving.is_empty() {
            self.finish_round(st, ctx, out)?;
        }
        Ok(())
    }

    fn finish_round(&mut self, st: &mut AgentState, ctx: &StepContext<'_>, out: &mut Out) -> Result<(), ProtocolError> {
        if !self.deferred.is_empty() {
            let agg = aggregate_weighted(&self.deferred, st.id)?;
            let lr = learning_rate(st);
            apply_interim(&mut st.segments[0], &agg, ApplyMode::GradientStep { learning_rate: lr })?;
            self.deferred.clear();
            out.model_changed(self.round, fingerprint_values(&st.parameters()));
        }
        self.round += 1;
        st.rounds_completed = self.round;
        out.round_done(self.round);
        self.ready.retain(|_, (r, _, _)| *r >= self.round);
        self.begin_round(ctx, out)?;
        self.try_select(st, ctx, out)
    }
}

fn missing(agent: AgentId, what: &str) -> ProtocolError {
    ProtocolError::IllegalEvent {
        agent,
        detail: format!("agent holds no {what}"),
    }
}

fn check_cut_width(st: &AgentState, r: &InterimResult) -> Result<(), ProtocolError> {
    let Some(task) = &st.task else {
        return Ok(());
    };
    if task.interim_definition.kind == r.kind {
        task.interim_definition.conforms(r)?;
    } else if let (crate::interim::ShapeContract::PerSample { width }, Shape::PerSample { width: w, .. }) =
        (&task.interim_definition.shape, &r.shape)
    {
        if width != w {
            return Err(crate::interim::InterimError::Shape {
                expected: *width,
                actual: *w,
            }
            .into());
        }
    }
    Ok(())
}

/// Consecutive window of `ids` used in `round`, cycling through the list.
pub fn batch_ids(ids: &[u64], batch_size: usize, round: u64) -> Vec<u64> {
    if batch_size == 0 || batch_size >= ids.len() {
        return ids.to_vec();
    }
    let batches = ids.len().div_ceil(batch_size);
    let b = (round as usize) % batches;
    ids[b * batch_size..((b + 1) * batch_size).min(ids.len())].to_vec()
}

