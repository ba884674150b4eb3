//! Training and update steps shared by the schedules that exchange whole models.

use super::agent::{trained_from, AgentState, Out};
use super::options::{DesignOptions, TrainMode};
use super::roles::Activity;
use super::training::{companion_features, fingerprint, local_gradient, train_local, train_two_complete};
use super::ProtocolError;
use crate::interim::{aggregate_weighted, apply_interim, ApplyMode, InterimKind, InterimResult, UpdatePolicy};
use crate::ml_core::{Model, Parameterized};

pub(crate) fn learning_rate(st: &AgentState) -> f64 {
    st.task.as_ref().map_or(0.1, |t| t.hyperparameters.learning_rate)
}

fn missing(st: &AgentState, what: &str) -> ProtocolError {
    ProtocolError::IllegalEvent {
        agent: st.id,
        detail: format!("agent holds no {what}"),
    }
}

pub(crate) fn model_mut(st: &mut AgentState) -> Result<&mut Model, ProtocolError> {
    if st.model.is_none() {
        return Err(missing(st, "model"));
    }
    Ok(st.model.as_mut().expect("checked"))
}

/// Trains locally and packages the result kind the options ask for.
pub(crate) fn produce_result(
    st: &mut AgentState,
    options: &DesignOptions,
    round: u64,
    out: &mut Out,
) -> Result<InterimResult, ProtocolError> {
    out.perform(Activity::TrainMLModel)?;
    let hyper = st.task.as_ref().map(|t| t.hyperparameters.clone()).unwrap_or_default();
    let lo = trained_from(&st.config, options);
    if st.dataset.is_none() {
        return Err(missing(st, "dataset"));
    }
    if st.model.is_none() {
        return Err(missing(st, "model"));
    }
    let two = options.train_ml_model == TrainMode::TwoComplete;
    if two && st.companion.is_none() {
        return Err(missing(st, "companion model"));
    }
    let data = st.dataset.as_ref().expect("checked");
    let model = st.model.as_mut().expect("checked");
    let layers = model.spec.layer_count();
    let weight = data.len() as u64;
    let result = match options.transmit_interim_result {
        InterimKind::Gradients => {
            let (values, loss) = if two {
                let companion = st.companion.as_mut().expect("checked");
                train_local(companion, data, &hyper, 0)?;
                local_gradient(model, &companion_features(companion, data)?, 0)?
            } else {
                local_gradient(model, data, lo)?
            };
            out.loss(round, loss);
            InterimResult::gradients(values, lo, layers, weight, round, st.id)
        }
        InterimKind::ParameterValues => {
            let loss = if two {
                train_two_complete(st.companion.as_mut().expect("checked"), model, data, &hyper)?
            } else {
                train_local(model, data, &hyper, lo)?
            };
            out.loss(round, loss);
            out.model_changed(round, fingerprint(&*model));
            InterimResult::parameters(model.flatten_range(lo, layers)?, lo, layers, weight, round, st.id)
        }
        other => {
            return Err(ProtocolError::Config(format!(
                "{} cannot be produced by whole-model training",
                other.name()
            )))
        }
    };
    Ok(result)
}

/// Rejects results that break the task's interim contract.
pub(crate) fn check_contract(st: &AgentState, result: &InterimResult) -> Result<(), ProtocolError> {
    if let Some(task) = &st.task {
        task.interim_definition.conforms(result)?;
    }
    Ok(())
}

/// Current parameters over the trained range, as a parameter result.
pub(crate) fn own_parameters(
    st: &AgentState,
    options: &DesignOptions,
    weight: u64,
    round: u64,
) -> Result<InterimResult, ProtocolError> {
    let model = st.model.as_ref().ok_or_else(|| missing(st, "model"))?;
    let lo = trained_from(&st.config, options);
    let hi = model.spec.layer_count();
    Ok(InterimResult::parameters(model.flatten_range(lo, hi)?, lo, hi, weight.max(1), round, st.id))
}

/// Applies received results and returns their total weight.
///
/// `acc_weight` is the weight already folded into the local model this round;
/// individual parameter updates keep a running weighted mean against it.
pub(crate) fn apply_results(
    st: &mut AgentState,
    results: &[InterimResult],
    policy: UpdatePolicy,
    acc_weight: &mut u64,
    round: u64,
    out: &mut Out,
) -> Result<u64, ProtocolError> {
    out.perform(Activity::UpdateMLModel)?;
    let lr = learning_rate(st);
    let id = st.id;
    let model = model_mut(st)?;
    let mut total = 0;
    match policy {
        UpdatePolicy::Batched => {
            let agg = aggregate_weighted(results, id)?;
            apply_one(model, &agg, lr)?;
            *acc_weight += agg.weight;
            total = agg.weight;
        }
        UpdatePolicy::Individual => {
            for r in results {
                if r.kind == InterimKind::ParameterValues && *acc_weight > 0 {
                    let crate::interim::Shape::Flat { lo, hi, .. } = r.shape else {
                        return Err(crate::interim::InterimError::NotAggregatable(r.kind.name()).into());
                    };
                    let own = InterimResult::parameters(model.flatten_range(lo, hi)?, lo, hi, *acc_weight, round, id);
                    apply_one(model, &aggregate_weighted(&[own, r.clone()], id)?, lr)?;
                } else {
                    apply_one(model, r, lr)?;
                }
                *acc_weight += r.weight;
                total += r.weight;
            }
        }
    }
    out.model_changed(round, fingerprint(&*model));
    Ok(total)
}

fn apply_one(model: &mut Model, r: &InterimResult, lr: f64) -> Result<(), ProtocolError> {
    let mode = match r.kind {
        InterimKind::Gradients => ApplyMode::GradientStep { learning_rate: lr },
        _ => ApplyMode::ReplaceParameters,
    };
    apply_interim(model, r, mode)?;
    Ok(())
}

/// Installs parameters sent down by a parent or peer.
pub(crate) fn adopt(st: &mut AgentState, r: &InterimResult, round: u64, out: &mut Out) -> Result<(), ProtocolError> {
    out.perform(Activity::UpdateMLModel)?;
    let model = model_mut(st)?;
    apply_interim(model, r, ApplyMode::ReplaceParameters)?;
    let fp = fingerprint(&*model);
    out.model_changed(round, fp);
    Ok(())
}
