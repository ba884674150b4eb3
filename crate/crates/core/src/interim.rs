//! Interim results exchanged between agents and the rules for combining them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ml_core::{apply_update, GradientSet, MlError, Parameterized};
use crate::AgentId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterimKind {
    ParameterValues,
    Gradients,
    ActivationsWithLabels,
    ActivationsWithoutLabels,
    PseudoResiduals,
}

impl InterimKind {
    pub const ALL: [InterimKind; 5] = [
        InterimKind::ParameterValues,
        InterimKind::Gradients,
        InterimKind::ActivationsWithLabels,
        InterimKind::ActivationsWithoutLabels,
        InterimKind::PseudoResiduals,
    ];

    pub fn is_aggregatable(self) -> bool {
        matches!(self, InterimKind::ParameterValues | InterimKind::Gradients)
    }

    pub fn requires_labels(self) -> bool {
        self == InterimKind::ActivationsWithLabels
    }

    pub fn name(self) -> &'static str {
        match self {
            InterimKind::ParameterValues => "parameter_values",
            InterimKind::Gradients => "gradients",
            InterimKind::ActivationsWithLabels => "activations_with_labels",
            InterimKind::ActivationsWithoutLabels => "activations_without_labels",
            InterimKind::PseudoResiduals => "pseudo_residuals",
        }
    }
}

/// Array layout of an interim payload.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "layout")]
pub enum Shape {
    /// A flat parameter or gradient vector over parent layers `[lo, hi)`.
    Flat { len: usize, lo: usize, hi: usize },
    /// One row of `width` values per sample.
    PerSample { rows: usize, width: usize },
}

impl Shape {
    pub fn element_count(&self) -> usize {
        match *self {
            Shape::Flat { len, .. } => len,
            Shape::PerSample { rows, width } => rows * width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterimResult {
    pub kind: InterimKind,
    pub shape: Shape,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<f64>>,
    pub weight: u64,
    pub round: u64,
    pub sender: AgentId,
}

impl InterimResult {
    pub fn parameters(values: Vec<f64>, lo: usize, hi: usize, weight: u64, round: u64, sender: AgentId) -> Self {
        Self::flat(InterimKind::ParameterValues, values, lo, hi, weight, round, sender)
    }

    pub fn gradients(values: Vec<f64>, lo: usize, hi: usize, weight: u64, round: u64, sender: AgentId) -> Self {
        Self::flat(InterimKind::Gradients, values, lo, hi, weight, round, sender)
    }

    fn flat(kind: InterimKind, values: Vec<f64>, lo: usize, hi: usize, weight: u64, round: u64, sender: AgentId) -> Self {
        Self {
            kind,
            shape: Shape::Flat {
                len: values.len(),
                lo,
                hi,
            },
            values,
            labels: None,
            weight,
            round,
            sender,
        }
    }

    pub fn per_sample(
        kind: InterimKind,
        values: Vec<f64>,
        width: usize,
        labels: Option<Vec<f64>>,
        round: u64,
        sender: AgentId,
    ) -> Self {
        let rows = values.len().checked_div(width).unwrap_or(0);
        Self {
            kind,
            shape: Shape::PerSample { rows, width },
            values,
            labels,
            weight: rows.max(1) as u64,
            round,
            sender,
        }
    }

    /// Scalar count carried on the wire, labels included.
    pub fn element_count(&self) -> usize {
        self.values.len() + self.labels.as_ref().map_or(0, Vec::len)
    }

    pub fn check_well_formed(&self) -> Result<(), InterimError> {
        if self.weight == 0 {
            return Err(InterimError::ZeroWeight { sender: self.sender });
        }
        if self.values.len() != self.shape.element_count() {
            return Err(InterimError::Shape {
                expected: self.shape.element_count(),
                actual: self.values.len(),
            });
        }
        match (&self.shape, self.kind.is_aggregatable()) {
            (Shape::Flat { .. }, true) => {}
            (Shape::PerSample { .. }, _) if self.kind != InterimKind::ParameterValues => {}
            _ => return Err(InterimError::Contract(format!("{} cannot use this layout", self.kind.name()))),
        }
        match (&self.labels, self.kind.requires_labels()) {
            (Some(l), true) => {
                if let Shape::PerSample { rows, .. } = self.shape {
                    if l.len() != rows {
                        return Err(InterimError::Shape {
                            expected: rows,
                            actual: l.len(),
                        });
                    }
                }
            }
            (None, false) => {}
            (Some(_), false) => return Err(InterimError::Contract("labels only accompany activations_with_labels".into())),
            (None, true) => return Err(InterimError::Contract("activations_with_labels needs labels".into())),
        }
        Ok(())
    }
}

/// Shape contract fixed by a configurator before operation starts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "layout")]
pub enum ShapeContract {
    Flat { len: usize, lo: usize, hi: usize },
    PerSample { width: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterimResultDefinition {
    pub kind: InterimKind,
    pub shape: ShapeContract,
    pub value_range: String,
}

impl InterimResultDefinition {
    pub fn conforms(&self, result: &InterimResult) -> Result<(), InterimError> {
        result.check_well_formed()?;
        if result.kind != self.kind {
            return Err(InterimError::MixedKinds(self.kind.name(), result.kind.name()));
        }
        let shape_ok = match (&self.shape, &result.shape) {
            (ShapeContract::Flat { len, lo, hi }, Shape::Flat { len: l, lo: a, hi: b }) => {
                len == l && lo == a && hi == b
            }
            (ShapeContract::PerSample { width }, Shape::PerSample { width: w, .. }) => width == w,
            _ => false,
        };
        if !shape_ok {
            return Err(InterimError::Contract(format!(
                "result from agent {} does not match the published {} contract",
                result.sender,
                self.kind.name()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InterimError {
    #[error("no interim results to combine")]
    Empty,
    #[error("cannot aggregate {0}")]
    NotAggregatable(&'static str),
    #[error("mixed kinds {0} and {1}")]
    MixedKinds(&'static str, &'static str),
    #[error("shape mismatch: expected {expected} values, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("zero weight from agent {sender}")]
    ZeroWeight { sender: AgentId },
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Ml(#[from] MlError),
}

/// Sample-weighted mean of parameter or gradient results.
///
/// Identical payloads are merged before summation and the remainder is summed
/// in a canonical order, so the output does not depend on input order.
pub fn aggregate_weighted(results: &[InterimResult], aggregator: AgentId) -> Result<InterimResult, InterimError> {
    let first = results.first().ok_or(InterimError::Empty)?;
    if !first.kind.is_aggregatable() {
        return Err(InterimError::NotAggregatable(first.kind.name()));
    }
    for r in results {
        r.check_well_formed()?;
        if r.kind != first.kind {
            return Err(InterimError::MixedKinds(first.kind.name(), r.kind.name()));
        }
        if r.shape != first.shape {
            return Err(InterimError::Shape {
                expected: first.shape.element_count(),
                actual: r.shape.element_count(),
            });
        }
    }
    let total: u64 = results.iter().map(|r| r.weight).sum();
    let round = results.iter().map(|r| r.round).max().unwrap_or(0);

    let mut groups: BTreeMap<Vec<u64>, u64> = BTreeMap::new();
    for r in results {
        let key: Vec<u64> = r.values.iter().map(|v| v.to_bits()).collect();
        *groups.entry(key).or_insert(0) += r.weight;
    }
    let values = if groups.len() == 1 {
        first.values.clone()
    } else {
        let len = first.values.len();
        let denom = total as f64;
        let mut acc = vec![0.0; len];
        for (bits, &w) in &groups {
            let w = w as f64;
            for (a, b) in acc.iter_mut().zip(bits) {
                *a += w * f64::from_bits(*b);
            }
        }
        acc.into_iter().map(|a| a / denom).collect()
    };
    Ok(InterimResult {
        kind: first.kind,
        shape: first.shape.clone(),
        values,
        labels: None,
        weight: total,
        round,
        sender: aggregator,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ApplyMode {
    ReplaceParameters,
    GradientStep { learning_rate: f64 },
}

/// Installs a parameter result or takes an SGD step with a gradient result.
pub fn apply_interim<P: Parameterized + ?Sized>(
    target: &mut P,
    result: &InterimResult,
    mode: ApplyMode,
) -> Result<(), InterimError> {
    result.check_well_formed()?;
    let Shape::Flat { lo, hi, .. } = result.shape else {
        return Err(InterimError::NotAggregatable(result.kind.name()));
    };
    match (mode, result.kind) {
        (ApplyMode::ReplaceParameters, InterimKind::ParameterValues) => {
            target.load_range(lo, hi, &result.values)?;
        }
        (ApplyMode::GradientStep { learning_rate }, InterimKind::Gradients) => {
            let (own_lo, own_hi) = target.layer_range();
            let expected = target.flatten_range(lo, hi)?.len();
            if expected != result.values.len() {
                return Err(InterimError::Shape {
                    expected,
                    actual: result.values.len(),
                });
            }
            let before = if lo > own_lo { target.flatten_range(own_lo, lo)?.len() } else { 0 };
            let after = if hi < own_hi { target.flatten_range(hi, own_hi)?.len() } else { 0 };
            let mut flat = vec![0.0; before];
            flat.extend_from_slice(&result.values);
            flat.resize(before + result.values.len() + after, 0.0);
            let grads = GradientSet::from_flat(target, &flat, result.weight as usize)?;
            apply_update(target, &grads, learning_rate)?;
        }
        (_, kind) => {
            return Err(InterimError::Contract(format!("mode {mode:?} does not accept {}", kind.name())));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdatePolicy {
    Batched,
    Individual,
}

/// One update to apply, with the senders whose results it combines.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanStep {
    pub result: InterimResult,
    pub sources: Vec<AgentId>,
}

/// Batched folds everything into one aggregate; individual keeps arrival order.
pub fn update_policy(
    received: &[InterimResult],
    policy: UpdatePolicy,
    aggregator: AgentId,
) -> Result<Vec<PlanStep>, InterimError> {
    if received.is_empty() {
        return Err(InterimError::Empty);
    }
    match policy {
        UpdatePolicy::Batched => Ok(vec![PlanStep {
            result: aggregate_weighted(received, aggregator)?,
            sources: received.iter().map(|r| r.sender).collect(),
        }]),
        UpdatePolicy::Individual => Ok(received
            .iter()
            .map(|r| PlanStep {
                result: r.clone(),
                sources: vec![r.sender],
            })
            .collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ml_core::{Activation, LossKind, Model, ModelSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(v: Vec<f64>, w: u64, sender: AgentId) -> InterimResult {
        InterimResult::parameters(v, 0, 1, w, 0, sender)
    }

    #[test]
    fn singleton_is_identity() {
        let r = params(vec![0.1, -7.25, 3.0], 5, 1);
        let out = aggregate_weighted(std::slice::from_ref(&r), 9).unwrap();
        assert_eq!(out.values, r.values);
        assert_eq!(out.weight, 5);
        assert_eq!(out.sender, 9);
    }

    #[test]
    fn weighted_pair() {
        let out = aggregate_weighted(&[params(vec![2.0], 1, 1), params(vec![4.0], 3, 2)], 0).unwrap();
        assert_eq!(out.values, vec![3.5]);
        assert_eq!(out.weight, 4);
    }

    #[test]
    fn identical_payloads_are_exact() {
        let v = vec![0.1, 0.2, 0.3];
        let rs: Vec<_> = (0..7).map(|i| params(v.clone(), i + 1, i as AgentId)).collect();
        assert_eq!(aggregate_weighted(&rs, 0).unwrap().values, v);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(aggregate_weighted(&[], 0), Err(InterimError::Empty));
        let a = params(vec![1.0], 1, 1);
        let mut b = InterimResult::gradients(vec![1.0], 0, 1, 1, 0, 2);
        assert!(matches!(aggregate_weighted(&[a.clone(), b.clone()], 0), Err(InterimError::MixedKinds(..))));
        b = params(vec![1.0, 2.0], 1, 2);
        assert!(matches!(aggregate_weighted(&[a.clone(), b], 0), Err(InterimError::Shape { .. })));
        let act = InterimResult::per_sample(InterimKind::ActivationsWithoutLabels, vec![1.0, 2.0], 2, None, 0, 3);
        assert!(matches!(aggregate_weighted(&[act], 0), Err(InterimError::NotAggregatable(_))));
        let mut zero = a;
        zero.weight = 0;
        assert!(matches!(aggregate_weighted(&[zero], 0), Err(InterimError::ZeroWeight { .. })));
    }

    #[test]
    fn labels_follow_kind() {
        let with = InterimResult::per_sample(InterimKind::ActivationsWithLabels, vec![1.0, 2.0], 1, Some(vec![0.0, 1.0]), 0, 1);
        assert!(with.check_well_formed().is_ok());
        let missing = InterimResult::per_sample(InterimKind::ActivationsWithLabels, vec![1.0, 2.0], 1, None, 0, 1);
        assert!(missing.check_well_formed().is_err());
        let extra = InterimResult::per_sample(InterimKind::PseudoResiduals, vec![1.0], 1, Some(vec![1.0]), 0, 1);
        assert!(extra.check_well_formed().is_err());
    }

    fn mlp() -> Model {
        let spec = ModelSpec::mlp(vec![2, 3, 1], Activation::Relu, LossKind::Mse);
        Model::init(&spec, &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
    }

    #[test]
    fn self_replace_and_round_trip() {
        let mut m = mlp();
        let before = m.clone();
        let own = InterimResult::parameters(m.flatten_parameters(), 0, 2, 1, 0, 0);
        apply_interim(&mut m, &own, ApplyMode::ReplaceParameters).unwrap();
        assert_eq!(m, before);

        let payload: Vec<f64> = (0..m.parameter_len()).map(|i| i as f64 * 0.37 - 1.0).collect();
        let r = InterimResult::parameters(payload.clone(), 0, 2, 1, 0, 0);
        apply_interim(&mut m, &r, ApplyMode::ReplaceParameters).unwrap();
        assert_eq!(m.flatten_parameters(), payload);
    }

    #[test]
    fn zero_gradient_step_is_noop() {
        let mut m = mlp();
        let before = m.clone();
        let g = InterimResult::gradients(vec![0.0; m.parameter_len()], 0, 2, 1, 0, 0);
        apply_interim(&mut m, &g, ApplyMode::GradientStep { learning_rate: 0.3 }).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn partial_range_step_leaves_other_layers() {
        let mut m = mlp();
        let head = m.flatten_range(0, 1).unwrap();
        let tail_len = m.flatten_range(1, 2).unwrap().len();
        let g = InterimResult::gradients(vec![1.0; tail_len], 1, 2, 1, 0, 0);
        apply_interim(&mut m, &g, ApplyMode::GradientStep { learning_rate: 0.5 }).unwrap();
        assert_eq!(m.flatten_range(0, 1).unwrap(), head);
    }

    #[test]
    fn mode_kind_mismatch() {
        let mut m = mlp();
        let g = InterimResult::gradients(vec![0.0; m.parameter_len()], 0, 2, 1, 0, 0);
        assert!(apply_interim(&mut m, &g, ApplyMode::ReplaceParameters).is_err());
    }

    #[test]
    fn policies() {
        let rs = vec![params(vec![1.0], 1, 3), params(vec![2.0], 1, 1), params(vec![6.0], 1, 2)];
        let ind = update_policy(&rs, UpdatePolicy::Individual, 0).unwrap();
        assert_eq!(ind.iter().map(|s| s.sources[0]).collect::<Vec<_>>(), vec![3, 1, 2]);
        let bat = update_policy(&rs, UpdatePolicy::Batched, 0).unwrap();
        assert_eq!(bat.len(), 1);
        assert_eq!(bat[0].result.values, vec![3.0]);

        let one = &rs[..1];
        assert_eq!(
            update_policy(one, UpdatePolicy::Batched, 3).unwrap()[0].result.values,
            update_policy(one, UpdatePolicy::Individual, 3).unwrap()[0].result.values
        );
    }

    #[test]
    fn definition_contract() {
        let def = InterimResultDefinition {
            kind: InterimKind::ActivationsWithLabels,
            shape: ShapeContract::PerSample { width: 2 },
            value_range: "real".into(),
        };
        let ok = InterimResult::per_sample(InterimKind::ActivationsWithLabels, vec![1.0; 4], 2, Some(vec![0.0; 2]), 0, 1);
        assert!(def.conforms(&ok).is_ok());
        let wide = InterimResult::per_sample(InterimKind::ActivationsWithLabels, vec![1.0; 3], 3, Some(vec![0.0]), 0, 1);
        assert!(def.conforms(&wide).is_err());
    }
}
