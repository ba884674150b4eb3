//! Local training steps shared by the round schedules.

use crate::ml_core::{
    apply_update, backward, forward, loss_value, Dataset, GradientSet, Matrix, MlError, Model, Parameterized,
};

use super::message::Hyperparameters;

/// Epochs of mini-batch SGD on layers `[lo, L)`; earlier layers stay fixed.
///
/// Returns the mean pre-update batch loss of the final epoch.
pub fn train_local(model: &mut Model, data: &Dataset, hyper: &Hyperparameters, lo: usize) -> Result<f64, MlError> {
    let ranges = data.batch_ranges(hyper.batch_size);
    let mut last = 0.0;
    for _ in 0..hyper.local_epochs.max(1) {
        let mut total = 0.0;
        for &(a, b) in &ranges {
            let (x, y) = data.batch(a, b);
            let (mut grads, loss) = backward(model, &x, y)?;
            freeze_head(&mut grads, lo);
            apply_update(model, &grads, hyper.learning_rate)?;
            total += loss;
        }
        last = total / ranges.len() as f64;
    }
    Ok(last)
}

/// Full-dataset gradient restricted to layers `[lo, L)`, flattened.
pub fn local_gradient(model: &Model, data: &Dataset, lo: usize) -> Result<(Vec<f64>, f64), MlError> {
    let (grads, loss) = backward(model, &data.features, &data.targets)?;
    let flat: Vec<f64> = grads.layers[lo..]
        .iter()
        .flat_map(|g| g.weights.as_slice().iter().chain(&g.bias).copied())
        .collect();
    Ok((flat, loss))
}

fn freeze_head(grads: &mut GradientSet, lo: usize) {
    for g in grads.layers.iter_mut().take(lo) {
        g.weights.as_mut_slice().fill(0.0);
        g.bias.fill(0.0);
    }
}

/// Companion predictions used as the single input feature of the shared model.
pub fn companion_features(companion: &Model, data: &Dataset) -> Result<Dataset, MlError> {
    let preds = forward(companion, &data.features)?;
    Ok(Dataset {
        features: Matrix::column(&preds),
        targets: data.targets.clone(),
        sample_ids: data.sample_ids.clone(),
    })
}

/// Trains the companion on raw data, then the shared model on companion outputs.
pub fn train_two_complete(
    companion: &mut Model,
    shared: &mut Model,
    data: &Dataset,
    hyper: &Hyperparameters,
) -> Result<f64, MlError> {
    train_local(companion, data, hyper, 0)?;
    let lifted = companion_features(companion, data)?;
    train_local(shared, &lifted, hyper, 0)
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64, MlError> {
    let preds = forward(model, &data.features)?;
    loss_value(model.spec.loss, &preds, &data.targets)
}

/// FNV-1a over the bit patterns of the parameters.
pub fn fingerprint<P: Parameterized + ?Sized>(p: &P) -> u64 {
    fingerprint_values(&p.flatten_parameters())
}

pub fn fingerprint_values(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for byte in v.to_bits().to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ml_core::{gen_synthetic_dataset, Activation, DataSpec, LossKind, ModelSpec, Task};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn data() -> Dataset {
        gen_synthetic_dataset(
            &DataSpec {
                n: 64,
                d: 3,
                task: Task::Regression,
                noise: 0.0,
                skew: 0.0,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn training_lowers_loss() {
        let d = data();
        let mut m = Model::init(&ModelSpec::linear(3, LossKind::Mse), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = evaluate(&m, &d).unwrap();
        let hyper = Hyperparameters {
            learning_rate: 0.1,
            local_epochs: 20,
            batch_size: 16,
        };
        train_local(&mut m, &d, &hyper, 0).unwrap();
        assert!(evaluate(&m, &d).unwrap() < before * 0.1);
    }

    #[test]
    fn frozen_head_is_untouched() {
        let d = data();
        let spec = ModelSpec::mlp(vec![3, 4, 1], Activation::Relu, LossKind::Mse);
        let mut m = Model::init(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let head = m.flatten_range(0, 1).unwrap();
        train_local(&mut m, &d, &Hyperparameters::default(), 1).unwrap();
        assert_eq!(m.flatten_range(0, 1).unwrap(), head);
        let (g, _) = local_gradient(&m, &d, 1).unwrap();
        assert_eq!(g.len(), m.flatten_range(1, 2).unwrap().len());
    }

    #[test]
    fn fingerprint_sees_single_bit() {
        let a = fingerprint_values(&[1.0, 2.0]);
        let b = fingerprint_values(&[1.0, f64::from_bits(2.0f64.to_bits() ^ 1)]);
        assert_ne!(a, b);
    }
}
