//! Independent reference computations shared by the integration and acceptance tests.
#![allow(dead_code)]

use cdml::ml_core::{forward, loss_value, Dataset, LossKind, Matrix, Model, Parameterized};

/// Mean loss of `model` on `(x, y)`.
pub fn loss_at(model: &Model, x: &Matrix, y: &[f64]) -> f64 {
    loss_value(model.spec.loss, &forward(model, x).unwrap(), y).unwrap()
}

/// Five-point central differences of the mean loss over every parameter.
pub fn fd_gradient(model: &Model, x: &Matrix, y: &[f64], h: f64) -> Vec<f64> {
    let base = model.flatten_parameters();
    let mut probe = model.clone();
    let mut at = |p: &mut Vec<f64>, i: usize, v: f64| {
        p[i] = v;
        probe.load_parameters(p).unwrap();
        loss_at(&probe, x, y)
    };
    let mut p = base.clone();
    let mut g = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let b = base[i];
        let f2 = at(&mut p, i, b + 2.0 * h);
        let f1 = at(&mut p, i, b + h);
        let m1 = at(&mut p, i, b - h);
        let m2 = at(&mut p, i, b - 2.0 * h);
        p[i] = b;
        g.push((-f2 + 8.0 * f1 - 8.0 * m1 + m2) / (12.0 * h));
    }
    g
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// `sum_i w_i v_i / sum_i w_i`, coordinate by coordinate, in plain loops.
pub fn weighted_mean(vectors: &[Vec<f64>], weights: &[u64]) -> Vec<f64> {
    let total: f64 = weights.iter().map(|&w| w as f64).sum();
    let mut out = vec![0.0; vectors[0].len()];
    for (v, &w) in vectors.iter().zip(weights) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += (w as f64) * x;
        }
    }
    out.iter().map(|o| o / total).collect()
}

/// Plain full-model SGD: one step per batch, batches given as row lists.
pub fn sgd(model: &mut Model, data: &Dataset, lr: f64, batches: &[Vec<usize>]) {
    for rows in batches {
        let sub = data.subset(rows);
        let g = fd_free_gradient(model, &sub.features, &sub.targets);
        let mut p = model.flatten_parameters();
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi -= lr * gi;
        }
        model.load_parameters(&p).unwrap();
    }
}

/// Hand-written backpropagation for dense layers, independent of the library's backward pass.
pub fn fd_free_gradient(model: &Model, x: &Matrix, y: &[f64]) -> Vec<f64> {
    let n = x.rows();
    let spec = &model.spec;
    // Forward, keeping pre-activations and outputs per layer.
    let mut acts: Vec<Vec<Vec<f64>>> = vec![(0..n).map(|r| x.as_slice()[r * x.cols()..(r + 1) * x.cols()].to_vec()).collect()];
    let mut pre: Vec<Vec<Vec<f64>>> = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let (out_w, in_w) = (layer.weights.rows(), layer.weights.cols());
        let w = layer.weights.as_slice();
        let mut z_all = Vec::with_capacity(n);
        let mut a_all = Vec::with_capacity(n);
        for a_prev in &acts[l] {
            let z: Vec<f64> = (0..out_w)
                .map(|o| layer.bias[o] + (0..in_w).map(|i| w[o * in_w + i] * a_prev[i]).sum::<f64>())
                .collect();
            let a: Vec<f64> = z.iter().map(|&v| act(spec.activation(l), v)).collect();
            z_all.push(z);
            a_all.push(a);
        }
        pre.push(z_all);
        acts.push(a_all);
    }
    let last = model.layers.len();
    // dL/da for the output.
    let mut delta: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            let p = acts[last][r][0];
            vec![match spec.loss {
                LossKind::Mse => 2.0 * (p - y[r]) / n as f64,
                LossKind::BinaryCrossEntropy => (p - y[r]) / (p * (1.0 - p) * n as f64),
            }]
        })
        .collect();
    let mut grads: Vec<Vec<f64>> = vec![Vec::new(); last];
    for l in (0..last).rev() {
        let layer = &model.layers[l];
        let (out_w, in_w) = (layer.weights.rows(), layer.weights.cols());
        let w = layer.weights.as_slice();
        let dz: Vec<Vec<f64>> = (0..n)
            .map(|r| (0..out_w).map(|o| delta[r][o] * act_deriv(spec.activation(l), pre[l][r][o], acts[l + 1][r][o])).collect())
            .collect();
        let mut gw = vec![0.0; out_w * in_w];
        let mut gb = vec![0.0; out_w];
        for r in 0..n {
            for o in 0..out_w {
                gb[o] += dz[r][o];
                for i in 0..in_w {
                    gw[o * in_w + i] += dz[r][o] * acts[l][r][i];
                }
            }
        }
        gw.extend(gb);
        grads[l] = gw;
        delta = (0..n)
            .map(|r| (0..in_w).map(|i| (0..out_w).map(|o| w[o * in_w + i] * dz[r][o]).sum()).collect())
            .collect();
    }
    grads.concat()
}

fn act(a: cdml::ml_core::Activation, z: f64) -> f64 {
    use cdml::ml_core::Activation::*;
    match a {
        Identity => z,
        Relu => z.max(0.0),
        Sigmoid => 1.0 / (1.0 + (-z).exp()),
    }
}

fn act_deriv(a: cdml::ml_core::Activation, z: f64, out: f64) -> f64 {
    use cdml::ml_core::Activation::*;
    match a {
        Identity => 1.0,
        Relu => f64::from(u8::from(z > 0.0)),
        Sigmoid => out * (1.0 - out),
    }
}

/// Relative distance `||a - b|| / max(||b||, tiny)` in the max norm.
pub fn rel_dist(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    num / den
}
