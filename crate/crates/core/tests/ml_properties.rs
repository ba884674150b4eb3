mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cdml::ml_core::{
    apply_update, backward, backward_segment, forward, forward_segment, forward_segment_cached, gen_synthetic_dataset,
    ground_truth, loss_gradient, partition, split_model, Activation, DataSpec, GradientSet, LossKind, Matrix, Model,
    ModelSpec, Parameterized, Task,
};

fn arb_model() -> impl Strategy<Value = (Model, Matrix, Vec<f64>, Vec<usize>)> {
    (
        prop::collection::vec(1usize..6, 2..6),
        prop::collection::vec(0usize..3, 4),
        any::<bool>(),
        any::<u64>(),
        1usize..8,
    )
        .prop_map(|(mut widths, acts, bce, seed, rows)| {
            widths.push(1);
            let loss = if bce { LossKind::BinaryCrossEntropy } else { LossKind::Mse };
            let mut spec = ModelSpec::mlp(widths.clone(), Activation::Identity, loss);
            let table = [Activation::Identity, Activation::Relu, Activation::Sigmoid];
            for (a, &i) in spec.activations.iter_mut().zip(acts.iter().cycle()) {
                *a = table[i];
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = Model::init(&spec, &mut rng).unwrap();
            let data = gen_synthetic_dataset(
                &DataSpec {
                    n: rows,
                    d: widths[0],
                    task: if bce { Task::Classification } else { Task::Regression },
                    noise: 0.1,
                    skew: 0.0,
                },
                seed,
            )
            .unwrap();
            let layers = widths.len() - 1;
            let cuts: Vec<usize> = (1..layers).filter(|c| (seed >> c) & 1 == 1).collect();
            (model, data.features, data.targets, cuts)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composed_segments_forward_bitwise((model, x, _y, cuts) in arb_model()) {
        let segs = split_model(&model, &cuts).unwrap();
        let mut h = x.clone();
        for s in &segs {
            h = forward_segment(s, &h).unwrap();
        }
        let whole = forward(&model, &x).unwrap();
        prop_assert_eq!(h.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        whole.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn chained_backward_matches_backward((model, x, y, cuts) in arb_model()) {
        let segs = split_model(&model, &cuts).unwrap();
        let mut h = x.clone();
        let mut caches = Vec::new();
        for s in &segs {
            let (o, c) = forward_segment_cached(s, &h).unwrap();
            caches.push(c);
            h = o;
        }
        let mut up = Matrix::column(&loss_gradient(model.spec.loss, h.as_slice(), &y).unwrap());
        let mut parts = Vec::new();
        for (s, c) in segs.iter().zip(&caches).rev() {
            let (g, d) = backward_segment(s, c, &up).unwrap();
            parts.push(g);
            up = d;
        }
        parts.reverse();
        let chained = GradientSet::concat(parts).unwrap().flatten();
        let (g, _) = backward(&model, &x, &y).unwrap();
        prop_assert!(common::max_rel_err(&chained, &g.flatten(), 1e-300) <= 1e-10);
    }

    #[test]
    fn update_then_negated_update_restores((model, x, y, _cuts) in arb_model(), lr in 1e-3f64..1.0) {
        let (g, _) = backward(&model, &x, &y).unwrap();
        let mut neg = g.clone();
        for l in &mut neg.layers {
            l.weights = l.weights.map(|v| -v);
            l.bias.iter_mut().for_each(|b| *b = -*b);
        }
        let mut m = model.clone();
        apply_update(&mut m, &g, lr).unwrap();
        apply_update(&mut m, &neg, lr).unwrap();
        let diff = m.flatten_parameters().iter().zip(model.flatten_parameters()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(diff <= 1e-12);
    }

    #[test]
    fn datasets_are_pure_in_spec_and_seed(n in 1usize..50, d in 1usize..6, seed in any::<u64>(), noise in 0.0f64..1.0) {
        let spec = DataSpec { n, d, task: Task::Regression, noise, skew: 0.0 };
        prop_assert_eq!(gen_synthetic_dataset(&spec, seed).unwrap(), gen_synthetic_dataset(&spec, seed).unwrap());
    }
}

#[test]
fn iid_shards_have_global_label_mean() {
    let spec = DataSpec {
        n: 2000,
        d: 3,
        task: Task::Classification,
        noise: 0.5,
        skew: 0.0,
    };
    let data = gen_synthetic_dataset(&spec, 21).unwrap();
    let p = data.label_mean();
    for shard in partition(&data, 4, 0.0, 21).unwrap() {
        let m = shard.len() as f64;
        let sigma = (p * (1.0 - p) / m).sqrt();
        assert!((shard.label_mean() - p).abs() <= 3.0 * sigma, "shard mean {} vs {p}", shard.label_mean());
    }
}

/// Ordinary least squares through the normal equations, by Gaussian elimination.
fn least_squares(x: &Matrix, y: &[f64]) -> Vec<f64> {
    let d = x.cols() + 1;
    let mut a = vec![vec![0.0; d + 1]; d];
    for r in 0..x.rows() {
        let mut row: Vec<f64> = x.row(r).to_vec();
        row.push(1.0);
        for i in 0..d {
            for j in 0..d {
                a[i][j] += row[i] * row[j];
            }
            a[i][d] += row[i] * y[r];
        }
    }
    for c in 0..d {
        let p = (c..d).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        for r in 0..d {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..=d {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
    }
    (0..d).map(|i| a[i][d] / a[i][i]).collect()
}

#[test]
fn noiseless_regression_recovers_truth() {
    let spec = DataSpec {
        n: 100,
        d: 4,
        task: Task::Regression,
        noise: 0.0,
        skew: 0.0,
    };
    let data = gen_synthetic_dataset(&spec, 5).unwrap();
    let (w, b) = ground_truth(&spec, 5);
    let fit = least_squares(&data.features, &data.targets);
    for (got, want) in fit.iter().zip(w.iter().chain(std::iter::once(&b))) {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn library_gradient_matches_hand_backprop() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let spec = ModelSpec::mlp(vec![3, 4, 2, 1], Activation::Sigmoid, LossKind::Mse);
    let model = Model::init(&spec, &mut rng).unwrap();
    let x = Matrix::from_rows(&[vec![0.1, -0.3, 0.7], vec![1.0, 0.2, -0.5]]).unwrap();
    let y = [0.4, -0.2];
    let (g, _) = backward(&model, &x, &y).unwrap();
    let hand = common::fd_free_gradient(&model, &x, &y);
    assert!(common::max_rel_err(&g.flatten(), &hand, 1e-12) < 1e-12);
}
