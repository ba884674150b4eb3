mod common;

use proptest::prelude::*;

use cdml::interim::{aggregate_weighted, InterimResult};

fn arb_results() -> impl Strategy<Value = Vec<(Vec<f64>, u64)>> {
    (1usize..10).prop_flat_map(|len| prop::collection::vec((prop::collection::vec(-100.0f64..100.0, len), 1u64..1000), 1..8))
}

fn build(items: &[(Vec<f64>, u64)]) -> Vec<InterimResult> {
    items
        .iter()
        .enumerate()
        .map(|(i, (v, w))| InterimResult::parameters(v.clone(), 0, 1, *w, 0, i as u32))
        .collect()
}

proptest! {
    #[test]
    fn permutation_invariant(items in arb_results(), rot in 0usize..8) {
        let a = aggregate_weighted(&build(&items), 0).unwrap();
        let mut turned = items.clone();
        let k = rot % turned.len();
        turned.rotate_left(k);
        turned.reverse();
        let b = aggregate_weighted(&build(&turned), 0).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn duplicating_inputs_keeps_the_mean(items in arb_results()) {
        let a = aggregate_weighted(&build(&items), 0).unwrap();
        let doubled: Vec<_> = items.iter().chain(items.iter()).cloned().collect();
        let b = aggregate_weighted(&build(&doubled), 0).unwrap();
        prop_assert_eq!(b.weight, 2 * a.weight);
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn identical_payloads_aggregate_exactly(v in prop::collection::vec(-1e6f64..1e6, 1..10), ws in prop::collection::vec(1u64..100, 1..6)) {
        let items: Vec<_> = ws.iter().map(|&w| (v.clone(), w)).collect();
        let a = aggregate_weighted(&build(&items), 0).unwrap();
        prop_assert_eq!(a.values, v);
    }

    #[test]
    fn matches_flat_oracle(items in arb_results()) {
        let a = aggregate_weighted(&build(&items), 0).unwrap();
        let (vs, ws): (Vec<_>, Vec<_>) = items.into_iter().unzip();
        let want = common::weighted_mean(&vs, &ws);
        for (x, y) in a.values.iter().zip(&want) {
            prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }
}

#[test]
fn equal_weights_give_arithmetic_mean() {
    let items = vec![(vec![1.0, 4.0], 5), (vec![2.0, 5.0], 5), (vec![6.0, 0.0], 5)];
    let a = aggregate_weighted(&build(&items), 0).unwrap();
    assert_eq!(a.values, vec![3.0, 3.0]);
}
