//! Reverse-mode gradients against central finite differences on random graphs.

mod common;

use common::graphs::{recipe, relative_error, STEP_KINDS};
use sidexplain::autodiff::Graph;
use sidexplain::Tensor;

#[test]
fn hundred_random_graphs_match_finite_differences() {
    let mut failures = Vec::new();
    for seed in 0..100 {
        let e = relative_error(seed);
        if !(e < 1e-3) {
            failures.push((seed, e, recipe(seed).steps));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn recipes_cover_every_op() {
    let mut seen = std::collections::HashSet::new();
    for seed in 0..100 {
        for s in recipe(seed).steps {
            seen.insert(std::mem::discriminant(&s));
        }
    }
    assert_eq!(seen.len(), STEP_KINDS);
}

#[test]
fn unused_input_gets_no_gradient() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let b = g.input(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
    let s = g.sum(a).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.wrt(b).is_none());
}
