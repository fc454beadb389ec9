mod common;

use common::gradcheck::{check, composite_cases, op_cases, random, REL_TOL};
use cpcm::autodiff::Graph;
use cpcm::seed;

#[test]
fn every_primitive_matches_finite_differences() {
    for case in op_cases() {
        let worst = check(&case).unwrap_or_else(|e| panic!("{e}"));
        assert!(worst <= REL_TOL, "{}", case.name);
    }
}

#[test]
fn composite_graphs_match_finite_differences() {
    for case in composite_cases() {
        check(&case).unwrap_or_else(|e| panic!("{e}"));
    }
}

#[test]
fn detach_blocks_gradient() {
    let a = random(3, 3, -1.0, 1.0, &mut seed::rng(5));
    let mut g = Graph::new();
    let x = g.param(a);
    let d = g.detach(x);
    let y = g.mul(x, d).unwrap();
    let loss = g.mean_all(y).unwrap();
    g.backward(loss).unwrap();
    // d(x * stop(x))/dx = stop(x), not 2x.
    let grad = g.grad(x).unwrap();
    for (gv, xv) in grad.data().iter().zip(g.value(x).data()) {
        assert!((gv - xv / 9.0).abs() < 1e-15);
    }
}
