mod common;

use common::{oracle_instances, relu_oracle, softmax_oracle};
use tvseg::activation::{
    reg_relu_iterative, reg_softmax_iterative_value, relu, softmax, RegActConfig,
};
use tvseg::grid::tv_value;
use tvseg::Field3;

const ITERATIONS: usize = 100_000;

fn primal_softmax(a: &Field3, o: &Field3, lambda: f64) -> f64 {
    let ent: f64 = a
        .as_slice()
        .iter()
        .map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 })
        .sum();
    -a.dot(o) + ent + lambda * tv_value(a)
}

#[test]
fn iterative_softmax_matches_brute_force() {
    let mut worst: f64 = 0.0;
    for (o, lambda) in oracle_instances() {
        let cfg = RegActConfig::iterative(lambda, 0.125, ITERATIONS);
        let (a, _) = reg_softmax_iterative_value(&o, &cfg).unwrap();
        let oracle = softmax_oracle(&o, lambda);
        let d = a.max_abs_diff(&oracle);
        worst = worst.max(d);
        assert!(d <= 1e-3, "lambda {lambda}: diff {d}\n{a:?}\n{oracle:?}");
        // the oracle is a true minimizer: the solver cannot beat it by much
        assert!(primal_softmax(&oracle, &o, lambda) <= primal_softmax(&a, &o, lambda) + 1e-9);
    }
    eprintln!("softmax worst diff {worst:.3e}");
}

#[test]
fn iterative_relu_matches_brute_force() {
    let mut worst: f64 = 0.0;
    for (o, lambda) in oracle_instances() {
        let cfg = RegActConfig::iterative(lambda, 0.125, ITERATIONS);
        let (a, _) = reg_relu_iterative(&o, &cfg).unwrap();
        let oracle = relu_oracle(&o, lambda);
        let d = a.max_abs_diff(&oracle);
        worst = worst.max(d);
        assert!(d <= 1e-3, "lambda {lambda}: diff {d}\n{a:?}\n{oracle:?}");
    }
    eprintln!("relu worst diff {worst:.3e}");
}

#[test]
fn oracles_reduce_without_regularization() {
    for (o, _) in oracle_instances().into_iter().take(7) {
        assert!(softmax_oracle(&o, 0.0).max_abs_diff(&softmax(&o)) < 1e-8);
        assert!(relu_oracle(&o, 0.0).max_abs_diff(&relu(&o)) < 1e-8);
    }
}
