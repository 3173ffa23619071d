mod common;

use common::{end_to_end_gradient_error, op_cases};

const INSTANCES: u64 = 20;

#[test]
fn every_op_matches_central_differences() {
    let mut failures = Vec::new();
    for (name, case) in op_cases() {
        let worst = (0..INSTANCES)
            .map(|seed| case(seed).unwrap_or_else(|e| panic!("{name} instance {seed}: {e}")))
            .fold(0.0, f64::max);
        println!("{name:<24} max rel err {worst:.3e}");
        if worst >= 1e-6 {
            failures.push((name, worst));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn micro_model_matches_central_differences() {
    let err = end_to_end_gradient_error(7).unwrap();
    println!("end-to-end max rel err {err:.3e}");
    assert!(err < 1e-4, "{err}");
}
