use coda_core::gradcheck::{op_names, run_suite, GRAD_TOL};

#[test]
fn every_op_matches_finite_differences() {
    let results = run_suite(None, 7).unwrap();
    assert_eq!(results.len(), op_names().len());
    for r in &results {
        println!("{:<24} {:.3e}", r.op, r.max_rel_error);
    }
    let failing: Vec<_> = results.iter().filter(|r| r.max_rel_error >= GRAD_TOL).collect();
    assert!(failing.is_empty(), "{failing:?}");
}

#[test]
fn suite_is_deterministic_per_seed() {
    let a = run_suite(Some("conv2d_dilated"), 3).unwrap();
    let b = run_suite(Some("conv2d_dilated"), 3).unwrap();
    assert_eq!(a, b);
}
