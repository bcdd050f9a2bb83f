use std::time::Instant;

use lgdea_core::diagnostics::{gradcheck_suite, GRADCHECK_TOLERANCE};

#[test]
fn every_objective_matches_finite_differences() {
    let start = Instant::now();
    let checks = gradcheck_suite(0).unwrap();
    for c in &checks {
        println!(
            "{:<18} max rel err {:.3e} over {} coords, worst {:?}",
            c.term, c.max_rel_error, c.coords_checked, c.worst
        );
    }
    assert_eq!(checks.len(), 6);
    for c in &checks {
        assert!(c.coords_checked > 0, "{} checked nothing", c.term);
        assert!(c.max_rel_error < GRADCHECK_TOLERANCE, "{}: {:?}", c.term, c);
    }
    println!("elapsed {:?}", start.elapsed());
}
