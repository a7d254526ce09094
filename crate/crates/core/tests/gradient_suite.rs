use aapl_core::gradcheck::{check_names, run_suite, POINTS_PER_CHECK, TOLERANCE};

#[test]
fn every_operation_and_the_objective_pass() {
    let summary = run_suite(0).unwrap();
    assert_eq!(summary.rows.len(), check_names().len());
    for row in &summary.rows {
        assert_eq!(row.points, POINTS_PER_CHECK);
        assert!(row.max_rel_error < TOLERANCE, "{}: {}", row.name, row.max_rel_error);
    }
    assert!(summary.passed());
}

#[test]
fn suite_is_deterministic_per_seed() {
    assert_eq!(run_suite(7).unwrap(), run_suite(7).unwrap());
    assert!(run_suite(8).unwrap().passed());
}
