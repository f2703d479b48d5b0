use r2h_core::gradcheck::{run_suite, CheckGroup};

#[test]
fn finite_difference_suite_passes_every_check() {
    let report = run_suite(7).unwrap();
    for o in &report.outcomes {
        println!("{:<24} {:?} rel={:.3e} tol={:e} probes={}", o.name, o.group, o.max_rel_error, o.tolerance, o.probes);
    }
    println!("elapsed {:?}", report.elapsed);
    assert!(report.passed(), "failing checks: {:?}", report.failures());
    for group in [CheckGroup::Primitive, CheckGroup::Module, CheckGroup::EndToEnd] {
        assert!(report.outcomes.iter().any(|o| o.group == group));
    }
}
