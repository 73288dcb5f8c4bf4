mod common;

#[test]
fn every_schedule_in_the_grid_satisfies_the_window_algebra() {
    let s = common::window_suite();
    assert_eq!(s.configs, 60 * 4 * 10 * 4);
    assert!(s.partition_failures.is_empty(), "{:?}", &s.partition_failures[..s.partition_failures.len().min(5)]);
    assert!(s.coverage_failures.is_empty(), "{:?}", &s.coverage_failures[..s.coverage_failures.len().min(5)]);
    assert!(s.full_range_failures.is_empty(), "{:?}", s.full_range_failures);
    assert!(s.exact_mismatches.is_empty(), "{:?}", &s.exact_mismatches[..s.exact_mismatches.len().min(5)]);
}

#[test]
fn bins_outside_the_window_get_exactly_zero_gradient() {
    let (worst, live) = common::masked_bin_gradients(9);
    assert_eq!(worst, 0.0);
    assert!(live > 0);
}
