mod common;

#[test]
fn losses_match_brute_force_loops() {
    let s = common::loss_suite(31, 200);
    assert!(s.rec_err < 1e-10, "{}", s.rec_err);
    assert!(s.rec_graph_err < 1e-10, "{}", s.rec_graph_err);
    assert!(s.clreg_err < 1e-10, "{}", s.clreg_err);
    assert!(s.clreg_graph_err < 1e-10, "{}", s.clreg_graph_err);
}

#[test]
fn identical_pair_of_views_costs_two_log_two() {
    let s = common::loss_suite(1, 0);
    assert!((s.identical_pair - 2.0 * 2f64.ln()).abs() < 1e-12, "{}", s.identical_pair);
}

#[test]
fn saturated_probabilities_stay_finite() {
    let p = [0.0, 1.0, 0.0, 0.0];
    let loss = common::brute_rec_loss(&p, 2);
    let ours = slime4rec::objectives::rec_loss(&p, 2, slime4rec::autodiff::RecLossForm::BinarySum).unwrap();
    assert!(loss.is_finite() && (loss - ours).abs() < 1e-10);
}
