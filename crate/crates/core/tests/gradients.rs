mod common;

#[test]
fn every_network_passes_finite_differences_for_ten_seeds() {
    let v = common::criteria::gradient_suite(10);
    assert!(v.pass, "{}", v.detail);
}
