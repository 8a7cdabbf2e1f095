mod common;

#[test]
fn dual_stage_retention_is_uniform_per_class() {
    let [p0, p1] = common::dual_retention_p_values(5000);
    assert!(p0 > 0.01, "majority class p = {p0}");
    assert!(p1 > 0.01, "minority class p = {p1}");
}

#[test]
fn reservoir_retention_is_uniform() {
    let p = common::reservoir_retention_p_value(5000);
    assert!(p > 0.01, "p = {p}");
}
