use indexnet_oracles::suites;

#[test]
fn aggregate_forms_equal_naive_sums() {
    let out = suites::simplification(24, 301).unwrap();
    assert!(out.pass, "{}", out.report());
}

#[test]
fn convolution_and_pool_kernels_equal_loops() {
    let out = suites::kernels(40, 302).unwrap();
    assert!(out.pass, "{}", out.report());
}

#[test]
fn batch_norm_contraction_two_routes() {
    let out = suites::bn_jacobian(20, 303).unwrap();
    assert!(out.pass, "{}", out.report());
}

#[test]
fn gradcheck_reports_are_reproducible() {
    let a = suites::fnn_gradcheck(304).unwrap();
    let b = suites::fnn_gradcheck(304).unwrap();
    assert_eq!(a.lines, b.lines);
    assert!(a.pass, "{}", a.report());
}
