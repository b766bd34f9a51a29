use mafn_core::verify::{self, Check};

fn assert_all(checks: Vec<Check>) {
    let report = verify::report(&checks);
    println!("{report}");
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    assert!(failed.is_empty(), "failed: {failed:?}\n{report}");
}

#[test]
fn reduction_to_plain_attention() {
    assert_all(verify::reduction_checks());
}

#[test]
fn correlation_matches_brute_force() {
    assert_all(verify::correlation_checks());
}

#[test]
fn rotation_properties() {
    assert_all(verify::rotation_checks());
}

#[test]
fn transcriptions_match_graph_modules() {
    assert_all(verify::transcription_checks());
}

#[test]
fn metric_properties() {
    assert_all(verify::metric_checks());
}

#[test]
fn injected_sign_flip_is_named() {
    let c = verify::mutation_check();
    assert!(c.passed, "{}", c.line());
    assert!(c.detail.contains("grad:sigmoid"), "{}", c.line());
}

#[test]
fn gradient_suite_with_custom_ops() {
    assert_all(verify::gradient_checks(verify::GRAD_SEEDS));
}
