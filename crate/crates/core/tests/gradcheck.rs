use openvocab::config::RunConfig;
use openvocab::experiment::gradcheck_suite;

/// Central differences at ε = 1e-5 in 64-bit agree to this relative error.
const MAX_REL: f64 = 1e-4;

#[test]
fn every_component_matches_central_differences() {
    let report = gradcheck_suite(&RunConfig::desk()).unwrap();
    let names: Vec<&str> = report.iter().map(|e| e.component).collect();
    assert_eq!(names, ["llm_prefix", "prompt_transformer", "temporal_attention", "proj_spatial"]);
    for e in &report {
        assert!(!e.report.coords.is_empty(), "{}", e.component);
        assert!(e.report.max_rel_error < MAX_REL, "{}: {}", e.component, e.report.max_rel_error);
    }
}
