use std::io::Write;

use obliq_cli::acceptance::{run_acceptance, Status, Tier};

/// Writes straight to the stderr handle so the lines survive output capture.
fn show(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

#[test]
fn full_tier_passes_every_criterion() {
    let report = run_acceptance(Tier::Full, Vec::new(), |c| show(&format!("[full] {}", c.line()))).unwrap();
    assert_eq!(report.criteria.len(), 15);
    let failed: Vec<_> = report.criteria.iter().filter(|c| c.status != Status::Pass).map(|c| c.line()).collect();
    assert!(failed.is_empty(), "failing criteria:\n{}", failed.join("\n"));
}

#[test]
fn quick_tier_passes_every_criterion() {
    let report = run_acceptance(Tier::Quick, Vec::new(), |_| {}).unwrap();
    for line in report.lines() {
        show(&format!("[quick] {line}"));
    }
    assert!(report.passed);
}

#[test]
fn broken_costs_fail_the_gate_and_skip_the_rest() {
    let env = vec![("OBLIQ_ACCEPT__costs".to_string(), "[[0, 1, 3], [1, 0, 1], [3, 1, 0]]".to_string())];
    let report = run_acceptance(Tier::Quick, env, |_| {}).unwrap();
    assert!(!report.passed);
    assert_eq!(report.criteria[0].status, Status::Fail);
    assert!(report.criteria[0].detail.contains("(0, 1, 2)"), "{}", report.criteria[0].detail);
    assert!(report.criteria[1..].iter().all(|c| c.status == Status::Skip));
}
