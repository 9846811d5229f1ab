use std::io::Write;

use realtalk::acceptance::run_criterion;

/// Runs every acceptance criterion in order and reports one line each.
/// Lines go straight to the stdout handle so they appear without
/// `--nocapture`.
#[test]
fn acceptance_suite() {
    let mut failed = Vec::new();
    writeln!(std::io::stdout().lock()).unwrap();
    for id in 1..=10u8 {
        let r = run_criterion(id);
        let mut out = std::io::stdout().lock();
        writeln!(out, "{}", r.line()).unwrap();
        out.flush().unwrap();
        if !r.passed {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
