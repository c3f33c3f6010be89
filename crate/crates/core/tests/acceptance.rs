use std::io::Write;

use memforce::acceptance::acceptance_suite;

/// Prints one line per criterion. Writes go to the stderr handle directly,
/// which the test harness does not capture, so the verdicts show up in an
/// ordinary `cargo test` log.
#[test]
fn acceptance_criteria() {
    let suite = acceptance_suite(0);
    let verbose = std::env::var_os("MEMFORCE_ACCEPTANCE_VERBOSE").is_some();
    let mut err = std::io::stderr().lock();
    writeln!(err).unwrap();
    for c in &suite {
        writeln!(err, "{}", c.line()).unwrap();
    }
    for c in &suite {
        if c.pass && !verbose {
            continue;
        }
        writeln!(err, "{}. {}", c.id, c.title).unwrap();
        for check in &c.checks {
            writeln!(err, "    {}", check.line()).unwrap();
        }
    }
    assert!(suite.iter().all(|c| c.pass));
}
