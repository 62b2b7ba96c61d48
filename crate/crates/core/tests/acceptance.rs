use std::io::Write;

use kbzakai::acceptance::run_all;

/// Runs criteria 1 to 10 and prints one pass/fail line per criterion. The
/// lines go straight to stdout so they show without `--nocapture`.
#[test]
fn acceptance_criteria() {
    let results = run_all();
    let mut out = std::io::stdout().lock();
    writeln!(out).unwrap();
    for r in &results {
        writeln!(out, "{r}").unwrap();
    }
    let failed: Vec<u32> = results.iter().filter(|r| !r.passed).map(|r| r.id).collect();
    writeln!(out, "acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len()).unwrap();
    assert_eq!(results.iter().map(|r| r.id).collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
