use std::path::PathBuf;

use wee_harness::table::{count_levels, summary_of};
use wee_harness::{load_corpus, run_all, run_pattern, Level, RunOptions, COVERAGE_TABLE, PUBLISHED_SUMMARY};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../patterns")
}

#[test]
fn table_recount_by_hand() {
    // Tallied from the table one class at a time.
    let per_class = [
        (5, 0, 0, 0),
        (6, 0, 0, 8),
        (4, 0, 1, 2),
        (3, 2, 0, 0),
        (3, 0, 1, 1),
        (1, 0, 2, 0),
        (2, 0, 0, 0),
        (0, 0, 2, 0),
    ];
    let sum = per_class.iter().fold([0; 4], |acc, c| [acc[0] + c.0, acc[1] + c.1, acc[2] + c.2, acc[3] + c.3]);
    assert_eq!(sum, [24, 2, 6, 11]);
    let counts = count_levels(COVERAGE_TABLE.iter().map(|r| r.level));
    assert_eq!(counts, sum);
    assert_eq!(summary_of(counts), (24, 8, 11));
    assert_ne!(summary_of(counts), PUBLISHED_SUMMARY);
}

#[test]
fn corpus_covers_every_row_once() {
    let cases = load_corpus(&root()).unwrap();
    assert_eq!(cases.len(), COVERAGE_TABLE.len());
    for row in &COVERAGE_TABLE {
        let n = cases.iter().filter(|c| c.manifest.pattern == row.pattern).count();
        assert_eq!(n, 1, "{}", row.pattern);
    }
}

#[test]
fn corpus_matches_the_table() {
    let report = run_all(&root(), RunOptions { parallel: true, ..RunOptions::default() }).unwrap();
    let failed: Vec<_> = report.failed().map(|r| format!("{}: {:?} {:?}", r.case, r.achieved, r.failures)).collect();
    assert!(failed.is_empty(), "{}\n{}", failed.join("\n"), report.render_text());
    assert_eq!(report.achieved_counts[&Level::Direct], 24);
    assert_eq!(report.achieved_counts[&Level::Orchestrated], 11);
    assert!(report.summary_discrepancy.is_some());
}

#[test]
fn every_run_replays_its_context() {
    for case in load_corpus(&root()).unwrap().iter().filter(|c| !c.is_orchestrated()) {
        let r = run_pattern(case, RunOptions { seed: 7, ..RunOptions::default() });
        assert_eq!(r.replay_mismatches, 0, "{}", r.case);
        assert_eq!(r.replays, r.runs, "{}: {:?}", r.case, r.failures);
    }
}
