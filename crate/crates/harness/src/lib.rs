//! Workflow pattern corpus runner.
//!
//! Each case under the corpus root is a `<name>.assert.json` manifest with
//! an optional `<name>.wee` workflow and `<name>.script.json` handler
//! script. Running the corpus yields the support level each pattern
//! demonstrates, compared against the coverage table.

pub mod case;
pub mod check;
pub mod report;
pub mod run;
pub mod spawn;
pub mod table;

pub use case::{load_corpus, CorpusError, PatternCase};
pub use report::CoverageReport;
pub use run::{derived_level, run_all, run_pattern, PatternResult, RunOptions};
pub use table::{Level, PatternClass, COVERAGE_TABLE, PUBLISHED_SUMMARY};
