use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Duration;

use serde::Serialize;

use crate::run::PatternResult;
use crate::table::{count_levels, summary_of, Level, PatternClass, COVERAGE_TABLE, OTHER_ENGINES, PUBLISHED_SUMMARY};

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub full: usize,
    pub partial: usize,
    pub none: usize,
}

impl From<(usize, usize, usize)> for Summary {
    fn from((full, partial, none): (usize, usize, usize)) -> Self {
        Summary { full, partial, none }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    pub results: Vec<PatternResult>,
    /// Cells of the published table per level.
    pub table_counts: BTreeMap<Level, usize>,
    /// Levels the corpus demonstrated, per level.
    pub achieved_counts: BTreeMap<Level, usize>,
    pub published_summary: Summary,
    pub recounted_summary: Summary,
    /// Set when the published summary differs from the recount of the table.
    pub summary_discrepancy: Option<String>,
    pub millis: u128,
}

fn by_level(counts: [usize; 4]) -> BTreeMap<Level, usize> {
    Level::ALL.into_iter().zip(counts).collect()
}

impl CoverageReport {
    pub fn new(results: Vec<PatternResult>, elapsed: Duration) -> Self {
        let table = count_levels(COVERAGE_TABLE.iter().map(|r| r.level));
        let achieved = count_levels(results.iter().filter_map(|r| r.achieved));
        let recount = summary_of(table);
        let summary_discrepancy = (recount != PUBLISHED_SUMMARY).then(|| {
            format!(
                "published summary {}/{}/{} (full/partial/none) disagrees with its own table, which recounts to {}/{}/{}",
                PUBLISHED_SUMMARY.0, PUBLISHED_SUMMARY.1, PUBLISHED_SUMMARY.2, recount.0, recount.1, recount.2
            )
        });
        CoverageReport {
            results,
            table_counts: by_level(table),
            achieved_counts: by_level(achieved),
            published_summary: PUBLISHED_SUMMARY.into(),
            recounted_summary: recount.into(),
            summary_discrepancy,
            millis: elapsed.as_millis(),
        }
    }

    pub fn all_passed(&self) -> bool {
        self.results.iter().all(PatternResult::passed)
    }

    pub fn failed(&self) -> impl Iterator<Item = &PatternResult> {
        self.results.iter().filter(|r| !r.passed())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Table grouped by class, one line per pattern.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let width = self.results.iter().map(|r| r.pattern.chars().count()).max().unwrap_or(0);
        for class in PatternClass::ALL {
            let rows: Vec<_> = self.results.iter().filter(|r| r.class == class).collect();
            if rows.is_empty() {
                continue;
            }
            let _ = writeln!(out, "{}", class.title());
            for r in rows {
                let got = r.achieved.map_or("-", Level::symbol);
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                let _ = writeln!(
                    out,
                    "  {:<width$}  {:<3} table {:<3} {:<4} {:>6} ms",
                    r.pattern,
                    got,
                    r.expected.symbol(),
                    verdict,
                    r.millis
                );
                for f in r.failures.iter().take(5) {
                    let _ = writeln!(out, "      {f}");
                }
            }
        }
        let _ = writeln!(out);
        for level in Level::ALL {
            let _ = writeln!(
                out,
                "{:<3} {:<24} table {:>2}  achieved {:>2}",
                level.symbol(),
                level.label(),
                self.table_counts[&level],
                self.achieved_counts[&level]
            );
        }
        let (p, r) = (&self.published_summary, &self.recounted_summary);
        let _ = writeln!(
            out,
            "summary: published {}/{}/{}, recounted {}/{}/{}",
            p.full, p.partial, p.none, r.full, r.partial, r.none
        );
        if let Some(d) = &self.summary_discrepancy {
            let _ = writeln!(out, "note: {d}");
        }
        let _ = writeln!(out, "\nother engines (full/partial/none, as published):");
        for (name, full, partial, none) in OTHER_ENGINES {
            let _ = writeln!(out, "  {name:<22} {full:>2}/{partial}/{none}");
        }
        let passed = self.results.iter().filter(|r| r.passed()).count();
        let _ = writeln!(out, "\n{passed}/{} patterns match the table in {} ms", self.results.len(), self.millis);
        out
    }
}
