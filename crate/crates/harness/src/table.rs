use std::fmt;

use serde::{Deserialize, Serialize};

/// How far a pattern is supported, from best to worst.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Direct,
    Modified,
    HandlerExternal,
    Orchestrated,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Direct, Level::Modified, Level::HandlerExternal, Level::Orchestrated];

    pub fn symbol(self) -> &'static str {
        match self {
            Level::Direct => "♥♥",
            Level::Modified => "♥",
            Level::HandlerExternal => "✳",
            Level::Orchestrated => "×",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Level::Direct => "directly supported",
            Level::Modified => "modified workflow",
            Level::HandlerExternal => "handler/external",
            Level::Orchestrated => "orchestrated instances",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternClass {
    Basic,
    AdvancedBranching,
    MultipleInstances,
    StateBased,
    Cancellation,
    Iteration,
    Termination,
    Trigger,
}

impl PatternClass {
    pub const ALL: [PatternClass; 8] = [
        PatternClass::Basic,
        PatternClass::AdvancedBranching,
        PatternClass::MultipleInstances,
        PatternClass::StateBased,
        PatternClass::Cancellation,
        PatternClass::Iteration,
        PatternClass::Termination,
        PatternClass::Trigger,
    ];

    /// Directory name under the corpus root.
    pub fn dir(self) -> &'static str {
        match self {
            PatternClass::Basic => "basic",
            PatternClass::AdvancedBranching => "advanced_branching",
            PatternClass::MultipleInstances => "multiple_instances",
            PatternClass::StateBased => "state_based",
            PatternClass::Cancellation => "cancellation",
            PatternClass::Iteration => "iteration",
            PatternClass::Termination => "termination",
            PatternClass::Trigger => "trigger",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            PatternClass::Basic => "Basic Control Flow",
            PatternClass::AdvancedBranching => "Advanced Branching and Synchronization",
            PatternClass::MultipleInstances => "Multiple Instances",
            PatternClass::StateBased => "State Based",
            PatternClass::Cancellation => "Cancellation and Force Completion",
            PatternClass::Iteration => "Iteration",
            PatternClass::Termination => "Termination",
            PatternClass::Trigger => "Trigger",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableRow {
    pub class: PatternClass,
    pub pattern: &'static str,
    pub level: Level,
}

const fn row(class: PatternClass, pattern: &'static str, level: Level) -> TableRow {
    TableRow { class, pattern, level }
}

use Level::{Direct as D, HandlerExternal as E, Modified as M, Orchestrated as O};
use PatternClass::*;

/// The published per-pattern support levels, in table order.
pub const COVERAGE_TABLE: [TableRow; 43] = [
    row(Basic, "Sequence", D),
    row(Basic, "Parallel Split", D),
    row(Basic, "Synchronization", D),
    row(Basic, "Exclusive Choice", D),
    row(Basic, "Simple Merge", D),
    row(AdvancedBranching, "Multi-Choice", D),
    row(AdvancedBranching, "Structured Synchronizing Merge", D),
    row(AdvancedBranching, "Multi-Merge", O),
    row(AdvancedBranching, "Structured Discriminator", O),
    row(AdvancedBranching, "Blocking Discriminator", O),
    row(AdvancedBranching, "Cancelling Discriminator", D),
    row(AdvancedBranching, "Structured Partial Join", O),
    row(AdvancedBranching, "Blocking Partial Join", O),
    row(AdvancedBranching, "Cancelling Partial Join", D),
    row(AdvancedBranching, "Generalised AND-Join", O),
    row(AdvancedBranching, "Local Synchronizing Merge", O),
    row(AdvancedBranching, "General Synchronizing Merge", O),
    row(AdvancedBranching, "Thread Merge", D),
    row(AdvancedBranching, "Thread Split", D),
    row(MultipleInstances, "Multiple Instances without Synchronization", E),
    row(MultipleInstances, "Multiple Instances with a Priori Design-Time Knowledge", D),
    row(MultipleInstances, "Multiple Instances with a Priori Run-Time Knowledge", D),
    row(MultipleInstances, "Multiple Instances without a Priori Run-Time Knowledge", D),
    row(MultipleInstances, "Static Partial Join for Multiple Instances", O),
    row(MultipleInstances, "Cancelling Partial Join for Multiple Instances", D),
    row(MultipleInstances, "Dynamic Partial Join for Multiple Instances", O),
    row(StateBased, "Deferred Choice", M),
    row(StateBased, "Interleaved Parallel Routing", D),
    row(StateBased, "Milestone", M),
    row(StateBased, "Critical Section", D),
    row(StateBased, "Interleaved Routing", D),
    row(Cancellation, "Cancel Task", D),
    row(Cancellation, "Cancel Case", D),
    row(Cancellation, "Cancel Region", E),
    row(Cancellation, "Cancel Multiple Instance Activity", D),
    row(Cancellation, "Complete Multiple Instance Activity", O),
    row(Iteration, "Arbitrary Cycles", E),
    row(Iteration, "Structured Loop", D),
    row(Iteration, "Recursion", E),
    row(Termination, "Implicit Termination", D),
    row(Termination, "Explicit Termination", D),
    row(Trigger, "Transient Trigger", E),
    row(Trigger, "Persistent Trigger", E),
];

/// The published summary row: full support, partial support, none.
pub const PUBLISHED_SUMMARY: (usize, usize, usize) = (22, 10, 11);

/// Summary rows quoted for the other engines, for context only.
pub const OTHER_ENGINES: [(&str, usize, usize, usize); 6] = [
    ("StaffWare 10", 14, 0, 29),
    ("WebSphere MQ 3.4", 11, 0, 32),
    ("Oracle BPEL PM 10.12", 18, 6, 19),
    ("JBoss jBPM 3.1.4.2", 13, 2, 28),
    ("OpenWFE 1.7.3", 20, 4, 19),
    ("Enhydra Shark 2.0", 11, 0, 32),
];

pub fn table_row(pattern: &str) -> Option<&'static TableRow> {
    COVERAGE_TABLE.iter().find(|r| r.pattern == pattern)
}

/// Cells per level, in [`Level::ALL`] order.
pub fn count_levels(levels: impl IntoIterator<Item = Level>) -> [usize; 4] {
    let mut out = [0; 4];
    for l in levels {
        out[l as usize] += 1;
    }
    out
}

/// Collapses four levels into the summary's three columns.
pub fn summary_of(counts: [usize; 4]) -> (usize, usize, usize) {
    (counts[0], counts[1] + counts[2], counts[3])
}
