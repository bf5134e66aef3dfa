use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;
use wee_core::dsl::PositionId;

use crate::check::Assertion;
use crate::table::{Level, PatternClass};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Manifest { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error("corpus is missing cases for: {0}")]
    Missing(String),
}

fn read(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_owned(), source })
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndState {
    Finished,
    Stopped,
}

/// When the controller sends its stop signal.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopWhen {
    /// Every listed activity has started at least this often.
    #[serde(default)]
    pub started: Vec<PositionId>,
    #[serde(default = "one")]
    pub times: usize,
    /// Every listed activity has ended.
    #[serde(default)]
    pub ended: Vec<PositionId>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResumePlan {
    #[serde(default)]
    pub skip: Vec<PositionId>,
    #[serde(default)]
    pub program_counters: BTreeMap<String, PositionId>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Controller {
    pub stop_when: StopWhen,
    pub resume: Option<ResumePlan>,
}

/// A source the engine must refuse, documenting an inexpressible pattern.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rejection {
    pub reason: String,
    pub attempt: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub pattern: String,
    pub class: PatternClass,
    pub support: Level,
    #[serde(default)]
    pub note: Option<String>,
    /// Present when the pattern is emulated by restructuring the workflow.
    #[serde(default)]
    pub workaround: Option<String>,
    #[serde(default = "mock")]
    pub handler: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub runs: usize,
    #[serde(default)]
    pub max_iterations: Option<u64>,
    #[serde(default)]
    pub context: wee_core::expr::Values,
    pub controller: Option<Controller>,
    pub end: Option<EndState>,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
    pub unsupported: Option<Rejection>,
}

fn mock() -> String {
    "mock".into()
}

#[derive(Debug, Clone)]
pub struct PatternCase {
    pub name: String,
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub source: Option<String>,
    pub script: Option<String>,
}

impl PatternCase {
    /// Loads `<name>.assert.json` with its optional workflow and script.
    pub fn load(dir: &Path, name: &str) -> Result<Self, CorpusError> {
        let assert_path = dir.join(format!("{name}.assert.json"));
        let manifest: Manifest = serde_json::from_str(&read(&assert_path)?)
            .map_err(|source| CorpusError::Manifest { path: assert_path.clone(), source })?;
        let optional = |ext: &str| {
            let p = dir.join(format!("{name}.{ext}"));
            if p.exists() {
                read(&p).map(Some)
            } else {
                Ok(None)
            }
        };
        let case = PatternCase {
            name: name.to_owned(),
            dir: dir.to_owned(),
            source: optional("wee")?,
            script: optional("script.json")?,
            manifest,
        };
        let invalid = |message: &str| CorpusError::Invalid { path: assert_path.clone(), message: message.into() };
        match (case.manifest.support, &case.source, &case.manifest.unsupported) {
            (Level::Orchestrated, Some(_), _) => return Err(invalid("orchestrated cases carry no workflow")),
            (Level::Orchestrated, None, None) => return Err(invalid("orchestrated case without a rejection")),
            (Level::Orchestrated, None, Some(_)) => {}
            (_, None, _) => return Err(invalid("missing workflow source")),
            (_, Some(_), Some(_)) => return Err(invalid("supported case with a rejection")),
            (_, Some(_), None) => {}
        }
        if case.manifest.support != Level::Orchestrated && case.manifest.assertions.is_empty() {
            return Err(invalid("no assertions"));
        }
        Ok(case)
    }

    pub fn is_orchestrated(&self) -> bool {
        self.source.is_none()
    }
}

/// Every case under `root`, ordered by class then file name.
pub fn load_corpus(root: &Path) -> Result<Vec<PatternCase>, CorpusError> {
    let mut cases = Vec::new();
    for class in PatternClass::ALL {
        let dir = root.join(class.dir());
        let entries = std::fs::read_dir(&dir).map_err(|source| CorpusError::Io { path: dir.clone(), source })?;
        let mut names: Vec<String> = entries
            .filter_map(Result::ok)
            .filter_map(|e| e.file_name().to_str()?.strip_suffix(".assert.json").map(str::to_owned))
            .collect();
        names.sort();
        for name in names {
            let case = PatternCase::load(&dir, &name)?;
            if case.manifest.class != class {
                return Err(CorpusError::Invalid {
                    path: dir.join(&name),
                    message: format!("filed under {} but declares {:?}", class.dir(), case.manifest.class),
                });
            }
            cases.push(case);
        }
    }
    Ok(cases)
}
