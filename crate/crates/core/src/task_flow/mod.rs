//! Task definitions and the configure → reset → operate → evaluate lifecycle.
//!
//! Tasks live in TOML files, one task per file, usually grouped in domain
//! subdirectories. See `docs/task_format.md` for the schema.

mod evaluator;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::protocol::{EngineError, ErrorCode, Message};

pub use evaluator::{run_evaluator, EvaluatorError, EvaluatorRegistry, EvaluatorSpec, NativeEvaluator, MAX_EVALUATOR_DEPTH};

pub const DEFAULT_STEP_LIMIT: u32 = 25;

fn default_step_limit() -> u32 {
    DEFAULT_STEP_LIMIT
}

/// One setup directive applied, in order, to build the initial environment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ConfigureStep {
    /// Grid dimensions; must come before any cell writes to take effect on them.
    GridSize { rows: usize, cols: usize },
    /// Fill every cell with a pseudo-random digit drawn from `value`.
    Seed { value: u64 },
    Fill { value: u8 },
    SetCell { row: usize, col: usize, value: u8 },
    Cursor { row: usize, col: usize },
    Viewport { offset: usize },
    Clipboard { text: String },
    Buffer { text: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    #[serde(default)]
    pub domain: String,
    pub instruction: String,
    pub configure_steps: Vec<ConfigureStep>,
    #[serde(default = "default_step_limit")]
    pub step_limit: u32,
    /// Close the episode as soon as the evaluator reaches 1.0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub early_stop: bool,
    pub evaluator: EvaluatorSpec,
}

impl TaskSpec {
    /// Structural invariants; native evaluator kinds are checked separately.
    pub fn validate(&self) -> Result<(), String> {
        if self.task_id.trim().is_empty() {
            return Err("task_id is empty".into());
        }
        if self.step_limit < 1 {
            return Err("step_limit must be at least 1".into());
        }
        if self.configure_steps.is_empty() {
            return Err("configure_steps is empty".into());
        }
        self.evaluator.validate()
    }

    /// Full check: structure plus every evaluator kind resolvable in `natives`.
    pub fn check_against(&self, natives: &EvaluatorRegistry) -> Result<(), EngineError> {
        self.validate().map_err(|d| EngineError::new(ErrorCode::MalformedMessage, d))?;
        if let Some(kind) = natives.first_unknown(&self.evaluator) {
            return Err(EngineError::new(ErrorCode::UnknownTask, format!("unknown evaluator kind {kind:?}")));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("task specs are always representable in toml")
    }
}

impl Message for TaskSpec {
    const TAG: &'static str = "task_spec";

    fn check(&self) -> Result<(), String> {
        self.validate()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {detail}")]
    Malformed { path: PathBuf, detail: String },
    #[error("{path}: unknown evaluator kind {kind:?}")]
    UnknownEvaluator { path: PathBuf, kind: String },
    #[error("duplicate task_id {task_id:?} in {first} and {second}")]
    Duplicate { task_id: String, first: PathBuf, second: PathBuf },
}

impl TaskError {
    pub fn code(&self) -> ErrorCode {
        match self {
            TaskError::UnknownEvaluator { .. } => ErrorCode::UnknownTask,
            _ => ErrorCode::MalformedMessage,
        }
    }
}

impl From<TaskError> for EngineError {
    fn from(e: TaskError) -> Self {
        EngineError::new(e.code(), e.to_string())
    }
}

/// Parses task TOML text; `origin` only labels errors.
pub fn parse_task(text: &str, origin: &Path, natives: &EvaluatorRegistry) -> Result<TaskSpec, TaskError> {
    let spec: TaskSpec = toml::from_str(text)
        .map_err(|e| TaskError::Malformed { path: origin.to_path_buf(), detail: e.to_string() })?;
    spec.validate()
        .map_err(|detail| TaskError::Malformed { path: origin.to_path_buf(), detail })?;
    if let Some(kind) = natives.first_unknown(&spec.evaluator) {
        return Err(TaskError::UnknownEvaluator { path: origin.to_path_buf(), kind: kind.to_string() });
    }
    Ok(spec)
}

pub fn load_task(path: &Path, natives: &EvaluatorRegistry) -> Result<TaskSpec, TaskError> {
    let text = std::fs::read_to_string(path).map_err(|source| TaskError::Io { path: path.to_path_buf(), source })?;
    parse_task(&text, path, natives)
}

/// Every `*.toml` under `dir`, recursively, in sorted path order.
pub fn task_files(dir: &Path) -> Result<Vec<PathBuf>, TaskError> {
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| TaskError::Io {
            path: dir.to_path_buf(),
            source: e.into_io_error().unwrap_or_else(|| std::io::Error::other("directory walk failed")),
        })?;
        if entry.file_type().is_file() && entry.path().extension().is_some_and(|x| x == "toml") {
            files.push(entry.into_path());
        }
    }
    Ok(files)
}

/// Immutable set of tasks keyed by id.
#[derive(Clone, Debug, Default)]
pub struct TaskRegistry {
    tasks: BTreeMap<String, Arc<TaskSpec>>,
    origins: BTreeMap<String, PathBuf>,
    source: Option<PathBuf>,
}

impl TaskRegistry {
    pub fn load_dir(dir: &Path, natives: &EvaluatorRegistry) -> Result<Self, TaskError> {
        let mut reg = TaskRegistry { source: Some(dir.to_path_buf()), ..Default::default() };
        for path in task_files(dir)? {
            let spec = load_task(&path, natives)?;
            reg.insert_from(spec, path)?;
        }
        Ok(reg)
    }

    pub fn from_specs(specs: impl IntoIterator<Item = TaskSpec>) -> Result<Self, TaskError> {
        let mut reg = TaskRegistry::default();
        for spec in specs {
            let origin = PathBuf::from(format!("<memory:{}>", spec.task_id));
            reg.insert_from(spec, origin)?;
        }
        Ok(reg)
    }

    fn insert_from(&mut self, spec: TaskSpec, origin: PathBuf) -> Result<(), TaskError> {
        if let Some(first) = self.origins.get(&spec.task_id) {
            return Err(TaskError::Duplicate { task_id: spec.task_id, first: first.clone(), second: origin });
        }
        self.origins.insert(spec.task_id.clone(), origin);
        self.tasks.insert(spec.task_id.clone(), Arc::new(spec));
        Ok(())
    }

    pub fn get(&self, task_id: &str) -> Option<Arc<TaskSpec>> {
        self.tasks.get(task_id).cloned()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.tasks.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
task_id = "office-min"
instruction = "Type hello"

[[configure_steps]]
op = "grid_size"
rows = 16
cols = 16

[evaluator]
kind = "buffer_equals"
expected = "hello"
"#;

    #[test]
    fn step_limit_defaults_to_25() {
        let spec = parse_task(MINIMAL, Path::new("min.toml"), &EvaluatorRegistry::builtin_only()).unwrap();
        assert_eq!(spec.step_limit, 25);
        assert!(!spec.early_stop);
    }

    #[test]
    fn bad_weights_rejected() {
        let text = r#"
task_id = "w"
instruction = "x"
[[configure_steps]]
op = "seed"
value = 1
[evaluator]
kind = "weighted_sum"
weights = [0.5, 0.6]
[[evaluator.children]]
kind = "cursor_at"
row = 0
col = 0
[[evaluator.children]]
kind = "cursor_at"
row = 1
col = 1
"#;
        let err = parse_task(text, Path::new("w.toml"), &EvaluatorRegistry::builtin_only()).unwrap_err();
        assert_eq!(err.code(), ErrorCode::MalformedMessage);
        assert!(err.to_string().contains("weights must sum to 1"), "{err}");
    }

    #[test]
    fn unknown_kind_is_unknown_task() {
        let text = MINIMAL.replace("buffer_equals", "no_such");
        let err = parse_task(&text, Path::new("u.toml"), &EvaluatorRegistry::builtin_only()).unwrap_err();
        assert_eq!(err.code(), ErrorCode::UnknownTask);
    }

    #[test]
    fn empty_configure_steps_rejected() {
        let text = r#"
task_id = "e"
instruction = "x"
configure_steps = []
[evaluator]
kind = "cursor_at"
row = 0
col = 0
"#;
        assert!(parse_task(text, Path::new("e.toml"), &EvaluatorRegistry::builtin_only()).is_err());
    }

    #[test]
    fn duplicate_ids_name_both_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("office")).unwrap();
        std::fs::create_dir(dir.path().join("daily")).unwrap();
        std::fs::write(dir.path().join("office/a.toml"), MINIMAL).unwrap();
        std::fs::write(dir.path().join("daily/b.toml"), MINIMAL).unwrap();
        let err = TaskRegistry::load_dir(dir.path(), &EvaluatorRegistry::builtin_only()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("a.toml") && msg.contains("b.toml"), "{msg}");
    }

    #[test]
    fn toml_fixed_point() {
        let spec = parse_task(MINIMAL, Path::new("min.toml"), &EvaluatorRegistry::builtin_only()).unwrap();
        let again = parse_task(&spec.to_toml(), Path::new("again.toml"), &EvaluatorRegistry::builtin_only()).unwrap();
        assert_eq!(spec, again);
        assert_eq!(spec.to_toml(), again.to_toml());
    }
}
