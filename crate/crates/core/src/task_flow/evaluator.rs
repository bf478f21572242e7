use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env_backend::SimState;

/// Deepest evaluator tree accepted; a leaf has depth 1.
pub const MAX_EVALUATOR_DEPTH: usize = 8;

const WEIGHT_TOLERANCE: f64 = 1e-9;

/// Declarative success criterion for a task.
///
/// The six built-in kinds are decided directly on [`SimState`]. Any other
/// kind name is a native evaluator resolved through an [`EvaluatorRegistry`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEvaluator", into = "RawEvaluator")]
pub enum EvaluatorSpec {
    CellEquals { row: usize, col: usize, value: u8 },
    BufferEquals { expected: String },
    CursorAt { row: usize, col: usize },
    PredicateAll(Vec<EvaluatorSpec>),
    PredicateAny(Vec<EvaluatorSpec>),
    WeightedSum(Vec<(f64, EvaluatorSpec)>),
    Native { name: String, args: serde_json::Value },
}

impl EvaluatorSpec {
    pub fn kind(&self) -> &str {
        match self {
            EvaluatorSpec::CellEquals { .. } => "cell_equals",
            EvaluatorSpec::BufferEquals { .. } => "buffer_equals",
            EvaluatorSpec::CursorAt { .. } => "cursor_at",
            EvaluatorSpec::PredicateAll(_) => "predicate_all",
            EvaluatorSpec::PredicateAny(_) => "predicate_any",
            EvaluatorSpec::WeightedSum(_) => "weighted_sum",
            EvaluatorSpec::Native { name, .. } => name,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            EvaluatorSpec::PredicateAll(children) | EvaluatorSpec::PredicateAny(children) => {
                1 + children.iter().map(EvaluatorSpec::depth).max().unwrap_or(0)
            }
            EvaluatorSpec::WeightedSum(children) => {
                1 + children.iter().map(|(_, c)| c.depth()).max().unwrap_or(0)
            }
            _ => 1,
        }
    }

    /// Names of native evaluators referenced anywhere in the tree.
    pub fn native_names(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_natives(&mut out);
        out
    }

    fn collect_natives<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            EvaluatorSpec::Native { name, .. } => out.push(name),
            EvaluatorSpec::PredicateAll(c) | EvaluatorSpec::PredicateAny(c) => {
                c.iter().for_each(|e| e.collect_natives(out))
            }
            EvaluatorSpec::WeightedSum(c) => c.iter().for_each(|(_, e)| e.collect_natives(out)),
            _ => {}
        }
    }

    /// Structural invariants: non-empty children, weights that sum to one,
    /// depth within [`MAX_EVALUATOR_DEPTH`].
    pub fn validate(&self) -> Result<(), String> {
        if self.depth() > MAX_EVALUATOR_DEPTH {
            return Err(format!("evaluator nesting exceeds depth {MAX_EVALUATOR_DEPTH}"));
        }
        self.validate_node()
    }

    fn validate_node(&self) -> Result<(), String> {
        match self {
            EvaluatorSpec::PredicateAll(children) | EvaluatorSpec::PredicateAny(children) => {
                if children.is_empty() {
                    return Err(format!("{} needs at least one child", self.kind()));
                }
                children.iter().try_for_each(EvaluatorSpec::validate_node)
            }
            EvaluatorSpec::WeightedSum(children) => {
                if children.is_empty() {
                    return Err("weighted_sum needs at least one child".into());
                }
                if children.iter().any(|(w, _)| !w.is_finite() || *w < 0.0) {
                    return Err("weights must be non-negative".into());
                }
                let total: f64 = children.iter().map(|(w, _)| w).sum();
                if (total - 1.0).abs() > WEIGHT_TOLERANCE {
                    return Err(format!("weights must sum to 1 (got {total})"));
                }
                children.iter().try_for_each(|(_, c)| c.validate_node())
            }
            EvaluatorSpec::Native { name, .. } if name.is_empty() => Err("empty evaluator kind".into()),
            _ => Ok(()),
        }
    }
}

/// Signature of a native evaluator: pure function of the state and its args.
pub type NativeEvaluator = Arc<dyn Fn(&SimState, &serde_json::Value) -> Result<f64, String> + Send + Sync>;

/// Native evaluator kinds, keyed by name. Immutable once shared.
#[derive(Clone, Default)]
pub struct EvaluatorRegistry {
    natives: BTreeMap<String, NativeEvaluator>,
}

impl std::fmt::Debug for EvaluatorRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EvaluatorRegistry").field("natives", &self.natives.keys().collect::<Vec<_>>()).finish()
    }
}

impl EvaluatorRegistry {
    /// An empty registry: only the built-in kinds resolve.
    pub fn builtin_only() -> Self {
        Self::default()
    }

    /// Built-ins plus the stock natives shipped with the sim backend.
    pub fn with_stock_natives() -> Self {
        let mut reg = Self::default();
        reg.register("buffer_contains", |state, args| {
            let needle = args
                .get("needle")
                .and_then(|n| n.as_str())
                .ok_or("buffer_contains needs a string arg \"needle\"")?;
            Ok(if state.typed_buffer.contains(needle) { 1.0 } else { 0.0 })
        });
        reg.register("nonzero_cells_at_least", |state, args| {
            let min = args
                .get("count")
                .and_then(|n| n.as_u64())
                .ok_or("nonzero_cells_at_least needs an integer arg \"count\"")?;
            let nonzero = state.grid.cells().iter().filter(|&&c| c != 0).count() as u64;
            Ok(if nonzero >= min { 1.0 } else { 0.0 })
        });
        reg
    }

    pub fn register<F>(&mut self, name: impl Into<String>, f: F)
    where
        F: Fn(&SimState, &serde_json::Value) -> Result<f64, String> + Send + Sync + 'static,
    {
        self.natives.insert(name.into(), Arc::new(f));
    }

    pub fn knows(&self, name: &str) -> bool {
        self.natives.contains_key(name)
    }

    /// The first native kind in `spec` that this registry cannot resolve.
    pub fn first_unknown<'a>(&self, spec: &'a EvaluatorSpec) -> Option<&'a str> {
        spec.native_names().into_iter().find(|n| !self.knows(n))
    }

    fn get(&self, name: &str) -> Option<&NativeEvaluator> {
        self.natives.get(name)
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum EvaluatorError {
    #[error("evaluator nesting exceeds depth {MAX_EVALUATOR_DEPTH}")]
    TooDeep,
    #[error("unknown evaluator kind {0:?}")]
    UnknownKind(String),
    #[error("evaluator {kind} failed: {detail}")]
    Failed { kind: String, detail: String },
}

/// Scores `state` against `spec`. Always in `[0, 1]`; never mutates `state`.
pub fn run_evaluator(spec: &EvaluatorSpec, state: &SimState, natives: &EvaluatorRegistry) -> Result<f64, EvaluatorError> {
    score(spec, state, natives, 1)
}

fn indicator(holds: bool) -> f64 {
    if holds {
        1.0
    } else {
        0.0
    }
}

fn score(spec: &EvaluatorSpec, state: &SimState, natives: &EvaluatorRegistry, depth: usize) -> Result<f64, EvaluatorError> {
    if depth > MAX_EVALUATOR_DEPTH {
        return Err(EvaluatorError::TooDeep);
    }
    let s = match spec {
        EvaluatorSpec::CellEquals { row, col, value } => indicator(state.grid.get(*row, *col) == Some(*value)),
        EvaluatorSpec::BufferEquals { expected } => indicator(state.typed_buffer == *expected),
        EvaluatorSpec::CursorAt { row, col } => indicator(state.cursor == (*row, *col)),
        EvaluatorSpec::PredicateAll(children) => {
            let mut product = 1.0;
            for child in children {
                product *= score(child, state, natives, depth + 1)?;
            }
            indicator(product >= 1.0 - WEIGHT_TOLERANCE)
        }
        EvaluatorSpec::PredicateAny(children) => {
            let mut best: f64 = 0.0;
            for child in children {
                best = best.max(score(child, state, natives, depth + 1)?);
            }
            best
        }
        EvaluatorSpec::WeightedSum(children) => {
            let mut total = 0.0;
            for (w, child) in children {
                total += w * score(child, state, natives, depth + 1)?;
            }
            total
        }
        EvaluatorSpec::Native { name, args } => {
            let f = natives.get(name).ok_or_else(|| EvaluatorError::UnknownKind(name.clone()))?;
            let v = f(state, args).map_err(|detail| EvaluatorError::Failed { kind: name.clone(), detail })?;
            if !v.is_finite() {
                return Err(EvaluatorError::Failed { kind: name.clone(), detail: format!("non-finite score {v}") });
            }
            v
        }
    };
    Ok(s.clamp(0.0, 1.0))
}

/// Flat on-disk form: `kind` plus whichever arguments that kind takes.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct RawEvaluator {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    row: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    col: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    expected: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    args: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    children: Vec<RawEvaluator>,
}

impl TryFrom<RawEvaluator> for EvaluatorSpec {
    type Error = String;

    fn try_from(raw: RawEvaluator) -> Result<Self, String> {
        let need = |field: &str| format!("evaluator {} needs field {field:?}", raw.kind);
        let children = |raw: &RawEvaluator| -> Result<Vec<EvaluatorSpec>, String> {
            raw.children.iter().cloned().map(EvaluatorSpec::try_from).collect()
        };
        Ok(match raw.kind.as_str() {
            "cell_equals" => EvaluatorSpec::CellEquals {
                row: raw.row.ok_or_else(|| need("row"))?,
                col: raw.col.ok_or_else(|| need("col"))?,
                value: raw.value.ok_or_else(|| need("value"))?,
            },
            "buffer_equals" => EvaluatorSpec::BufferEquals { expected: raw.expected.clone().ok_or_else(|| need("expected"))? },
            "cursor_at" => EvaluatorSpec::CursorAt {
                row: raw.row.ok_or_else(|| need("row"))?,
                col: raw.col.ok_or_else(|| need("col"))?,
            },
            "predicate_all" => EvaluatorSpec::PredicateAll(children(&raw)?),
            "predicate_any" => EvaluatorSpec::PredicateAny(children(&raw)?),
            "weighted_sum" => {
                let kids = children(&raw)?;
                let weights = raw.weights.clone().ok_or_else(|| need("weights"))?;
                if weights.len() != kids.len() {
                    return Err(format!(
                        "weighted_sum has {} weights for {} children",
                        weights.len(),
                        kids.len()
                    ));
                }
                EvaluatorSpec::WeightedSum(weights.into_iter().zip(kids).collect())
            }
            "" => return Err("evaluator kind is empty".into()),
            _ => EvaluatorSpec::Native {
                name: raw.kind.clone(),
                args: raw.args.clone().unwrap_or(serde_json::Value::Null),
            },
        })
    }
}

impl From<EvaluatorSpec> for RawEvaluator {
    fn from(spec: EvaluatorSpec) -> RawEvaluator {
        let kind = spec.kind().to_string();
        let mut raw = RawEvaluator { kind, ..Default::default() };
        match spec {
            EvaluatorSpec::CellEquals { row, col, value } => {
                raw.row = Some(row);
                raw.col = Some(col);
                raw.value = Some(value);
            }
            EvaluatorSpec::BufferEquals { expected } => raw.expected = Some(expected),
            EvaluatorSpec::CursorAt { row, col } => {
                raw.row = Some(row);
                raw.col = Some(col);
            }
            EvaluatorSpec::PredicateAll(c) | EvaluatorSpec::PredicateAny(c) => {
                raw.children = c.into_iter().map(RawEvaluator::from).collect();
            }
            EvaluatorSpec::WeightedSum(c) => {
                let (weights, kids): (Vec<f64>, Vec<EvaluatorSpec>) = c.into_iter().unzip();
                raw.weights = Some(weights);
                raw.children = kids.into_iter().map(RawEvaluator::from).collect();
            }
            EvaluatorSpec::Native { args, .. } => {
                if !args.is_null() {
                    raw.args = Some(args);
                }
            }
        }
        raw
    }
}
