//! The reflection boundary: backends that read rollouts and propose
//! structured prompt edits, plus the contract checks every backend's
//! output passes through.

mod edit;
mod http;
mod mock;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::population::NodeId;
use crate::rollout::{Problem, Trajectory};
use crate::transport::{HttpConfig, TransportError};

pub use edit::{apply_edits, Edit, EditError, EditErrorKind, EditScript, SystemPrompt};
pub use http::{HttpReflector, Templates};
pub use mock::{principle_for_token, MockReflector};

/// Rewards at or above this count as a success when labeling rollouts.
pub const SUCCESS_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ReflectError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("unparseable reflector output: {0}")]
    Parse(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("reflector broke its contract: {0}")]
    Contract(String),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error("template: {0}")]
    Template(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub success: bool,
    pub reward: f64,
    pub text: String,
}

/// Diagnosis for one problem plus the local edits it suggests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionLesson {
    pub problem_id: String,
    pub diagnosis: String,
    pub edits: Vec<Edit>,
}

/// One prompt's case for crossover: the problems it won in the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverEvidence {
    pub prompt_id: NodeId,
    pub prompt_text: String,
    pub won_problems: Vec<String>,
}

/// A reflection backend. Callers go through the free functions of this
/// module, which enforce cardinality, edit caps and index validity.
pub trait Reflector: Send + Sync {
    fn summarize(&self, prompt: &str, problem: &Problem, rollouts: &[Trajectory]) -> Result<Vec<TrajectorySummary>, ReflectError>;

    fn critique(
        &self,
        prompt: &str,
        problem: &Problem,
        summaries: &[TrajectorySummary],
        k_ops: usize,
    ) -> Result<ReflectionLesson, ReflectError>;

    fn aggregate(&self, prompt: &str, lessons: &[ReflectionLesson]) -> Result<EditScript, ReflectError>;

    fn crossover(&self, top_id: NodeId, top_prompt: &str, evidence: &[CrossoverEvidence]) -> Result<EditScript, ReflectError>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectorBackend {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReflectorConfig {
    pub backend: ReflectorBackend,
    pub model: String,
    pub temperature: f64,
    pub http: HttpConfig,
    /// Longest principle an aggregated script may write.
    pub max_principle_chars: usize,
    /// Directory with `summarize.txt`, `critique.txt`, `aggregate.txt` and
    /// `crossover.txt` overriding the built-in templates.
    pub template_dir: Option<PathBuf>,
}

impl Default for ReflectorConfig {
    fn default() -> Self {
        Self {
            backend: ReflectorBackend::Mock,
            model: "reference".into(),
            temperature: 0.7,
            http: HttpConfig::default(),
            max_principle_chars: 500,
            template_dir: None,
        }
    }
}

fn check_indices(edit: &Edit, principles: usize) -> Result<(), ReflectError> {
    match edit.indices().iter().find(|&&i| i >= principles) {
        Some(i) => Err(ReflectError::Contract(format!(
            "edit references principle {i} but the prompt has {principles}"
        ))),
        None => Ok(()),
    }
}

/// One labeled summary per rollout. Labels come from the rewards, not the
/// backend.
pub fn summarize_trajectories(
    backend: &dyn Reflector,
    prompt: &str,
    problem: &Problem,
    rollouts: &[Trajectory],
) -> Result<Vec<TrajectorySummary>, ReflectError> {
    let mut summaries = backend.summarize(prompt, problem, rollouts)?;
    if summaries.len() != rollouts.len() {
        return Err(ReflectError::Contract(format!(
            "{} summaries for {} rollouts",
            summaries.len(),
            rollouts.len()
        )));
    }
    for (s, t) in summaries.iter_mut().zip(rollouts) {
        s.reward = t.reward;
        s.success = t.reward >= SUCCESS_THRESHOLD;
    }
    Ok(summaries)
}

/// Needs at least one success and one failure. Extra edits beyond `k_ops`
/// are dropped; edits must reference existing principles.
pub fn critique(
    backend: &dyn Reflector,
    summaries: &[TrajectorySummary],
    prompt: &str,
    problem: &Problem,
    k_ops: usize,
) -> Result<ReflectionLesson, ReflectError> {
    if !(summaries.iter().any(|s| s.success) && summaries.iter().any(|s| !s.success)) {
        return Err(ReflectError::Precondition("critique needs both successes and failures".into()));
    }
    let mut lesson = backend.critique(prompt, problem, summaries, k_ops)?;
    lesson.edits.truncate(k_ops);
    let principles = SystemPrompt::parse(prompt).principles.len();
    for edit in &lesson.edits {
        check_indices(edit, principles)?;
    }
    lesson.problem_id = problem.id.clone();
    Ok(lesson)
}

fn check_lengths(script: &EditScript, max_chars: usize) -> Result<(), ReflectError> {
    for edit in &script.edits {
        let len = edit.text().trim().chars().count();
        if len > max_chars {
            return Err(ReflectError::Contract(format!("principle of {len} chars exceeds the {max_chars} limit")));
        }
    }
    Ok(())
}

/// Consolidates lessons into one script for the prompt.
pub fn aggregate(
    backend: &dyn Reflector,
    prompt: &str,
    lessons: &[ReflectionLesson],
    max_principle_chars: usize,
) -> Result<EditScript, ReflectError> {
    if lessons.is_empty() {
        return Err(ReflectError::Precondition("aggregate needs at least one lesson".into()));
    }
    let script = backend.aggregate(prompt, lessons)?;
    check_lengths(&script, max_principle_chars)?;
    Ok(script)
}

/// `Ok(None)` when fewer than two distinct prompts won any problem.
pub fn crossover_reflect(
    backend: &dyn Reflector,
    top_id: NodeId,
    top_prompt: &str,
    evidence: &[CrossoverEvidence],
    max_principle_chars: usize,
) -> Result<Option<EditScript>, ReflectError> {
    let mut winners: Vec<NodeId> = evidence
        .iter()
        .filter(|e| !e.won_problems.is_empty())
        .map(|e| e.prompt_id)
        .collect();
    winners.sort_unstable();
    winners.dedup();
    if winners.len() < 2 {
        return Ok(None);
    }
    let script = backend.crossover(top_id, top_prompt, evidence)?;
    check_lengths(&script, max_principle_chars)?;
    Ok(Some(script))
}
