//! The sampling boundary: prompts × problems × samples in, graded
//! trajectories and the prompt-by-problem value matrix out.

mod chat;
pub mod synthetic;

use std::io::BufRead;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::population::NodeId;
use crate::seed::StreamKey;
use crate::transport::TransportError;

pub use chat::ChatSampler;
pub use synthetic::{SyntheticEnv, SyntheticFixture, SyntheticProblem, SyntheticSampler};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("sampler failed for prompt {prompt_id} on problem {problem_id}: {source}")]
    Transport {
        prompt_id: NodeId,
        problem_id: String,
        #[source]
        source: TransportError,
    },
    #[error("grader {grader} cannot score {content}")]
    Grading { grader: &'static str, content: &'static str },
    #[error("invalid batch request: {0}")]
    InvalidRequest(String),
    #[error("problem set line {line}: {message}")]
    ProblemSet { line: usize, message: String },
    #[error("unknown problem {0}")]
    UnknownProblem(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "grader_key", content = "grader_args", rename_all = "snake_case")]
pub enum Grader {
    /// Reward 1 when the final answer equals `target` after trimming.
    ExactMatch { target: String },
    /// Reward is the environment's Bernoulli outcome for the sampled action.
    Bernoulli {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reference: Option<String>,
    },
}

impl Grader {
    pub fn key(&self) -> &'static str {
        match self {
            Grader::ExactMatch { .. } => "exact_match",
            Grader::Bernoulli { .. } => "bernoulli",
        }
    }

    pub fn grade(&self, content: &TrajectoryContent) -> Result<f64, RolloutError> {
        match (self, content) {
            (Grader::ExactMatch { target }, TrajectoryContent::Text(text)) => {
                Ok(if final_answer(text) == target.trim() { 1.0 } else { 0.0 })
            }
            (Grader::Bernoulli { .. }, TrajectoryContent::Action { success, .. }) => {
                Ok(if *success { 1.0 } else { 0.0 })
            }
            (grader, content) => Err(RolloutError::Grading {
                grader: grader.key(),
                content: content.kind(),
            }),
        }
    }
}

/// Text after the last `Answer:` marker, or the whole reply, trimmed.
pub fn final_answer(text: &str) -> &str {
    match text.rfind("Answer:") {
        Some(pos) => text[pos + "Answer:".len()..].trim(),
        None => text.trim(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub payload: String,
    #[serde(flatten)]
    pub grader: Grader,
}

impl Problem {
    /// Reference answer handed to reflection, when the grader has one.
    pub fn ground_truth(&self) -> Option<&str> {
        match &self.grader {
            Grader::ExactMatch { target } => Some(target),
            Grader::Bernoulli { reference } => reference.as_deref(),
        }
    }
}

/// Reads a problem set with one JSON object per line.
pub fn load_problems(reader: impl BufRead) -> Result<Vec<Problem>, RolloutError> {
    let mut problems: Vec<Problem> = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let problem: Problem = serde_json::from_str(&line).map_err(|e| RolloutError::ProblemSet {
            line: n + 1,
            message: e.to_string(),
        })?;
        if problems.iter().any(|p| p.id == problem.id) {
            return Err(RolloutError::ProblemSet {
                line: n + 1,
                message: format!("duplicate problem id {:?}", problem.id),
            });
        }
        problems.push(problem);
    }
    Ok(problems)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryContent {
    Action { index: usize, success: bool },
    Text(String),
}

impl TrajectoryContent {
    fn kind(&self) -> &'static str {
        match self {
            TrajectoryContent::Action { .. } => "action",
            TrajectoryContent::Text(_) => "text",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: NodeId,
    pub problem_id: String,
    pub content: TrajectoryContent,
    pub reward: f64,
}

/// Prompt as seen by a sampler.
#[derive(Debug, Clone, Copy)]
pub struct PromptRef<'a> {
    pub id: NodeId,
    pub text: &'a str,
}

/// Produces one rollout for a prompt and problem.
pub trait Sampler: Sync {
    fn generate(
        &self,
        prompt: PromptRef<'_>,
        problem: &Problem,
        rng: &mut ChaCha8Rng,
    ) -> Result<TrajectoryContent, TransportError>;
}

/// Graded rollouts for `M` prompts × `B` problems × `N` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutBatch {
    pub prompt_ids: Vec<NodeId>,
    pub prompt_texts: Vec<String>,
    pub problem_ids: Vec<String>,
    pub group_size: usize,
    /// Ordered by prompt, then problem, then sample.
    pub trajectories: Vec<Trajectory>,
    /// `values[i][b]` is the mean reward of prompt `i` on problem `b`.
    pub values: Vec<Vec<f64>>,
}

impl RolloutBatch {
    pub fn num_prompts(&self) -> usize {
        self.prompt_ids.len()
    }

    pub fn num_problems(&self) -> usize {
        self.problem_ids.len()
    }

    pub fn group(&self, i: usize, b: usize) -> &[Trajectory] {
        let n = self.group_size;
        let start = (i * self.num_problems() + b) * n;
        &self.trajectories[start..start + n]
    }

    /// The prompt × problem return matrix.
    pub fn phi(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Recomputes group means from the stored trajectories.
    pub fn recompute_values(&self) -> Vec<Vec<f64>> {
        (0..self.num_prompts())
            .map(|i| {
                (0..self.num_problems())
                    .map(|b| group_mean(self.group(i, b)))
                    .collect()
            })
            .collect()
    }

    pub fn mean_reward(&self) -> f64 {
        let total: f64 = self.trajectories.iter().map(|t| t.reward).sum();
        total / self.trajectories.len() as f64
    }
}

fn group_mean(group: &[Trajectory]) -> f64 {
    group.iter().map(|t| t.reward).sum::<f64>() / group.len() as f64
}

/// Samples and grades every (prompt, problem, sample) cell.
///
/// Cell `(i, b, j)` draws from the stream `key.indices([i, b, j])`, so the
/// batch is reproducible regardless of worker scheduling. Any failure
/// discards the whole batch.
pub fn sample_batch<S: Sampler + ?Sized>(
    sampler: &S,
    prompts: &[PromptRef<'_>],
    problems: &[Problem],
    n: usize,
    key: StreamKey,
) -> Result<RolloutBatch, RolloutError> {
    if n == 0 || prompts.is_empty() || problems.is_empty() {
        return Err(RolloutError::InvalidRequest(format!(
            "need N >= 1 and non-empty prompts/problems, got N={n}, M={}, B={}",
            prompts.len(),
            problems.len()
        )));
    }
    let (m, b_count) = (prompts.len(), problems.len());
    let trajectories = (0..m * b_count * n)
        .into_par_iter()
        .map(|cell| {
            let (i, rest) = (cell / (b_count * n), cell % (b_count * n));
            let (b, j) = (rest / n, rest % n);
            let (prompt, problem) = (prompts[i], &problems[b]);
            let mut rng = key.indices(&[i as u64, b as u64, j as u64]).rng();
            let content = sampler
                .generate(prompt, problem, &mut rng)
                .map_err(|source| RolloutError::Transport {
                    prompt_id: prompt.id,
                    problem_id: problem.id.clone(),
                    source,
                })?;
            let reward = problem.grader.grade(&content)?.clamp(0.0, 1.0);
            Ok(Trajectory {
                prompt_id: prompt.id,
                problem_id: problem.id.clone(),
                content,
                reward,
            })
        })
        .collect::<Result<Vec<_>, RolloutError>>()?;

    let mut batch = RolloutBatch {
        prompt_ids: prompts.iter().map(|p| p.id).collect(),
        prompt_texts: prompts.iter().map(|p| p.text.to_string()).collect(),
        problem_ids: problems.iter().map(|p| p.id.clone()).collect(),
        group_size: n,
        trajectories,
        values: Vec::new(),
    };
    batch.values = batch.recompute_values();
    Ok(batch)
}

/// First index holding the maximum; NaN never wins.
fn first_argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Prompt with the largest row sum of Φ; ties go to the lowest index.
pub fn best_prompt(batch: &RolloutBatch) -> usize {
    first_argmax(batch.values.iter().map(|row| row.iter().sum::<f64>()))
}

/// For each prompt, the problems on which it had the top column value.
/// Column ties go to the lowest prompt index, so the sets partition the batch.
pub fn per_problem_winners(batch: &RolloutBatch) -> Vec<Vec<usize>> {
    let mut wins = vec![Vec::new(); batch.num_prompts()];
    for b in 0..batch.num_problems() {
        let winner = first_argmax(batch.values.iter().map(|row| row[b]));
        wins[winner].push(b);
    }
    wins
}

/// Problems where prompt `i` both failed and succeeded: `0 < V < 1`.
pub fn reflection_eligible(batch: &RolloutBatch, i: usize) -> Vec<usize> {
    batch.values[i]
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0 && v < 1.0)
        .map(|(b, _)| b)
        .collect()
}
