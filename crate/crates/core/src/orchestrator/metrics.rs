//! The metrics stream: one JSON object per line, a header then one record
//! per iteration. It carries enough to re-derive every rating offline.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::genetic::GeneticConfig;
use crate::population::{NodeId, Origin};
use crate::rating::{crossover_fusion_rating, rank_update, Rating, RatingConfig, Ranking};

pub const METRICS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeaderRecord {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub rating: RatingConfig,
    pub genetic: GeneticConfig,
    pub root_id: NodeId,
    pub root_rating: Rating,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Select,
    Rollout,
    RlUpdate,
    RatingUpdate,
    Mutation,
    Crossover,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub stage: Stage,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl Event {
    pub fn new(stage: Stage, status: &str, detail: Option<String>) -> Self {
        Self { stage, status: status.into(), detail }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildRecord {
    pub id: NodeId,
    pub origin: Origin,
    pub parent_ids: Vec<NodeId>,
    pub rating: Rating,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub participants: Vec<NodeId>,
    pub problem_ids: Vec<String>,
    /// Per-participant mean reward over the problem batch.
    pub values: Vec<f64>,
    pub mean_reward: f64,
    pub rollout_attempts: u32,
    /// Absent when fewer than two prompts took part.
    pub ranking: Option<Ranking>,
    /// Participant ratings after the tournament.
    pub posteriors: Vec<Rating>,
    /// Index of the batch's best prompt (Φ row-sum argmax).
    pub best_index: usize,
    pub children: Vec<ChildRecord>,
    pub events: Vec<Event>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsLine {
    Header(HeaderRecord),
    Iteration(IterationRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub iterations: u64,
    pub ratings: BTreeMap<NodeId, Rating>,
    /// Logged ratings that differ from the recomputed ones, by iteration.
    pub mismatches: Vec<String>,
}

/// Recomputes every rating from the tournaments and births in a metrics
/// log and checks them against the logged values.
pub fn replay_ratings(reader: impl BufRead) -> Result<ReplayReport, OrchestratorError> {
    let mut lines = reader.lines().enumerate();
    let bad = |line: usize, message: String| OrchestratorError::Metrics { line: line + 1, message };
    let header = match lines.next() {
        Some((n, line)) => match serde_json::from_str::<MetricsLine>(&line?).map_err(|e| bad(n, e.to_string()))? {
            MetricsLine::Header(h) => h,
            MetricsLine::Iteration(_) => return Err(bad(n, "first line is not a header".into())),
        },
        None => return Err(bad(0, "empty metrics log".into())),
    };
    if header.version != METRICS_VERSION {
        return Err(bad(0, format!("unsupported metrics version {}", header.version)));
    }
    let mut ratings = BTreeMap::from([(header.root_id, header.root_rating)]);
    let mut mismatches = Vec::new();
    let mut iterations = 0;
    for (n, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = match serde_json::from_str::<MetricsLine>(&line).map_err(|e| bad(n, e.to_string()))? {
            MetricsLine::Iteration(r) => r,
            MetricsLine::Header(_) => return Err(bad(n, "second header".into())),
        };
        let lookup = |ratings: &BTreeMap<NodeId, Rating>, id: &NodeId| {
            ratings.get(id).copied().ok_or_else(|| bad(n, format!("unknown prompt {id}")))
        };
        let priors = rec
            .participants
            .iter()
            .map(|id| lookup(&ratings, id))
            .collect::<Result<Vec<_>, _>>()?;
        let posteriors = match &rec.ranking {
            Some(ranking) => rank_update(&priors, ranking, &header.rating)?,
            None => priors,
        };
        if posteriors != rec.posteriors {
            mismatches.push(format!("iteration {}: tournament posteriors differ", rec.iteration));
        }
        for (id, r) in rec.participants.iter().zip(&posteriors) {
            ratings.insert(*id, *r);
        }
        for child in &rec.children {
            let rating = match child.origin {
                Origin::Mutation => {
                    let parent = child.parent_ids.first().ok_or_else(|| bad(n, "mutation without parent".into()))?;
                    header.genetic.mutation_rating(&lookup(&ratings, parent)?)
                }
                Origin::Crossover => crossover_fusion_rating(&posteriors, header.genetic.delta_sigma)?,
                Origin::Root => return Err(bad(n, "a child cannot be a root".into())),
            };
            if rating != child.rating {
                mismatches.push(format!("iteration {}: rating of child {} differs", rec.iteration, child.id));
            }
            ratings.insert(child.id, rating);
        }
        iterations += 1;
    }
    Ok(ReplayReport { iterations, ratings, mismatches })
}

