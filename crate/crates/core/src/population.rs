//! The evolving prompt population: an append-only tree of rated prompts,
//! a sliding selection window, tournaments and tree export.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rating::{rank_update, ucb_score, Ranking, Rating, RatingConfig, RatingError};

#[derive(Debug, Error)]
pub enum PopulationError {
    #[error("unknown prompt id {0}")]
    UnknownId(NodeId),
    #[error("invalid lineage: {0}")]
    Lineage(String),
    #[error("tournament has {participants} participants but {values} values")]
    ShapeMismatch { participants: usize, values: usize },
    #[error("duplicate participant {0}")]
    DuplicateParticipant(NodeId),
    #[error("unknown tree format {0:?}")]
    UnknownFormat(String),
    #[error("window size must be at least 1")]
    EmptyWindow,
    #[error(transparent)]
    Rating(#[from] RatingError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Root,
    Mutation,
    Crossover,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Root => "root",
            Origin::Mutation => "mutation",
            Origin::Crossover => "crossover",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptNode {
    pub id: NodeId,
    pub text: String,
    pub parent_ids: Vec<NodeId>,
    pub origin: Origin,
    pub birth_iteration: u64,
    pub rating: Rating,
}

/// A prompt waiting to be appended; the population assigns its id.
#[derive(Debug, Clone, PartialEq)]
pub struct ChildDraft {
    pub text: String,
    pub parent_ids: Vec<NodeId>,
    pub origin: Origin,
    pub rating: Rating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    nodes: Vec<PromptNode>,
    window_size: usize,
}

impl Population {
    pub fn new(root_text: impl Into<String>, root_rating: Rating, window_size: usize) -> Result<Self, PopulationError> {
        if window_size == 0 {
            return Err(PopulationError::EmptyWindow);
        }
        Ok(Self {
            nodes: vec![PromptNode {
                id: NodeId(0),
                text: root_text.into(),
                parent_ids: Vec::new(),
                origin: Origin::Root,
                birth_iteration: 0,
                rating: root_rating,
            }],
            window_size,
        })
    }

    pub fn nodes(&self) -> &[PromptNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn root(&self) -> &PromptNode {
        &self.nodes[0]
    }

    // Ids are dense append positions.
    pub fn get(&self, id: NodeId) -> Result<&PromptNode, PopulationError> {
        usize::try_from(id.0)
            .ok()
            .and_then(|i| self.nodes.get(i))
            .ok_or(PopulationError::UnknownId(id))
    }

    fn get_mut(&mut self, id: NodeId) -> Result<&mut PromptNode, PopulationError> {
        usize::try_from(id.0)
            .ok()
            .and_then(|i| self.nodes.get_mut(i))
            .ok_or(PopulationError::UnknownId(id))
    }

    pub fn set_rating(&mut self, id: NodeId, rating: Rating) -> Result<(), PopulationError> {
        self.get_mut(id)?.rating = rating;
        Ok(())
    }

    /// Latest `window_size` nodes in append order.
    pub fn window(&self) -> &[PromptNode] {
        &self.nodes[self.nodes.len().saturating_sub(self.window_size)..]
    }

    /// Appends a child born at `birth_iteration`, checking lineage.
    pub fn append(&mut self, draft: ChildDraft, birth_iteration: u64) -> Result<NodeId, PopulationError> {
        let lineage = |msg: String| Err(PopulationError::Lineage(msg));
        match draft.origin {
            Origin::Root => return lineage("only the initial node may be a root".into()),
            Origin::Mutation if draft.parent_ids.len() != 1 => {
                return lineage(format!("mutation child needs exactly one parent, got {}", draft.parent_ids.len()))
            }
            Origin::Crossover if draft.parent_ids.is_empty() => {
                return lineage("crossover child needs at least one parent".into())
            }
            _ => {}
        }
        for (i, &pid) in draft.parent_ids.iter().enumerate() {
            if draft.parent_ids[..i].contains(&pid) {
                return lineage(format!("parent {pid} listed twice"));
            }
            let parent = self.get(pid)?;
            if parent.birth_iteration >= birth_iteration {
                return lineage(format!(
                    "parent {pid} born at {} is not older than child born at {birth_iteration}",
                    parent.birth_iteration
                ));
            }
        }
        let id = NodeId(self.nodes.len() as u64);
        self.nodes.push(PromptNode {
            id,
            text: draft.text,
            parent_ids: draft.parent_ids,
            origin: draft.origin,
            birth_iteration,
            rating: draft.rating,
        });
        Ok(id)
    }

    /// Rates one tournament from per-participant values and writes the
    /// posteriors back. Returns the ranking over `participants` positions.
    ///
    /// Higher value ranks first; exactly equal values draw. The chain order
    /// among equal values follows node id, so the result does not depend on
    /// how `participants` is ordered.
    pub fn record_tournament(
        &mut self,
        participants: &[NodeId],
        values: &[f64],
        cfg: &RatingConfig,
    ) -> Result<Ranking, PopulationError> {
        if participants.len() != values.len() {
            return Err(PopulationError::ShapeMismatch {
                participants: participants.len(),
                values: values.len(),
            });
        }
        for (i, id) in participants.iter().enumerate() {
            if participants[..i].contains(id) {
                return Err(PopulationError::DuplicateParticipant(*id));
            }
        }
        let ratings = participants
            .iter()
            .map(|&id| self.get(id).map(|n| n.rating))
            .collect::<Result<Vec<_>, _>>()?;

        let mut by_id: Vec<usize> = (0..participants.len()).collect();
        by_id.sort_by_key(|&i| participants[i]);
        let sorted_values: Vec<f64> = by_id.iter().map(|&i| values[i]).collect();
        let sorted_ranking = Ranking::from_scores(&sorted_values)?;
        let ranking = Ranking {
            order: sorted_ranking.order.iter().map(|&p| by_id[p]).collect(),
            ties: sorted_ranking.ties,
        };

        let posteriors = rank_update(&ratings, &ranking, cfg)?;
        for (&id, post) in participants.iter().zip(posteriors) {
            self.get_mut(id)?.rating = post;
        }
        Ok(ranking)
    }

    pub fn export_tree(&self, format: TreeFormat) -> Result<Vec<u8>, PopulationError> {
        match format {
            TreeFormat::Json => Ok(serde_json::to_vec_pretty(self)?),
            TreeFormat::Dot => Ok(self.to_dot().into_bytes()),
        }
    }

    pub fn import_json(bytes: &[u8]) -> Result<Self, PopulationError> {
        let pop: Population = serde_json::from_slice(bytes)?;
        pop.validate()?;
        Ok(pop)
    }

    /// Checks ids, lineage and window invariants of a deserialized population.
    pub fn validate(&self) -> Result<(), PopulationError> {
        if self.window_size == 0 {
            return Err(PopulationError::EmptyWindow);
        }
        let Some(root) = self.nodes.first() else {
            return Err(PopulationError::Lineage("population has no root".into()));
        };
        if root.origin != Origin::Root || !root.parent_ids.is_empty() || root.id != NodeId(0) {
            return Err(PopulationError::Lineage("first node must be a parentless root".into()));
        }
        let mut rebuilt = Population {
            nodes: vec![root.clone()],
            window_size: self.window_size,
        };
        for node in &self.nodes[1..] {
            if node.id != NodeId(rebuilt.nodes.len() as u64) {
                return Err(PopulationError::Lineage(format!("node id {} out of sequence", node.id)));
            }
            rebuilt.append(
                ChildDraft {
                    text: node.text.clone(),
                    parent_ids: node.parent_ids.clone(),
                    origin: node.origin,
                    rating: node.rating,
                },
                node.birth_iteration,
            )?;
        }
        Ok(())
    }

    fn to_dot(&self) -> String {
        let mut out = String::from("digraph population {\n  rankdir=TB;\n");
        for node in &self.nodes {
            let first_line = node.text.lines().next().unwrap_or("");
            let snippet: String = first_line.chars().take(40).collect();
            let _ = writeln!(
                out,
                "  {} [label=\"{}\\n{}\\nmu={:.2} sigma={:.2}\\n{}\"];",
                node.id,
                node.id,
                node.origin.as_str(),
                node.rating.mu(),
                node.rating.sigma(),
                escape_dot(&snippet)
            );
        }
        for node in &self.nodes {
            for parent in &node.parent_ids {
                let _ = writeln!(out, "  {} -> {} [label=\"{}\"];", parent, node.id, node.origin.as_str());
            }
        }
        out.push_str("}\n");
        out
    }
}

fn escape_dot(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeFormat {
    Dot,
    Json,
}

impl FromStr for TreeFormat {
    type Err = PopulationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dot" => Ok(TreeFormat::Dot),
            "json" => Ok(TreeFormat::Json),
            other => Err(PopulationError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Softmax,
    /// Top UCB prompt plus a uniform sample of the rest of the window.
    #[default]
    Simplified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionPolicy {
    pub mode: SelectionMode,
    pub lambda: f64,
    pub temperature: f64,
    pub m: usize,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        Self {
            mode: SelectionMode::Simplified,
            lambda: 2.0,
            temperature: 1.0,
            m: 3,
        }
    }
}

/// Index of the highest UCB score; ties go to the lowest id.
fn argmax_ucb(nodes: &[PromptNode], lambda: f64) -> usize {
    let mut best = 0;
    for (i, node) in nodes.iter().enumerate().skip(1) {
        let (s, b) = (ucb_score(&node.rating, lambda), ucb_score(&nodes[best].rating, lambda));
        if s > b || (s == b && node.id < nodes[best].id) {
            best = i;
        }
    }
    best
}

/// Samples up to `policy.m` distinct prompts from the window.
pub fn select<R: Rng + ?Sized>(pop: &Population, policy: &SelectionPolicy, rng: &mut R) -> Vec<NodeId> {
    let window = pop.window();
    let m = policy.m.min(window.len());
    if m == 0 {
        return Vec::new();
    }
    match policy.mode {
        SelectionMode::Simplified => {
            let top = argmax_ucb(window, policy.lambda);
            let rest: Vec<usize> = (0..window.len()).filter(|&i| i != top).collect();
            let mut picked = vec![window[top].id];
            picked.extend(
                index::sample(rng, rest.len(), m - 1)
                    .into_iter()
                    .map(|k| window[rest[k]].id),
            );
            picked
        }
        SelectionMode::Softmax => {
            let scores: Vec<f64> = window
                .iter()
                .map(|n| ucb_score(&n.rating, policy.lambda) / policy.temperature)
                .collect();
            let mut remaining: Vec<usize> = (0..window.len()).collect();
            let mut picked = Vec::with_capacity(m);
            while picked.len() < m {
                let max = remaining
                    .iter()
                    .map(|&i| scores[i])
                    .fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = remaining.iter().map(|&i| (scores[i] - max).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                let mut chosen = remaining.len() - 1;
                for (k, w) in weights.iter().enumerate() {
                    if u < *w {
                        chosen = k;
                        break;
                    }
                    u -= w;
                }
                picked.push(window[remaining.remove(chosen)].id);
            }
            picked
        }
    }
}
