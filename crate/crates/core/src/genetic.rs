//! Mutation and crossover: turn one iteration's rollouts into at most one
//! child of each kind, via the reflection pipeline.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::population::{ChildDraft, NodeId, Origin, PromptNode};
use crate::rating::{crossover_fusion_rating, mutation_child_rating, mutation_child_rating_additive, Rating};
use crate::reflect::{self, apply_edits, CrossoverEvidence, EditScript, ReflectError, ReflectionLesson, Reflector};
use crate::rollout::{best_prompt, per_problem_winners, reflection_eligible, Problem, RolloutBatch};

#[derive(Debug, Error, PartialEq)]
#[error("invalid genetic config: {0}")]
pub struct GeneticConfigError(String);

/// How a mutation child's σ grows from its parent's.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChildSigmaRule {
    /// σ' = sqrt(σ² + Δσ²)
    #[default]
    Quadrature,
    /// σ' = σ + Δσ
    Additive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneticConfig {
    pub delta_sigma: f64,
    pub p_crossover: f64,
    pub k_ops: usize,
    pub child_sigma_rule: ChildSigmaRule,
}

impl Default for GeneticConfig {
    fn default() -> Self {
        Self {
            delta_sigma: 1.0,
            p_crossover: 0.2,
            k_ops: 2,
            child_sigma_rule: ChildSigmaRule::Quadrature,
        }
    }
}

impl GeneticConfig {
    pub fn validate(&self) -> Result<(), GeneticConfigError> {
        if !(self.delta_sigma >= 0.0 && self.delta_sigma.is_finite()) {
            return Err(GeneticConfigError(format!("delta_sigma must be finite and >= 0, got {}", self.delta_sigma)));
        }
        if !(0.0..=1.0).contains(&self.p_crossover) {
            return Err(GeneticConfigError(format!("p_crossover must lie in [0, 1], got {}", self.p_crossover)));
        }
        if self.k_ops == 0 {
            return Err(GeneticConfigError("k_ops must be at least 1".into()));
        }
        Ok(())
    }

    pub fn mutation_rating(&self, parent: &Rating) -> Rating {
        match self.child_sigma_rule {
            ChildSigmaRule::Quadrature => mutation_child_rating(parent, self.delta_sigma),
            ChildSigmaRule::Additive => mutation_child_rating_additive(parent, self.delta_sigma),
        }
    }
}

/// What an operator did this iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Child(ChildDraft),
    /// Crossover's coin did not come up.
    NotFired,
    /// The operator ran but produced no child.
    Skipped(String),
}

impl Outcome {
    pub fn child(&self) -> Option<&ChildDraft> {
        match self {
            Outcome::Child(c) => Some(c),
            _ => None,
        }
    }
}

/// One iteration's evidence. `participants` line up with the batch's
/// prompts and carry post-tournament ratings; `problems` line up with its
/// problems.
pub struct Evidence<'a> {
    pub batch: &'a RolloutBatch,
    pub participants: &'a [PromptNode],
    pub problems: &'a [Problem],
    pub backend: &'a dyn Reflector,
    pub max_principle_chars: usize,
}

impl Evidence<'_> {
    fn check(&self) -> Result<(), String> {
        let ids: Vec<NodeId> = self.participants.iter().map(|n| n.id).collect();
        if ids != self.batch.prompt_ids {
            return Err("participants do not match the batch prompts".into());
        }
        if self.problems.iter().map(|p| &p.id).ne(self.batch.problem_ids.iter()) {
            return Err("problems do not match the batch problems".into());
        }
        Ok(())
    }
}

fn skipped(what: &str, cause: impl std::fmt::Display) -> Outcome {
    let reason = format!("{what}: {cause}");
    log::info!("{reason}");
    Outcome::Skipped(reason)
}

fn lessons_for(ev: &Evidence<'_>, k: usize, eligible: &[usize], k_ops: usize) -> Vec<ReflectionLesson> {
    let parent = &ev.participants[k];
    eligible
        .par_iter()
        .map(|&b| {
            let problem = &ev.problems[b];
            let summaries = reflect::summarize_trajectories(ev.backend, &parent.text, problem, ev.batch.group(k, b))?;
            reflect::critique(ev.backend, &summaries, &parent.text, problem, k_ops)
        })
        .collect::<Vec<Result<ReflectionLesson, ReflectError>>>()
        .into_iter()
        .zip(eligible)
        .filter_map(|(r, &b)| match r {
            Ok(lesson) => Some(lesson),
            Err(e) => {
                log::warn!("reflection on problem {} dropped: {e}", ev.problems[b].id);
                None
            }
        })
        .collect()
}

fn apply_script(parent: &str, script: &EditScript) -> Result<String, String> {
    if script.is_empty() {
        return Err("empty edit script".into());
    }
    let text = apply_edits(parent, script).map_err(|e| e.to_string())?;
    if text == parent {
        return Err("edits left the prompt unchanged".into());
    }
    Ok(text)
}

/// Reflects on the best prompt's own rollouts and edits it.
pub fn mutate(ev: &Evidence<'_>, cfg: &GeneticConfig) -> Outcome {
    if let Err(e) = ev.check() {
        return skipped("mutation", e);
    }
    let k = best_prompt(ev.batch);
    let parent = &ev.participants[k];
    let eligible = reflection_eligible(ev.batch, k);
    if eligible.is_empty() {
        return skipped("mutation", format!("{} has no problem with mixed outcomes", parent.id));
    }
    let lessons = lessons_for(ev, k, &eligible, cfg.k_ops);
    if lessons.is_empty() {
        return skipped("mutation", "every reflection failed");
    }
    let script = match reflect::aggregate(ev.backend, &parent.text, &lessons, ev.max_principle_chars) {
        Ok(s) => s,
        Err(e) => return skipped("mutation", e),
    };
    match apply_script(&parent.text, &script) {
        Ok(text) => Outcome::Child(ChildDraft {
            text,
            parent_ids: vec![parent.id],
            origin: Origin::Mutation,
            rating: cfg.mutation_rating(&parent.rating),
        }),
        Err(e) => skipped("mutation", e),
    }
}

/// With probability `p_crossover`, recombines what the per-problem winners
/// did well into the best prompt. Always consumes one uniform draw.
pub fn maybe_crossover<R: Rng + ?Sized>(ev: &Evidence<'_>, cfg: &GeneticConfig, rng: &mut R) -> Outcome {
    let u: f64 = rng.gen();
    if u >= cfg.p_crossover {
        return Outcome::NotFired;
    }
    if let Err(e) = ev.check() {
        return skipped("crossover", e);
    }
    let k = best_prompt(ev.batch);
    let top = &ev.participants[k];
    let wins = per_problem_winners(ev.batch);
    let evidence: Vec<CrossoverEvidence> = ev
        .participants
        .iter()
        .zip(&wins)
        .map(|(node, won)| CrossoverEvidence {
            prompt_id: node.id,
            prompt_text: node.text.clone(),
            won_problems: won.iter().map(|&b| ev.problems[b].id.clone()).collect(),
        })
        .collect();
    let script = match reflect::crossover_reflect(ev.backend, top.id, &top.text, &evidence, ev.max_principle_chars) {
        Ok(Some(s)) => s,
        Ok(None) => return skipped("crossover", "fewer than two prompts won a problem"),
        Err(e) => return skipped("crossover", e),
    };
    let text = match apply_script(&top.text, &script) {
        Ok(t) => t,
        Err(e) => return skipped("crossover", e),
    };
    let ratings: Vec<Rating> = ev.participants.iter().map(|n| n.rating).collect();
    let rating = match crossover_fusion_rating(&ratings, cfg.delta_sigma) {
        Ok(r) => r,
        Err(e) => return skipped("crossover", e),
    };
    let mut parent_ids = vec![top.id];
    parent_ids.extend(
        ev.participants
            .iter()
            .zip(&wins)
            .filter(|(n, won)| !won.is_empty() && n.id != top.id)
            .map(|(n, _)| n.id),
    );
    Outcome::Child(ChildDraft { text, parent_ids, origin: Origin::Crossover, rating })
}
