//! Deterministic reflector for the synthetic environment. It knows the
//! token lexicon and reasons only about which tokens a prompt lacks.

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};

use super::{CrossoverEvidence, Edit, EditScript, ReflectError, ReflectionLesson, Reflector, SystemPrompt, TrajectorySummary};
use crate::population::NodeId;
use crate::rollout::synthetic::prompt_tokens;
use crate::rollout::{Problem, Trajectory};

/// The principle the mock writes to teach `token`.
pub fn principle_for_token(token: &str) -> String {
    format!("Use the {token} strategy before committing to an answer.")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockReflector {
    lexicon: Vec<String>,
}

impl MockReflector {
    pub fn new(lexicon: Vec<String>) -> Self {
        Self { lexicon }
    }

    fn lexicon_tokens(&self, text: &str) -> BTreeSet<String> {
        let tokens = prompt_tokens(text);
        self.lexicon.iter().filter(|t| tokens.contains(*t)).cloned().collect()
    }
}

fn content_hash(t: &Trajectory) -> String {
    let bytes = serde_json::to_vec(&t.content).expect("trajectory content serializes");
    Sha256::digest(&bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

impl Reflector for MockReflector {
    fn summarize(&self, _: &str, _: &Problem, rollouts: &[Trajectory]) -> Result<Vec<TrajectorySummary>, ReflectError> {
        Ok(rollouts
            .iter()
            .map(|t| TrajectorySummary {
                success: t.reward >= super::SUCCESS_THRESHOLD,
                reward: t.reward,
                text: format!("reward={:.3} content={}", t.reward, content_hash(t)),
            })
            .collect())
    }

    /// Adds a principle for the first lexicon token of the ground truth
    /// that the prompt does not mention.
    fn critique(&self, prompt: &str, problem: &Problem, _: &[TrajectorySummary], k_ops: usize) -> Result<ReflectionLesson, ReflectError> {
        let present = prompt_tokens(prompt);
        let missing = problem
            .ground_truth()
            .unwrap_or_default()
            .split(',')
            .map(|t| t.trim().to_ascii_lowercase())
            .find(|t| self.lexicon.contains(t) && !present.contains(t));
        let (diagnosis, edits) = match missing {
            Some(tok) if k_ops > 0 => (
                format!("failing rollouts never apply '{tok}'"),
                vec![Edit::Add { text: principle_for_token(&tok) }],
            ),
            _ => ("no missing strategy identified".to_string(), Vec::new()),
        };
        Ok(ReflectionLesson { problem_id: problem.id.clone(), diagnosis, edits })
    }

    /// Drops duplicate adds and folds modifies of the same principle into
    /// one, joining their texts with "; ".
    fn aggregate(&self, _: &str, lessons: &[ReflectionLesson]) -> Result<EditScript, ReflectError> {
        let mut out: Vec<Edit> = Vec::new();
        for edit in lessons.iter().flat_map(|l| &l.edits) {
            match edit {
                Edit::Add { text } if out.iter().any(|e| matches!(e, Edit::Add { text: t } if t == text)) => {}
                Edit::Modify { index, text } => {
                    let existing = out.iter_mut().find_map(|e| match e {
                        Edit::Modify { index: i, text: t } if i == index => Some(t),
                        _ => None,
                    });
                    match existing {
                        Some(t) if t != text => {
                            t.push_str("; ");
                            t.push_str(text);
                        }
                        Some(_) => {}
                        None => out.push(edit.clone()),
                    }
                }
                _ => out.push(edit.clone()),
            }
        }
        Ok(EditScript::new(out))
    }

    /// From each other winner, imports the principle that brings the most
    /// lexicon tokens the top prompt (plus earlier imports) lacks.
    fn crossover(&self, top_id: NodeId, top_prompt: &str, evidence: &[CrossoverEvidence]) -> Result<EditScript, ReflectError> {
        let top = SystemPrompt::parse(top_prompt);
        let mut covered = self.lexicon_tokens(top_prompt);
        let mut edits = Vec::new();
        for ev in evidence.iter().filter(|e| e.prompt_id != top_id && !e.won_problems.is_empty()) {
            let theirs = SystemPrompt::parse(&ev.prompt_text);
            let mut best: Option<(usize, &String)> = None;
            for p in &theirs.principles {
                if top.principles.contains(p) {
                    continue;
                }
                let gain = self.lexicon_tokens(p).difference(&covered).count();
                if gain > 0 && best.is_none_or(|(g, _)| gain > g) {
                    best = Some((gain, p));
                }
            }
            if let Some((_, p)) = best {
                covered.extend(self.lexicon_tokens(p));
                edits.push(Edit::Add { text: p.clone() });
            }
        }
        Ok(EditScript::new(edits))
    }
}
