//! Desk-scale stand-in for an LLM task distribution.
//!
//! Each problem succeeds with probability
//! `clamp(base_rate + quality_gain * quality + action_reward[a], 0, 1)`,
//! where `quality` counts the problem's beneficial lexicon tokens present in
//! the prompt and `a` is the action drawn from the toy policy.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Grader, Problem, PromptRef, RolloutError, Sampler, TrajectoryContent};
use crate::policytoy::ToyPolicy;
use crate::transport::TransportError;

const BUILTIN_FIXTURE: &str = include_str!("../../fixtures/synthetic.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProblem {
    pub id: String,
    pub payload: String,
    pub base_rate: f64,
    pub beneficial_tokens: Vec<String>,
    pub action_rewards: Vec<f64>,
    /// Per-token logit bonus for each action, applied when the token
    /// appears in the prompt.
    #[serde(default)]
    pub feature_weights: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFixture {
    pub lexicon: Vec<String>,
    pub quality_gain: f64,
    pub num_actions: usize,
    pub root_prompt: String,
    pub problems: Vec<SyntheticProblem>,
}

impl SyntheticFixture {
    pub fn validate(&self) -> Result<(), String> {
        if self.num_actions == 0 {
            return Err("num_actions must be positive".into());
        }
        if self.problems.is_empty() {
            return Err("fixture has no problems".into());
        }
        for tok in &self.lexicon {
            if tok.is_empty() || tok.chars().any(|c| !c.is_ascii_lowercase() && !c.is_ascii_digit()) {
                return Err(format!("lexicon token {tok:?} must be a lowercase word"));
            }
        }
        let mut ids = BTreeSet::new();
        for p in &self.problems {
            if !ids.insert(&p.id) {
                return Err(format!("duplicate problem id {:?}", p.id));
            }
            if !(0.0..=1.0).contains(&p.base_rate) {
                return Err(format!("{}: base_rate outside [0, 1]", p.id));
            }
            if p.action_rewards.len() != self.num_actions {
                return Err(format!("{}: expected {} action rewards", p.id, self.num_actions));
            }
            for tok in p.beneficial_tokens.iter().chain(p.feature_weights.keys()) {
                if !self.lexicon.contains(tok) {
                    return Err(format!("{}: token {tok:?} is not in the lexicon", p.id));
                }
            }
            if p.feature_weights.values().any(|w| w.len() != self.num_actions) {
                return Err(format!("{}: feature weights need {} entries", p.id, self.num_actions));
            }
        }
        Ok(())
    }
}

/// Lowercased alphanumeric words of a prompt.
pub fn prompt_tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_ascii_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEnv {
    fixture: SyntheticFixture,
    index: BTreeMap<String, usize>,
}

impl SyntheticEnv {
    pub fn new(fixture: SyntheticFixture) -> Result<Self, RolloutError> {
        fixture.validate().map_err(RolloutError::InvalidRequest)?;
        let index = fixture
            .problems
            .iter()
            .enumerate()
            .map(|(i, p)| (p.id.clone(), i))
            .collect();
        Ok(Self { fixture, index })
    }

    /// The fixture shipped with the crate.
    pub fn builtin() -> Self {
        let fixture = serde_json::from_str(BUILTIN_FIXTURE).expect("builtin fixture parses");
        Self::new(fixture).expect("builtin fixture is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, RolloutError> {
        let fixture = serde_json::from_str(text).map_err(|e| RolloutError::InvalidRequest(e.to_string()))?;
        Self::new(fixture)
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, RolloutError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn fixture(&self) -> &SyntheticFixture {
        &self.fixture
    }

    pub fn lexicon(&self) -> &[String] {
        &self.fixture.lexicon
    }

    pub fn problem_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn problems(&self) -> Vec<Problem> {
        self.fixture
            .problems
            .iter()
            .map(|p| Problem {
                id: p.id.clone(),
                payload: p.payload.clone(),
                grader: Grader::Bernoulli {
                    reference: Some(p.beneficial_tokens.join(", ")),
                },
            })
            .collect()
    }

    /// Beneficial tokens of problem `x` that appear in the prompt.
    pub fn quality(&self, tokens: &BTreeSet<String>, x: usize) -> usize {
        self.fixture.problems[x]
            .beneficial_tokens
            .iter()
            .filter(|t| tokens.contains(*t))
            .count()
    }

    /// Distinct lexicon tokens present in the prompt.
    pub fn global_quality(&self, prompt: &str) -> usize {
        let tokens = prompt_tokens(prompt);
        self.fixture.lexicon.iter().filter(|t| tokens.contains(*t)).count()
    }

    pub fn success_probability(&self, tokens: &BTreeSet<String>, x: usize, action: usize) -> f64 {
        let p = &self.fixture.problems[x];
        let raw = p.base_rate + self.fixture.quality_gain * self.quality(tokens, x) as f64 + p.action_rewards[action];
        raw.clamp(0.0, 1.0)
    }

    /// Exact expected reward of a prompt on problem `x` under `policy`.
    pub fn expected_reward(&self, policy: &ToyPolicy, prompt: &str, x: usize) -> f64 {
        let tokens = prompt_tokens(prompt);
        policy
            .action_probs_for_tokens(&tokens, x)
            .iter()
            .enumerate()
            .map(|(a, p)| p * self.success_probability(&tokens, x, a))
            .sum()
    }

    /// Expected reward averaged over every problem in the fixture.
    pub fn evaluate(&self, policy: &ToyPolicy, prompt: &str) -> f64 {
        let n = self.fixture.problems.len();
        (0..n).map(|x| self.expected_reward(policy, prompt, x)).sum::<f64>() / n as f64
    }
}

/// Rollouts from the toy policy acting in the synthetic environment.
pub struct SyntheticSampler<'a> {
    pub env: &'a SyntheticEnv,
    pub policy: &'a ToyPolicy,
}

impl Sampler for SyntheticSampler<'_> {
    fn generate(
        &self,
        prompt: PromptRef<'_>,
        problem: &Problem,
        rng: &mut ChaCha8Rng,
    ) -> Result<TrajectoryContent, TransportError> {
        let x = self
            .env
            .problem_index(&problem.id)
            .ok_or_else(|| TransportError::Backend(format!("synthetic env has no problem {:?}", problem.id)))?;
        let tokens = prompt_tokens(prompt.text);
        let probs = self.policy.action_probs_for_tokens(&tokens, x);
        let mut u: f64 = rng.gen();
        let mut action = probs.len() - 1;
        for (a, p) in probs.iter().enumerate() {
            if u < *p {
                action = a;
                break;
            }
            u -= p;
        }
        let success = rng.gen::<f64>() < self.env.success_probability(&tokens, x, action);
        Ok(TrajectoryContent::Action { index: action, success })
    }
}
