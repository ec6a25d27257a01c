//! Tabular softmax policy over discrete actions, trained with
//! REINFORCE using a group-mean baseline and an optional KL pull toward
//! its initial parameters.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rollout::synthetic::{prompt_tokens, SyntheticFixture};
use crate::rollout::{RolloutBatch, TrajectoryContent};

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("problem {0:?} is not in the policy table")]
    UnknownProblem(String),
    #[error("action {action} out of range for {actions} actions")]
    ActionOutOfRange { action: usize, actions: usize },
    #[error("batch does not fit the policy: {0}")]
    Shape(String),
    #[error("invalid rl config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub learning_rate: f64,
    pub kl_beta: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self { learning_rate: 0.1, kl_beta: 0.0 }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(PolicyError::InvalidConfig(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return Err(PolicyError::InvalidConfig(format!("kl_beta must be non-negative, got {}", self.kl_beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    num_actions: usize,
    problem_ids: Vec<String>,
    /// Row-major `problems × actions` logits.
    theta: Vec<f64>,
    reference_theta: Vec<f64>,
    /// Per problem: token → per-action logit bonus.
    features: Vec<BTreeMap<String, Vec<f64>>>,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

impl ToyPolicy {
    /// Zero logits everywhere, prompt features from the fixture.
    pub fn from_fixture(fixture: &SyntheticFixture) -> Self {
        let problem_ids: Vec<String> = fixture.problems.iter().map(|p| p.id.clone()).collect();
        let features = fixture.problems.iter().map(|p| p.feature_weights.clone()).collect();
        Self::with_theta(problem_ids, fixture.num_actions, vec![0.0; fixture.problems.len() * fixture.num_actions], features)
    }

    /// A policy without prompt features; `theta` is row-major.
    pub fn tabular(problem_ids: Vec<String>, num_actions: usize, theta: Vec<f64>) -> Self {
        let features = vec![BTreeMap::new(); problem_ids.len()];
        Self::with_theta(problem_ids, num_actions, theta, features)
    }

    fn with_theta(
        problem_ids: Vec<String>,
        num_actions: usize,
        theta: Vec<f64>,
        features: Vec<BTreeMap<String, Vec<f64>>>,
    ) -> Self {
        assert!(num_actions > 0, "policy needs at least one action");
        assert_eq!(theta.len(), problem_ids.len() * num_actions, "theta shape");
        Self {
            num_actions,
            problem_ids,
            reference_theta: theta.clone(),
            theta,
            features,
        }
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn reference_theta(&self) -> &[f64] {
        &self.reference_theta
    }

    pub fn row(&self, problem_id: &str) -> Result<usize, PolicyError> {
        self.problem_ids
            .iter()
            .position(|p| p == problem_id)
            .ok_or_else(|| PolicyError::UnknownProblem(problem_id.to_string()))
    }

    fn bonus(&self, tokens: &BTreeSet<String>, x: usize) -> Vec<f64> {
        let mut bonus = vec![0.0; self.num_actions];
        for (tok, w) in &self.features[x] {
            if tokens.contains(tok) {
                for (b, w) in bonus.iter_mut().zip(w) {
                    *b += w;
                }
            }
        }
        bonus
    }

    fn logits(&self, theta: &[f64], tokens: &BTreeSet<String>, x: usize) -> Vec<f64> {
        let row = &theta[x * self.num_actions..(x + 1) * self.num_actions];
        row.iter().zip(self.bonus(tokens, x)).map(|(t, b)| t + b).collect()
    }

    pub fn action_probs_for_tokens(&self, tokens: &BTreeSet<String>, x: usize) -> Vec<f64> {
        softmax(&self.logits(&self.theta, tokens, x))
    }

    pub fn action_probs(&self, prompt: &str, problem_id: &str) -> Result<Vec<f64>, PolicyError> {
        Ok(self.action_probs_for_tokens(&prompt_tokens(prompt), self.row(problem_id)?))
    }

    pub fn logprob(&self, prompt: &str, problem_id: &str, action: usize) -> Result<f64, PolicyError> {
        let x = self.row(problem_id)?;
        if action >= self.num_actions {
            return Err(PolicyError::ActionOutOfRange { action, actions: self.num_actions });
        }
        Ok(log_softmax(&self.logits(&self.theta, &prompt_tokens(prompt), x))[action])
    }

    /// Resolves batch problems to rows and checks the trajectory layout.
    fn batch_rows(&self, batch: &RolloutBatch) -> Result<Vec<usize>, PolicyError> {
        let expected = batch.num_prompts() * batch.num_problems() * batch.group_size;
        if batch.trajectories.len() != expected || batch.prompt_texts.len() != batch.num_prompts() {
            return Err(PolicyError::Shape(format!(
                "expected {expected} trajectories, found {}",
                batch.trajectories.len()
            )));
        }
        if batch.values.len() != batch.num_prompts() || batch.values.iter().any(|r| r.len() != batch.num_problems()) {
            return Err(PolicyError::Shape("value matrix does not match prompts × problems".into()));
        }
        batch.problem_ids.iter().map(|id| self.row(id)).collect()
    }

    fn action_of(&self, content: &TrajectoryContent) -> Result<usize, PolicyError> {
        match content {
            TrajectoryContent::Action { index, .. } if *index < self.num_actions => Ok(*index),
            TrajectoryContent::Action { index, .. } => Err(PolicyError::ActionOutOfRange {
                action: *index,
                actions: self.num_actions,
            }),
            TrajectoryContent::Text(_) => Err(PolicyError::Shape("text trajectory in a toy-policy batch".into())),
        }
    }

    /// The sampled objective at `theta`: for each problem,
    /// `(1/NM) Σ_i Σ_j (r_ij − V_i) log π(a_ij)`, averaged over problems.
    pub fn surrogate_objective(&self, batch: &RolloutBatch) -> Result<f64, PolicyError> {
        let rows = self.batch_rows(batch)?;
        let (m, n) = (batch.num_prompts(), batch.group_size);
        let mut total = 0.0;
        for i in 0..m {
            let tokens = prompt_tokens(&batch.prompt_texts[i]);
            for (b, &x) in rows.iter().enumerate() {
                let logp = log_softmax(&self.logits(&self.theta, &tokens, x));
                for t in batch.group(i, b) {
                    total += (t.reward - batch.values[i][b]) * logp[self.action_of(&t.content)?];
                }
            }
        }
        Ok(total / (m * n * rows.len()) as f64)
    }

    /// Gradient of [`Self::surrogate_objective`] with respect to `theta`.
    pub fn policy_gradient(&self, batch: &RolloutBatch) -> Result<Vec<f64>, PolicyError> {
        let rows = self.batch_rows(batch)?;
        let (m, n, k) = (batch.num_prompts(), batch.group_size, self.num_actions);
        let scale = 1.0 / (m * n * rows.len()) as f64;
        let mut grad = vec![0.0; self.theta.len()];
        for i in 0..m {
            let tokens = prompt_tokens(&batch.prompt_texts[i]);
            for (b, &x) in rows.iter().enumerate() {
                let probs = softmax(&self.logits(&self.theta, &tokens, x));
                let g = &mut grad[x * k..(x + 1) * k];
                for t in batch.group(i, b) {
                    let adv = (t.reward - batch.values[i][b]) * scale;
                    if adv == 0.0 {
                        continue;
                    }
                    let a = self.action_of(&t.content)?;
                    for (c, (gc, p)) in g.iter_mut().zip(&probs).enumerate() {
                        *gc += adv * (f64::from(u8::from(c == a)) - p);
                    }
                }
            }
        }
        Ok(grad)
    }

    /// `KL(π_θ ‖ π_ref)` averaged over the batch's (prompt, problem)
    /// contexts, with its exact gradient.
    pub fn kl_to_reference(&self, batch: &RolloutBatch) -> Result<(f64, Vec<f64>), PolicyError> {
        let rows = self.batch_rows(batch)?;
        let (m, k) = (batch.num_prompts(), self.num_actions);
        let scale = 1.0 / (m * rows.len()) as f64;
        let mut kl = 0.0;
        let mut grad = vec![0.0; self.theta.len()];
        for text in &batch.prompt_texts {
            let tokens = prompt_tokens(text);
            for &x in &rows {
                let logp = log_softmax(&self.logits(&self.theta, &tokens, x));
                let logq = log_softmax(&self.logits(&self.reference_theta, &tokens, x));
                let ctx: f64 = logp.iter().zip(&logq).map(|(lp, lq)| lp.exp() * (lp - lq)).sum();
                kl += ctx * scale;
                // ∂KL/∂θ_c = p_c (log p_c − log q_c − KL)
                for (c, g) in grad[x * k..(x + 1) * k].iter_mut().enumerate() {
                    *g += scale * logp[c].exp() * (logp[c] - logq[c] - ctx);
                }
            }
        }
        Ok((kl.max(0.0), grad))
    }

    /// One ascent step on `J − β·KL`.
    pub fn step(&mut self, batch: &RolloutBatch, cfg: &RlConfig) -> Result<(), PolicyError> {
        cfg.validate()?;
        let grad = self.policy_gradient(batch)?;
        let kl_grad = if cfg.kl_beta > 0.0 {
            self.kl_to_reference(batch)?.1
        } else {
            vec![0.0; grad.len()]
        };
        for ((t, g), kg) in self.theta.iter_mut().zip(&grad).zip(&kl_grad) {
            *t += cfg.learning_rate * (g - cfg.kl_beta * kg);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::NodeId;
    use crate::rollout::Trajectory;

    fn bandit(theta: Vec<f64>) -> ToyPolicy {
        let k = theta.len();
        ToyPolicy::tabular(vec!["x".into()], k, theta)
    }

    fn batch(actions: &[usize], rewards: &[f64]) -> RolloutBatch {
        let n = actions.len();
        let trajectories: Vec<Trajectory> = actions
            .iter()
            .zip(rewards)
            .map(|(&a, &r)| Trajectory {
                prompt_id: NodeId(0),
                problem_id: "x".into(),
                content: TrajectoryContent::Action { index: a, success: r > 0.5 },
                reward: r,
            })
            .collect();
        let mean = rewards.iter().sum::<f64>() / n as f64;
        RolloutBatch {
            prompt_ids: vec![NodeId(0)],
            prompt_texts: vec![String::new()],
            problem_ids: vec!["x".into()],
            group_size: n,
            trajectories,
            values: vec![vec![mean]],
        }
    }

    #[test]
    fn logprob_examples() {
        assert!((bandit(vec![0.0, 0.0]).logprob("", "x", 0).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        let e = std::f64::consts::E;
        assert!((bandit(vec![1.0, 0.0]).logprob("", "x", 0).unwrap() - (e / (e + 1.0)).ln()).abs() < 1e-15);
        let a = bandit(vec![0.3, -1.2, 2.0]);
        let b = bandit(vec![10.3, 8.8, 12.0]);
        for act in 0..3 {
            assert!((a.logprob("", "x", act).unwrap() - b.logprob("", "x", act).unwrap()).abs() < 1e-12);
        }
        assert!(matches!(a.logprob("", "x", 3), Err(PolicyError::ActionOutOfRange { .. })));
        assert!(matches!(a.logprob("", "y", 0), Err(PolicyError::UnknownProblem(_))));
    }

    #[test]
    fn equal_rewards_give_no_gradient() {
        let p = bandit(vec![0.4, -0.1]);
        let g = p.policy_gradient(&batch(&[0, 1, 1], &[1.0, 1.0, 1.0])).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let mut q = p.clone();
        q.step(&batch(&[0, 1, 1], &[0.0, 0.0, 0.0]), &RlConfig::default()).unwrap();
        assert_eq!(q, p);
    }

    #[test]
    fn rewarded_action_gains_logit() {
        let p = bandit(vec![0.0, 0.0]);
        let g = p.policy_gradient(&batch(&[0, 1], &[1.0, 0.0])).unwrap();
        assert!(g[0] > 0.0 && g[1] < 0.0);
    }

    #[test]
    fn kl_is_zero_at_reference() {
        let p = bandit(vec![0.7, -0.2, 0.1]);
        let (kl, g) = p.kl_to_reference(&batch(&[0], &[1.0])).unwrap();
        assert_eq!(kl, 0.0);
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn shape_errors() {
        let p = bandit(vec![0.0, 0.0]);
        let mut b = batch(&[0, 1], &[1.0, 0.0]);
        b.trajectories.pop();
        assert!(matches!(p.policy_gradient(&b), Err(PolicyError::Shape(_))));
        let mut b = batch(&[0, 1], &[1.0, 0.0]);
        b.trajectories[0].content = TrajectoryContent::Text("hi".into());
        assert!(p.policy_gradient(&b).is_err());
        assert!(RlConfig { learning_rate: 0.0, kl_beta: 0.0 }.validate().is_err());
    }
}
