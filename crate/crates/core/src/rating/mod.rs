//! Bayesian skill ratings for prompts.
//!
//! Each prompt carries a Gaussian skill belief. Tournaments are ranked
//! chains of adjacent win/draw constraints; posteriors come from EP message
//! passing in performance space, mapped back into skill space through the
//! performance-noise link.

mod correction;
mod ep;
pub mod normal;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use correction::{vw_draw, vw_win};
pub use ep::{rank_update, rank_update_with_report, ChainEp, EpReport, PerfBelief};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RatingError {
    #[error("invalid rating config: {0}")]
    InvalidConfig(String),
    #[error("invalid rating (mu={mu}, sigma={sigma})")]
    InvalidRating { mu: f64, sigma: f64 },
    #[error("invalid match: {0}")]
    InvalidMatch(String),
    #[error("crossover fusion needs at least one parent")]
    EmptyParents,
    #[error("non-finite value during {stage}: {detail}")]
    Numeric { stage: &'static str, detail: String },
}

/// Gaussian skill belief `N(mu, sigma^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRating")]
pub struct Rating {
    mu: f64,
    sigma: f64,
}

#[derive(Deserialize)]
struct RawRating {
    mu: f64,
    sigma: f64,
}

impl TryFrom<RawRating> for Rating {
    type Error = RatingError;

    fn try_from(raw: RawRating) -> Result<Self, Self::Error> {
        Rating::new(raw.mu, raw.sigma)
    }
}

impl Rating {
    pub fn new(mu: f64, sigma: f64) -> Result<Self, RatingError> {
        if mu.is_finite() && sigma.is_finite() && sigma > 0.0 {
            Ok(Self { mu, sigma })
        } else {
            Err(RatingError::InvalidRating { mu, sigma })
        }
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn variance(&self) -> f64 {
        self.sigma * self.sigma
    }
}

/// Global rating hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatingConfig {
    pub mu0: f64,
    pub sigma0: f64,
    /// Performance noise around skill.
    pub perf_beta: f64,
    /// Skill drift added before each update.
    pub tau: f64,
    pub p_draw: f64,
    pub ep_max_sweeps: usize,
    pub ep_tolerance: f64,
}

impl Default for RatingConfig {
    fn default() -> Self {
        Self {
            mu0: 25.0,
            sigma0: 25.0 / 3.0,
            perf_beta: 25.0 / 6.0,
            tau: 25.0 / 300.0,
            p_draw: 0.10,
            ep_max_sweeps: 10,
            ep_tolerance: 1e-4,
        }
    }
}

impl RatingConfig {
    pub fn validate(&self) -> Result<(), RatingError> {
        let bad = |msg: &str| Err(RatingError::InvalidConfig(msg.to_string()));
        if !(self.mu0.is_finite()) {
            return bad("mu0 must be finite");
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return bad("sigma0 must be positive");
        }
        if !(self.perf_beta > 0.0 && self.perf_beta.is_finite()) {
            return bad("perf_beta must be positive");
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return bad("tau must be non-negative");
        }
        if !(0.0..1.0).contains(&self.p_draw) {
            return bad("p_draw must lie in [0, 1)");
        }
        if self.ep_max_sweeps == 0 {
            return bad("ep_max_sweeps must be at least 1");
        }
        if self.ep_tolerance.is_nan() || self.ep_tolerance <= 0.0 {
            return bad("ep_tolerance must be positive");
        }
        Ok(())
    }

    /// Prior for a fresh root prompt.
    pub fn initial_rating(&self) -> Rating {
        Rating {
            mu: self.mu0,
            sigma: self.sigma0,
        }
    }
}

/// Outcome of one tournament: players best-first, with draw groups.
///
/// Adjacent positions `k` and `k + 1` are a draw when `ties[k] == ties[k + 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    pub order: Vec<usize>,
    pub ties: Vec<i64>,
}

impl Ranking {
    pub fn new(order: Vec<usize>, ties: Vec<i64>) -> Result<Self, RatingError> {
        let ranking = Self { order, ties };
        ranking.validate(ranking.order.len())?;
        Ok(ranking)
    }

    /// Ranks scores in descending order; exactly equal scores draw.
    /// Equal scores keep their input order.
    pub fn from_scores(scores: &[f64]) -> Result<Self, RatingError> {
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(RatingError::InvalidMatch(format!(
                "non-finite score {bad}"
            )));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let mut ties = Vec::with_capacity(order.len());
        let mut group = 0_i64;
        for (pos, &player) in order.iter().enumerate() {
            if pos > 0 && scores[order[pos - 1]] != scores[player] {
                group += 1;
            }
            ties.push(group);
        }
        Ok(Self { order, ties })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Whether the pair at sorted positions `pos` and `pos + 1` drew.
    pub fn is_draw(&self, pos: usize) -> bool {
        self.ties[pos] == self.ties[pos + 1]
    }

    pub fn validate(&self, players: usize) -> Result<(), RatingError> {
        if self.order.len() != players || self.ties.len() != players {
            return Err(RatingError::InvalidMatch(format!(
                "ranking covers {} players with {} tie marks, expected {players}",
                self.order.len(),
                self.ties.len()
            )));
        }
        let mut seen = vec![false; players];
        for &p in &self.order {
            if p >= players || seen[p] {
                return Err(RatingError::InvalidMatch(format!(
                    "ranking order is not a permutation: {:?}",
                    self.order
                )));
            }
            seen[p] = true;
        }
        Ok(())
    }
}

/// Adds dynamics drift: `sigma^2 <- sigma^2 + tau^2`.
pub fn apply_dynamics(r: Rating, cfg: &RatingConfig) -> Rating {
    Rating {
        mu: r.mu,
        sigma: r.sigma.hypot(cfg.tau),
    }
}

/// Draw half-width in performance-difference units.
pub fn draw_margin(cfg: &RatingConfig) -> Result<f64, RatingError> {
    if !(0.0..1.0).contains(&cfg.p_draw) {
        return Err(RatingError::InvalidConfig(format!(
            "p_draw must lie in [0, 1), got {}",
            cfg.p_draw
        )));
    }
    Ok(normal::probit((cfg.p_draw + 1.0) / 2.0) * std::f64::consts::SQRT_2 * cfg.perf_beta)
}

/// Optimistic selection score `mu + lambda * sigma`.
pub fn ucb_score(r: &Rating, lambda: f64) -> f64 {
    r.mu + lambda * r.sigma
}

/// Child of a mutation: parent mean, variance inflated by `delta_sigma^2`.
pub fn mutation_child_rating(parent: &Rating, delta_sigma: f64) -> Rating {
    Rating {
        mu: parent.mu,
        sigma: parent.sigma.hypot(delta_sigma),
    }
}

/// Alternative child rule that adds `delta_sigma` to the standard deviation.
pub fn mutation_child_rating_additive(parent: &Rating, delta_sigma: f64) -> Rating {
    Rating {
        mu: parent.mu,
        sigma: parent.sigma + delta_sigma,
    }
}

/// Precision-weighted fusion of parent ratings plus `delta_sigma^2` inflation.
pub fn crossover_fusion_rating(parents: &[Rating], delta_sigma: f64) -> Result<Rating, RatingError> {
    if parents.is_empty() {
        return Err(RatingError::EmptyParents);
    }
    let (precision, weighted) = parents.iter().fold((0.0, 0.0), |(p, w), r| {
        let prec = 1.0 / r.variance();
        (p + prec, w + r.mu * prec)
    });
    Rating::new(weighted / precision, (1.0 / precision + delta_sigma * delta_sigma).sqrt())
}
