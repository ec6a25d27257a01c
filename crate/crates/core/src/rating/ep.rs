//! Expectation propagation over a ranked chain of performances.

use super::{apply_dynamics, draw_margin, vw_draw, vw_win, Ranking, Rating, RatingConfig, RatingError};

/// Gaussian in natural parameters: precision `pi` and precision-mean `tau`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Natural {
    pi: f64,
    tau: f64,
}

impl Natural {
    fn from_moments(mu: f64, var: f64) -> Self {
        Self {
            pi: 1.0 / var,
            tau: mu / var,
        }
    }

    fn add(self, rhs: Self) -> Self {
        Self {
            pi: self.pi + rhs.pi,
            tau: self.tau + rhs.tau,
        }
    }

    fn mean(self) -> f64 {
        self.tau / self.pi
    }

    fn variance(self) -> f64 {
        1.0 / self.pi
    }
}

/// Performance-space belief (mean and variance) at one chain position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerfBelief {
    pub mu: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpReport {
    pub sweeps: usize,
    pub converged: bool,
    /// Largest natural-parameter change in the final sweep.
    pub last_change: f64,
}

/// Message-passing state for a chain of adjacent ranking constraints.
///
/// Position `k` in the chain is the `k`-th best performer; constraint `k`
/// links positions `k` and `k + 1`.
#[derive(Debug, Clone)]
pub struct ChainEp {
    priors: Vec<Natural>,
    draws: Vec<bool>,
    eps_abs: f64,
    to_upper: Vec<Natural>,
    to_lower: Vec<Natural>,
}

impl ChainEp {
    /// `priors` are performance-space beliefs in ranked order; `draws[k]`
    /// marks constraint `k` as a draw.
    pub fn new(priors: &[PerfBelief], draws: Vec<bool>, eps_abs: f64) -> Result<Self, RatingError> {
        if priors.len() < 2 {
            return Err(RatingError::InvalidMatch(format!(
                "a chain needs at least 2 players, got {}",
                priors.len()
            )));
        }
        if draws.len() + 1 != priors.len() {
            return Err(RatingError::InvalidMatch(format!(
                "{} players need {} constraint outcomes, got {}",
                priors.len(),
                priors.len() - 1,
                draws.len()
            )));
        }
        for (pos, p) in priors.iter().enumerate() {
            if !(p.mu.is_finite() && p.variance.is_finite() && p.variance > 0.0) {
                return Err(RatingError::Numeric {
                    stage: "performance prior",
                    detail: format!("position {pos}: mu={}, variance={}", p.mu, p.variance),
                });
            }
        }
        let constraints = draws.len();
        Ok(Self {
            priors: priors
                .iter()
                .map(|p| Natural::from_moments(p.mu, p.variance))
                .collect(),
            draws,
            eps_abs,
            to_upper: vec![Natural::default(); constraints],
            to_lower: vec![Natural::default(); constraints],
        })
    }

    fn cavity_upper(&self, k: usize) -> Natural {
        let mut cav = self.priors[k];
        if k > 0 {
            cav = cav.add(self.to_lower[k - 1]);
        }
        cav
    }

    fn cavity_lower(&self, k: usize) -> Natural {
        let mut cav = self.priors[k + 1];
        if k + 1 < self.to_upper.len() {
            cav = cav.add(self.to_upper[k + 1]);
        }
        cav
    }

    /// One pass over every constraint in chain order. Returns the largest
    /// change in any message's natural parameters.
    pub fn sweep(&mut self) -> Result<f64, RatingError> {
        let mut max_change = 0.0_f64;
        for k in 0..self.draws.len() {
            if self.draws[k] && self.eps_abs <= 0.0 {
                // A zero-width draw band carries no usable evidence.
                continue;
            }
            let cav_i = self.cavity_upper(k);
            let cav_j = self.cavity_lower(k);
            let (mu_i, var_i) = (cav_i.mean(), cav_i.variance());
            let (mu_j, var_j) = (cav_j.mean(), cav_j.variance());

            let c = (var_i + var_j).sqrt();
            let t = (mu_i - mu_j) / c;
            let eps = self.eps_abs / c;
            let (v, w) = if self.draws[k] { vw_draw(t, eps) } else { vw_win(t, eps) };

            let post_mu_i = mu_i + var_i / c * v;
            let post_mu_j = mu_j - var_j / c * v;
            let post_var_i = var_i * (1.0 - var_i / (c * c) * w);
            let post_var_j = var_j * (1.0 - var_j / (c * c) * w);
            if !(post_var_i > 0.0 && post_var_j > 0.0 && post_mu_i.is_finite() && post_mu_j.is_finite()) {
                return Err(RatingError::Numeric {
                    stage: "ep moment update",
                    detail: format!(
                        "constraint {k}: t={t}, eps={eps}, v={v}, w={w}, \
                         post=({post_mu_i}, {post_var_i}) / ({post_mu_j}, {post_var_j})"
                    ),
                });
            }

            let msg_i = Natural {
                pi: (1.0 / post_var_i - cav_i.pi).max(0.0),
                tau: post_mu_i / post_var_i - cav_i.tau,
            };
            let msg_j = Natural {
                pi: (1.0 / post_var_j - cav_j.pi).max(0.0),
                tau: post_mu_j / post_var_j - cav_j.tau,
            };
            for (new, old) in [(msg_i, self.to_upper[k]), (msg_j, self.to_lower[k])] {
                max_change = max_change
                    .max((new.pi - old.pi).abs())
                    .max((new.tau - old.tau).abs());
            }
            self.to_upper[k] = msg_i;
            self.to_lower[k] = msg_j;
        }
        Ok(max_change)
    }

    /// Sweeps until the largest message change drops below `tolerance` or
    /// `max_sweeps` passes have run.
    pub fn run(&mut self, max_sweeps: usize, tolerance: f64) -> Result<EpReport, RatingError> {
        let mut report = EpReport {
            sweeps: 0,
            converged: false,
            last_change: f64::INFINITY,
        };
        while report.sweeps < max_sweeps {
            report.last_change = self.sweep()?;
            report.sweeps += 1;
            if report.last_change < tolerance {
                report.converged = true;
                break;
            }
        }
        Ok(report)
    }

    fn posterior_natural(&self, pos: usize) -> Natural {
        let mut post = self.priors[pos];
        if pos < self.to_upper.len() {
            post = post.add(self.to_upper[pos]);
        }
        if pos > 0 {
            post = post.add(self.to_lower[pos - 1]);
        }
        post
    }

    /// Performance posteriors in ranked order.
    pub fn posteriors(&self) -> Vec<PerfBelief> {
        (0..self.priors.len())
            .map(|pos| {
                let n = self.posterior_natural(pos);
                PerfBelief {
                    mu: n.mean(),
                    variance: n.variance(),
                }
            })
            .collect()
    }
}

/// Posterior skill ratings after one ranked tournament, in input order.
///
/// Dynamics drift is applied to every participant exactly once per call.
pub fn rank_update(
    ratings: &[Rating],
    ranking: &Ranking,
    cfg: &RatingConfig,
) -> Result<Vec<Rating>, RatingError> {
    rank_update_with_report(ratings, ranking, cfg).map(|(r, _)| r)
}

pub fn rank_update_with_report(
    ratings: &[Rating],
    ranking: &Ranking,
    cfg: &RatingConfig,
) -> Result<(Vec<Rating>, EpReport), RatingError> {
    cfg.validate()?;
    if ratings.len() < 2 {
        return Err(RatingError::InvalidMatch(format!(
            "a tournament needs at least 2 players, got {}",
            ratings.len()
        )));
    }
    ranking.validate(ratings.len())?;

    let beta2 = cfg.perf_beta * cfg.perf_beta;
    let eps_abs = draw_margin(cfg)?;
    let drifted: Vec<Rating> = ratings.iter().map(|r| apply_dynamics(*r, cfg)).collect();

    let perf_priors: Vec<PerfBelief> = ranking
        .order
        .iter()
        .map(|&p| PerfBelief {
            mu: drifted[p].mu(),
            variance: drifted[p].variance() + beta2,
        })
        .collect();
    let draws = (0..ranking.len() - 1).map(|k| ranking.is_draw(k)).collect();

    let mut chain = ChainEp::new(&perf_priors, draws, eps_abs)?;
    let report = chain.run(cfg.ep_max_sweeps, cfg.ep_tolerance)?;

    let mut out = drifted.clone();
    for (pos, &player) in ranking.order.iter().enumerate() {
        let skill = drifted[player];
        let prior = Natural::from_moments(skill.mu(), perf_priors[pos].variance);
        let post = chain.posterior_natural(pos);
        let msg_pi = post.pi - prior.pi;
        let msg_tau = post.tau - prior.tau;

        let mut nat = Natural::from_moments(skill.mu(), skill.variance());
        if msg_pi >= 0.0 {
            let link = 1.0 + beta2 * msg_pi;
            nat = nat.add(Natural {
                pi: msg_pi / link,
                tau: msg_tau / link,
            });
        }
        out[player] = Rating::new(nat.mean(), nat.variance().sqrt()).map_err(|_| RatingError::Numeric {
            stage: "skill mapping",
            detail: format!(
                "player {player}: prior=({}, {}), message=({msg_pi}, {msg_tau})",
                skill.mu(),
                skill.sigma()
            ),
        })?;
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(mu: f64, sigma: f64) -> Rating {
        Rating::new(mu, sigma).unwrap()
    }

    #[test]
    fn identical_priors_win_is_symmetric() {
        let cfg = RatingConfig::default();
        let prior = cfg.initial_rating();
        let ranking = Ranking::from_scores(&[1.0, 0.0]).unwrap();
        let post = rank_update(&[prior, prior], &ranking, &cfg).unwrap();
        let up = post[0].mu() - prior.mu();
        let down = post[1].mu() - prior.mu();
        assert!(up > 0.0);
        assert!((up + down).abs() < 1e-9);
        assert_eq!(post[0].sigma(), post[1].sigma());
        assert!(post[0].sigma() < prior.sigma());
    }

    #[test]
    fn identical_priors_draw_keeps_means() {
        let cfg = RatingConfig::default();
        let prior = cfg.initial_rating();
        let ranking = Ranking::from_scores(&[0.5, 0.5]).unwrap();
        let post = rank_update(&[prior, prior], &ranking, &cfg).unwrap();
        assert_eq!(post[0].mu(), post[1].mu());
        assert!((post[0].mu() - 25.0).abs() < 1e-12);
        let drifted = apply_dynamics(prior, &cfg);
        assert!(post[0].sigma() < drifted.sigma());
        assert!(post[1].sigma() < drifted.sigma());
    }

    #[test]
    fn matches_classic_two_player_trueskill() {
        // Classic closed-form two-player TrueSkill update.
        let cfg = RatingConfig::default();
        let (a, b) = (r(30.0, 4.0), r(22.0, 6.0));
        let post = rank_update(&[a, b], &Ranking::from_scores(&[1.0, 0.0]).unwrap(), &cfg).unwrap();
        let (a, b) = (apply_dynamics(a, &cfg), apply_dynamics(b, &cfg));
        let beta2 = cfg.perf_beta.powi(2);
        let c = (a.variance() + b.variance() + 2.0 * beta2).sqrt();
        let (v, w) = vw_win((a.mu() - b.mu()) / c, draw_margin(&cfg).unwrap() / c);
        let mu_a = a.mu() + a.variance() / c * v;
        let sigma_a = (a.variance() * (1.0 - a.variance() / (c * c) * w)).sqrt();
        let mu_b = b.mu() - b.variance() / c * v;
        let sigma_b = (b.variance() * (1.0 - b.variance() / (c * c) * w)).sqrt();
        assert!((post[0].mu() - mu_a).abs() < 1e-10);
        assert!((post[0].sigma() - sigma_a).abs() < 1e-10);
        assert!((post[1].mu() - mu_b).abs() < 1e-10);
        assert!((post[1].sigma() - sigma_b).abs() < 1e-10);
    }

    #[test]
    fn three_player_chain_is_symmetric() {
        let cfg = RatingConfig::default();
        let prior = cfg.initial_rating();
        let ranking = Ranking::from_scores(&[0.9, 0.5, 0.1]).unwrap();
        let (post, report) = rank_update_with_report(&[prior; 3], &ranking, &cfg).unwrap();
        assert!(report.converged);
        assert!((post[1].mu() - cfg.mu0).abs() < 1e-6);
        assert!(((post[0].mu() - 25.0) + (post[2].mu() - 25.0)).abs() < 1e-6);
        assert!((post[0].sigma() - post[2].sigma()).abs() < 1e-6);
        assert!(post[0].mu() > post[1].mu() && post[1].mu() > post[2].mu());
    }

    #[test]
    fn winner_gains_relative_to_counterfactual_loss() {
        let cfg = RatingConfig::default();
        let players = [r(27.0, 5.0), r(24.0, 7.0), r(20.0, 3.0)];
        let won = rank_update(&players, &Ranking::new(vec![0, 1, 2], vec![0, 1, 2]).unwrap(), &cfg).unwrap();
        let lost = rank_update(&players, &Ranking::new(vec![1, 2, 0], vec![0, 1, 2]).unwrap(), &cfg).unwrap();
        assert!(won[0].mu() > lost[0].mu());
    }

    #[test]
    fn output_follows_input_order() {
        let cfg = RatingConfig::default();
        let players = [r(20.0, 5.0), r(30.0, 5.0)];
        let post = rank_update(&players, &Ranking::new(vec![1, 0], vec![0, 1]).unwrap(), &cfg).unwrap();
        assert!(post[1].mu() > 30.0);
        assert!(post[0].mu() < 20.0);
    }

    #[test]
    fn rejects_degenerate_matches() {
        let cfg = RatingConfig::default();
        let one = [cfg.initial_rating()];
        assert!(matches!(
            rank_update(&one, &Ranking::new(vec![0], vec![0]).unwrap(), &cfg),
            Err(RatingError::InvalidMatch(_))
        ));
        let two = [cfg.initial_rating(); 2];
        let bad = Ranking { order: vec![0, 0], ties: vec![0, 1] };
        assert!(rank_update(&two, &bad, &cfg).is_err());
    }

    #[test]
    fn zero_draw_margin_tie_is_uninformative() {
        let cfg = RatingConfig { p_draw: 0.0, ..RatingConfig::default() };
        let prior = cfg.initial_rating();
        let post = rank_update(&[prior, prior], &Ranking::from_scores(&[0.4, 0.4]).unwrap(), &cfg).unwrap();
        let drifted = apply_dynamics(prior, &cfg);
        assert_eq!(post[0], drifted);
        assert_eq!(post[1], drifted);
    }

    #[test]
    fn converged_chain_is_a_fixed_point() {
        let cfg = RatingConfig::default();
        let priors: Vec<PerfBelief> = [(28.0, 30.0), (25.0, 60.0), (21.0, 45.0), (26.0, 80.0)]
            .iter()
            .map(|&(mu, variance)| PerfBelief { mu, variance })
            .collect();
        let mut chain = ChainEp::new(&priors, vec![false, true, false], draw_margin(&cfg).unwrap()).unwrap();
        let report = chain.run(cfg.ep_max_sweeps, cfg.ep_tolerance).unwrap();
        assert!(report.converged, "{report:?}");
        let before = chain.posteriors();
        assert!(chain.sweep().unwrap() < cfg.ep_tolerance);
        for (a, b) in before.iter().zip(chain.posteriors()) {
            assert!((a.mu - b.mu).abs() < 1e-3);
            assert!((a.variance - b.variance).abs() < 1e-3);
        }
    }
}
