//! Independent reference computations shared by the integration tests.
//! Nothing here calls into the crate's numerical routines.

#![allow(dead_code)]

use std::f64::consts::{PI, SQRT_2};

pub fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Normal CDF via `erf`; adequate away from the far tail.
pub fn big_phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

/// Inverse normal CDF by bisection on [`big_phi`].
pub fn big_phi_inv(p: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if big_phi(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Composite Simpson weights for `n` (odd) equally spaced nodes on [a, b].
pub fn simpson_nodes(a: f64, b: f64, n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 3 && n % 2 == 1);
    let h = (b - a) / (n - 1) as f64;
    (0..n)
        .map(|k| {
            let w = if k == 0 || k == n - 1 {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            (a + k as f64 * h, w * h / 3.0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    FirstWins,
    Draw,
}

/// Exact posterior means and standard deviations of two skills after one
/// match, by 2-D Simpson quadrature of prior × likelihood.
///
/// Skills carry prior variance `sigma² + tau²`; performances add noise
/// `beta²`; a draw is a performance gap inside `±eps`.
pub fn two_player_posterior(
    (mu1, s1): (f64, f64),
    (mu2, s2): (f64, f64),
    beta: f64,
    tau: f64,
    eps: f64,
    outcome: Outcome,
    nodes: usize,
) -> [(f64, f64); 2] {
    let sd1 = (s1 * s1 + tau * tau).sqrt();
    let sd2 = (s2 * s2 + tau * tau).sqrt();
    let g1 = simpson_nodes(mu1 - 9.0 * sd1, mu1 + 9.0 * sd1, nodes);
    let g2 = simpson_nodes(mu2 - 9.0 * sd2, mu2 + 9.0 * sd2, nodes);
    let c = SQRT_2 * beta;
    let mut m = [0.0f64; 5]; // Z, E1, E2, E11, E22
    for &(x1, w1) in &g1 {
        let p1 = w1 * phi((x1 - mu1) / sd1);
        for &(x2, w2) in &g2 {
            let d = x1 - x2;
            let like = match outcome {
                Outcome::FirstWins => big_phi((d - eps) / c),
                Outcome::Draw => big_phi((eps - d) / c) - big_phi((-eps - d) / c),
            };
            let f = p1 * w2 * phi((x2 - mu2) / sd2) * like;
            m[0] += f;
            m[1] += f * x1;
            m[2] += f * x2;
            m[3] += f * x1 * x1;
            m[4] += f * x2 * x2;
        }
    }
    let e1 = m[1] / m[0];
    let e2 = m[2] / m[0];
    [(e1, (m[3] / m[0] - e1 * e1).sqrt()), (e2, (m[4] / m[0] - e2 * e2).sqrt())]
}

/// Draw corrections `(v, w)` from moments of `N(t, 1)` truncated to
/// `[-eps, eps]`, by Simpson quadrature.
pub fn draw_corrections(t: f64, eps: f64) -> (f64, f64) {
    // Weight relative to the density at the band point nearest t, so deep
    // tails do not underflow.
    let anchor = t.clamp(-eps, eps);
    let mut m = [0.0f64; 3];
    for (x, w) in simpson_nodes(-eps, eps, 20_001) {
        let f = w * (-0.5 * ((x - t).powi(2) - (anchor - t).powi(2))).exp();
        m[0] += f;
        m[1] += f * x;
        m[2] += f * x * x;
    }
    let mean = m[1] / m[0];
    (mean - t, 1.0 - (m[2] / m[0] - mean * mean))
}

/// Win corrections for `x = t - eps`: moments of `y = d - eps ≥ 0` with
/// `y ∝ exp(x·y − y²/2)`.
pub fn win_corrections(x: f64) -> (f64, f64) {
    let (lo, hi) = if x > 0.0 {
        ((x - 12.0).max(0.0), x + 12.0)
    } else {
        (0.0, (40.0 / x.abs().max(1.0)).min(12.0))
    };
    let mut m = [0.0f64; 3];
    // Subtract the log-integrand maximum on the interval.
    let peak = x.clamp(lo, hi);
    let log_max = x * peak - 0.5 * peak * peak;
    for (y, w) in simpson_nodes(lo, hi, 40_001) {
        let f = w * (x * y - 0.5 * y * y - log_max).exp();
        m[0] += f;
        m[1] += f * y;
        m[2] += f * y * y;
    }
    let mean = m[1] / m[0];
    (mean - x, 1.0 - (m[2] / m[0] - mean * mean))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Central finite-difference gradient.
pub fn finite_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(floor)
}

/// Smallest and largest k with the two-sided central interval of
/// Binomial(n, p) holding at least `level` mass.
pub fn binomial_interval(n: u64, p: f64, level: f64) -> (u64, u64) {
    let mut pmf = vec![0.0f64; n as usize + 1];
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let mut log_choose = 0.0f64;
    for k in 0..=n {
        if k > 0 {
            log_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        pmf[k as usize] = (log_choose + k as f64 * lp + (n - k) as f64 * lq).exp();
    }
    let tail = (1.0 - level) / 2.0;
    let (mut lo, mut acc) = (0u64, 0.0);
    while acc + pmf[lo as usize] <= tail {
        acc += pmf[lo as usize];
        lo += 1;
    }
    let (mut hi, mut acc) = (n, 0.0);
    while acc + pmf[hi as usize] <= tail {
        acc += pmf[hi as usize];
        hi -= 1;
    }
    (lo, hi)
}

/// Reference semantics for principle edits on a plain list.
#[derive(Debug, Clone, PartialEq)]
pub enum RefEdit {
    Add(String),
    Modify(usize, String),
    Merge(Vec<usize>, String),
}

pub fn reference_apply(list: &[String], edits: &[RefEdit]) -> Result<Vec<String>, usize> {
    let mut out = list.to_vec();
    for (pos, e) in edits.iter().enumerate() {
        match e {
            RefEdit::Add(t) => out.push(t.clone()),
            RefEdit::Modify(i, t) => {
                if *i >= out.len() {
                    return Err(pos);
                }
                out[*i] = t.clone();
            }
            RefEdit::Merge(ix, t) => {
                let mut seen = ix.clone();
                seen.sort();
                seen.dedup();
                if ix.len() < 2 || seen.len() != ix.len() || ix.iter().any(|&i| i >= out.len()) {
                    return Err(pos);
                }
                out = out
                    .into_iter()
                    .enumerate()
                    .filter(|(i, _)| !ix.contains(i))
                    .map(|(_, s)| s)
                    .collect();
                out.push(t.clone());
            }
        }
    }
    Ok(out)
}

/// A random tabular policy and a fixed batch of its trajectories with
/// real-valued rewards, for gradient checks.
pub fn random_policy_instance(rng: &mut impl rand::Rng) -> (espl::policytoy::ToyPolicy, espl::rollout::RolloutBatch) {
    use espl::population::NodeId;
    use espl::rollout::{RolloutBatch, Trajectory, TrajectoryContent};

    let (m, b, n, k) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(2..6), rng.gen_range(2..5));
    let ids: Vec<String> = (0..b).map(|x| format!("x{x}")).collect();
    let theta = (0..b * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mut policy = espl::policytoy::ToyPolicy::tabular(ids.clone(), k, theta);
    // Move away from the reference so the KL gradient is not trivially zero.
    for t in policy.theta_mut() {
        *t += rng.gen_range(-1.0..1.0);
    }
    let mut trajectories = Vec::new();
    for i in 0..m {
        for id in &ids {
            for _ in 0..n {
                let reward: f64 = rng.gen();
                trajectories.push(Trajectory {
                    prompt_id: NodeId(i as u64),
                    problem_id: id.clone(),
                    content: TrajectoryContent::Action { index: rng.gen_range(0..k), success: reward > 0.5 },
                    reward,
                });
            }
        }
    }
    let mut batch = RolloutBatch {
        prompt_ids: (0..m as u64).map(NodeId).collect(),
        prompt_texts: (0..m).map(|i| format!("prompt {i}")).collect(),
        problem_ids: ids,
        group_size: n,
        trajectories,
        values: Vec::new(),
    };
    batch.values = batch.recompute_values();
    (policy, batch)
}
