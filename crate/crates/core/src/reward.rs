//! Scalar reward family for rating rollouts.
//!
//! Three components are combined per rollout:
//!
//! * **format** — binary protocol adherence, produced by
//!   [`crate::response::format_reward`];
//! * **score** — a Gaussian bump `exp(-(r_pred - r_gt)^2 / (2 sigma^2))`
//!   rewarding closeness to the ground-truth score;
//! * **rank** — agreement between a pairwise win probability implied by the
//!   rollout's rating under a Thurstone comparison model and the
//!   ground-truth order of the two images, averaged over all partner images
//!   in the batch and measured with the Bhattacharyya coefficient of the
//!   two Bernoulli distributions.
//!
//! The total is `format + alpha * score + beta * rank`. A plain token-level
//! cross-entropy (`sft_loss`) is included for warm-start phases.

use serde::{Deserialize, Serialize};

/// Errors for the reward functions.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("sigma must be finite and > 0, got {0}")]
    BadSigma(f64),
    #[error("rating {value} at group {group} outside [1.0, 5.0]")]
    InvalidRating { group: usize, value: f64 },
    #[error("mos {value} at group {group} outside [1.0, 5.0]")]
    InvalidMos { group: usize, value: f64 },
    #[error("group {0} has no ratings")]
    EmptyGroup(usize),
    #[error("rank reward needs at least 2 groups, got {0}")]
    BatchTooSmall(usize),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("v_floor must be finite and > 0, got {0}")]
    BadVarianceFloor(f64),
    #[error("token probability at position {position} is zero or negative")]
    ZeroProbability { position: usize },
    #[error("token probability {value} at position {position} exceeds 1")]
    InvalidProbability { position: usize, value: f64 },
    #[error("token probability list is empty")]
    EmptyProbabilities,
}

/// Mixing coefficients for the reward total plus the score-reward bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardCoefficients {
    /// Weight of the score component.
    pub alpha: f64,
    /// Weight of the rank component.
    pub beta: f64,
    /// Gaussian bandwidth of the score component.
    pub sigma: f64,
}

impl Default for RewardCoefficients {
    fn default() -> Self {
        RewardCoefficients {
            alpha: 1.0,
            beta: 2.0,
            sigma: 0.35,
        }
    }
}

/// Per-rollout reward components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: f64,
    pub score: f64,
    pub rank: f64,
    pub total: f64,
}

/// Gaussian closeness reward: `exp(-(r_pred - r_gt)^2 / (2 sigma^2))`.
///
/// Strictly positive, equal to 1 only at `r_pred == r_gt`, and strictly
/// decreasing in `|r_pred - r_gt|`.
pub fn score_reward(r_pred: f64, r_gt: f64, sigma: f64) -> Result<f64, RewardError> {
    if !r_pred.is_finite() {
        return Err(RewardError::NonFinite("r_pred"));
    }
    if !r_gt.is_finite() {
        return Err(RewardError::NonFinite("r_gt"));
    }
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(RewardError::BadSigma(sigma));
    }
    let d = r_pred - r_gt;
    Ok((-(d * d) / (2.0 * sigma * sigma)).exp())
}

/// Analytic derivative of [`score_reward`] with respect to `r_pred`.
pub fn score_reward_grad(r_pred: f64, r_gt: f64, sigma: f64) -> Result<f64, RewardError> {
    let s = score_reward(r_pred, r_gt, sigma)?;
    Ok(s * -(r_pred - r_gt) / (sigma * sigma))
}

/// Standard normal cumulative distribution function.
///
/// Computed through the complementary error function, which keeps absolute
/// error well under 1e-12 across the whole real line (including the far
/// tails, where the direct `0.5 * (1 + erf)` form would cancel).
pub fn normal_cdf(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    0.5 * libm::erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}

/// One group of sampled ratings for a single image plus its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRatings {
    /// Ground-truth mean opinion score of the image, in `[1.0, 5.0]`.
    pub mos: f64,
    /// Parsed final ratings of the group's rollouts, each in `[1.0, 5.0]`.
    pub ratings: Vec<f64>,
}

/// Sample mean and floored unbiased sample variance of a rating group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStats {
    pub mean: f64,
    /// Unbiased (n-1) sample variance, floored so that degenerate groups
    /// (constant ratings, or a single rating) still yield a usable scale.
    pub var: f64,
}

/// Computes [`GroupStats`] for one group of ratings.
pub fn group_stats(ratings: &[f64], v_floor: f64) -> GroupStats {
    let n = ratings.len();
    let mean = ratings.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        ratings.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    GroupStats {
        mean,
        var: var.max(v_floor),
    }
}

/// Win probability that a rollout rating `r_ki` for image `i` beats image
/// `j` under a Thurstone comparison model: `Phi((r_ki - mean_j) /
/// sqrt(var_i + var_j))` with both variances floored.
pub fn thurstone_preference(
    r_ki: f64,
    ratings_i: &[f64],
    ratings_j: &[f64],
    v_floor: f64,
) -> Result<f64, RewardError> {
    if !v_floor.is_finite() || v_floor <= 0.0 {
        return Err(RewardError::BadVarianceFloor(v_floor));
    }
    if ratings_i.is_empty() {
        return Err(RewardError::EmptyGroup(0));
    }
    if ratings_j.is_empty() {
        return Err(RewardError::EmptyGroup(1));
    }
    let si = group_stats(ratings_i, v_floor);
    let sj = group_stats(ratings_j, v_floor);
    Ok(preference_from_stats(r_ki, &si, &sj))
}

fn preference_from_stats(r_ki: f64, stats_i: &GroupStats, stats_j: &GroupStats) -> f64 {
    let z = (r_ki - stats_j.mean) / (stats_i.var + stats_j.var).sqrt();
    // Guard against float noise at the saturated ends before the sqrt in the
    // Bhattacharyya term.
    normal_cdf(z).clamp(0.0, 1.0)
}

/// Ground-truth win probability from the MOS order: 1 if `mos_i > mos_j`,
/// 0 if lower, 0.5 on ties.
pub fn mos_preference(mos_i: f64, mos_j: f64) -> f64 {
    if mos_i > mos_j {
        1.0
    } else if mos_i < mos_j {
        0.0
    } else {
        0.5
    }
}

/// Bhattacharyya coefficient of two Bernoulli distributions with success
/// probabilities `p` and `q`: `sqrt(p q) + sqrt((1-p)(1-q))`. Equals 1 iff
/// `p == q` and 0 iff they are deterministic and opposite.
pub fn bernoulli_bhattacharyya(p: f64, q: f64) -> f64 {
    (p * q).sqrt() + ((1.0 - p) * (1.0 - q)).sqrt()
}

fn validate_groups(groups: &[GroupRatings]) -> Result<(), RewardError> {
    if groups.len() < 2 {
        return Err(RewardError::BatchTooSmall(groups.len()));
    }
    for (gi, g) in groups.iter().enumerate() {
        if g.ratings.is_empty() {
            return Err(RewardError::EmptyGroup(gi));
        }
        if !g.mos.is_finite() || !(1.0..=5.0).contains(&g.mos) {
            return Err(RewardError::InvalidMos {
                group: gi,
                value: g.mos,
            });
        }
        for &r in &g.ratings {
            if !r.is_finite() || !(1.0..=5.0).contains(&r) {
                return Err(RewardError::InvalidRating {
                    group: gi,
                    value: r,
                });
            }
        }
    }
    Ok(())
}

/// Rank reward of rollout `rollout_index` in group `image_index`:
/// the mean, over every partner image `j != i` in the batch, of the
/// Bhattacharyya agreement between the model-implied win probability and
/// the ground-truth order of `(i, j)`.
pub fn rank_reward(
    groups: &[GroupRatings],
    image_index: usize,
    rollout_index: usize,
    v_floor: f64,
) -> Result<f64, RewardError> {
    let all = rank_rewards(groups, v_floor)?;
    let per_group = all
        .get(image_index)
        .ok_or_else(|| RewardError::IndexOutOfRange(format!("image {image_index}")))?;
    per_group
        .get(rollout_index)
        .copied()
        .ok_or_else(|| RewardError::IndexOutOfRange(format!("rollout {rollout_index}")))
}

/// Rank rewards for every rollout of every group in one pass.
///
/// Group means and variances are computed once and shared across all pairs,
/// so the cost is `O(total_ratings * B)` rather than the naive
/// `O(total_ratings * B * max_group)`.
pub fn rank_rewards(groups: &[GroupRatings], v_floor: f64) -> Result<Vec<Vec<f64>>, RewardError> {
    if !v_floor.is_finite() || v_floor <= 0.0 {
        return Err(RewardError::BadVarianceFloor(v_floor));
    }
    validate_groups(groups)?;
    let stats: Vec<GroupStats> = groups
        .iter()
        .map(|g| group_stats(&g.ratings, v_floor))
        .collect();
    let b = groups.len();
    let mut out = Vec::with_capacity(b);
    for (i, gi) in groups.iter().enumerate() {
        let mut per_rollout = Vec::with_capacity(gi.ratings.len());
        for &r_ki in &gi.ratings {
            let mut acc = 0.0;
            for (j, gj) in groups.iter().enumerate() {
                if j == i {
                    continue;
                }
                let p_hat = preference_from_stats(r_ki, &stats[i], &stats[j]);
                let p_star = mos_preference(gi.mos, gj.mos);
                acc += bernoulli_bhattacharyya(p_hat, p_star);
            }
            per_rollout.push(acc / (b - 1) as f64);
        }
        out.push(per_rollout);
    }
    Ok(out)
}

/// Weighted reward total: `format + alpha * score + beta * rank`.
pub fn total_reward(format: f64, score: f64, rank: f64, coeffs: &RewardCoefficients) -> f64 {
    format + coeffs.alpha * score + coeffs.beta * rank
}

/// Convenience constructor for a full [`RewardBreakdown`].
pub fn reward_breakdown(
    format: f64,
    score: f64,
    rank: f64,
    coeffs: &RewardCoefficients,
) -> RewardBreakdown {
    RewardBreakdown {
        format,
        score,
        rank,
        total: total_reward(format, score, rank, coeffs),
    }
}

/// Summed token-level cross-entropy `-sum_t ln p_t` for a warm-start phase.
///
/// Probabilities must lie in `(0, 1]`; a zero probability is an error (the
/// loss would be infinite) rather than a silent `inf`.
pub fn sft_loss(token_probs: &[f64]) -> Result<f64, RewardError> {
    if token_probs.is_empty() {
        return Err(RewardError::EmptyProbabilities);
    }
    let mut acc = 0.0;
    for (position, &p) in token_probs.iter().enumerate() {
        if !p.is_finite() || p <= 0.0 {
            return Err(RewardError::ZeroProbability { position });
        }
        if p > 1.0 {
            return Err(RewardError::InvalidProbability { position, value: p });
        }
        acc -= p.ln();
    }
    Ok(acc)
}

/// Mean-normalized variant of [`sft_loss`].
pub fn sft_loss_mean(token_probs: &[f64]) -> Result<f64, RewardError> {
    Ok(sft_loss(token_probs)? / token_probs.len() as f64)
}
