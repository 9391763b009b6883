//! Group-relative policy-optimization mathematics with a KL-coverage
//! regularizer.
//!
//! Rollouts arrive in groups (all answering the same query). Per group, the
//! scalar rewards are normalized into advantages with the group's own mean
//! and population standard deviation. The training objective per step is
//!
//! ```text
//! mean_groups[ mean_G (1/sum V) sum_t V_t * min(r_t * A, clip(r_t) * A) ]
//!     - beta_kl * KLC
//! ```
//!
//! where `r_t = exp(lp_new - lp_old)` is the per-token importance ratio,
//! `V_t` masks out prompt- and tool-injected tokens, and `KLC` is the mean
//! KL divergence `D(pi_old || pi_new)` over a small, deliberately chosen set
//! of tokens: the numeric answer tokens whose log-probabilities co-vary most
//! with the trajectory advantage across the whole batch. Pinning exactly
//! those tokens to the behavior policy is what keeps the policy's score
//! vocabulary from collapsing onto a few "safe" values while leaving every
//! other token free to move.
//!
//! Mask selection is fully deterministic: covariance scores are ranked
//! descending with ties broken by `(query_id, rollout_index, position)`
//! ascending, so reruns over the same batch select the same tokens.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::response::StructuredResponse;
use crate::reward::RewardBreakdown;

/// Errors from the policy-optimization functions.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("group {query_id:?} has {got} trajectories; need at least 2 for advantages")]
    GroupTooSmall { query_id: String, got: usize },
    #[error("trajectory {rollout_index} in group {query_id:?} has no reward total")]
    MissingRewards {
        query_id: String,
        rollout_index: usize,
    },
    #[error("trajectory {rollout_index} in group {query_id:?} has no advantage; compute group advantages first")]
    MissingAdvantage {
        query_id: String,
        rollout_index: usize,
    },
    #[error("trajectory {rollout_index} in group {query_id:?} has no valid tokens")]
    NoValidTokens {
        query_id: String,
        rollout_index: usize,
    },
    #[error("batch contains no valid tokens")]
    EmptyBatch,
    #[error("selected token {query_id:?}/{rollout_index}/{position} lacks a stored distribution")]
    MissingDistribution {
        query_id: String,
        rollout_index: usize,
        position: usize,
    },
    #[error("distribution supports differ: {0}")]
    SupportMismatch(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

/// A categorical distribution over a declared sub-vocabulary, stored with
/// sorted keys so serialization and iteration order are deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenDist(BTreeMap<String, f64>);

impl TokenDist {
    /// Validates non-negativity and normalization (within 1e-6).
    pub fn new(probs: BTreeMap<String, f64>) -> Result<Self, PolicyError> {
        if probs.is_empty() {
            return Err(PolicyError::InvalidDistribution(
                "distribution has no support".to_string(),
            ));
        }
        let mut sum = 0.0;
        for (sym, &p) in &probs {
            if !p.is_finite() || p < 0.0 {
                return Err(PolicyError::InvalidDistribution(format!(
                    "probability of {sym:?} is {p}"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(PolicyError::InvalidDistribution(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(TokenDist(probs))
    }

    pub fn probs(&self) -> &BTreeMap<String, f64> {
        &self.0
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.0
            .values()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }
}

/// KL divergence `D(p_old || p_new)` over a shared support.
///
/// Zero-probability symbols in `p_old` contribute nothing; a symbol with
/// positive old mass and zero new mass yields `+inf`, the mathematically
/// honest answer for a policy that abandoned part of its old support.
pub fn kl_divergence(p_old: &TokenDist, p_new: &TokenDist) -> Result<f64, PolicyError> {
    if p_old.0.len() != p_new.0.len()
        || p_old.0.keys().zip(p_new.0.keys()).any(|(a, b)| a != b)
    {
        return Err(PolicyError::SupportMismatch(format!(
            "{} vs {} symbols",
            p_old.0.len(),
            p_new.0.len()
        )));
    }
    let mut acc = 0.0;
    for ((_, &po), (_, &pn)) in p_old.0.iter().zip(p_new.0.iter()) {
        if po == 0.0 {
            continue;
        }
        if pn == 0.0 {
            return Ok(f64::INFINITY);
        }
        acc += po * (po / pn).ln();
    }
    // Float cancellation can drive a tiny negative residue for nearly equal
    // distributions; KL is non-negative by definition.
    Ok(acc.max(0.0))
}

/// One generated (or injected) token of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    /// Position within the turn, as reported by the host tokenizer.
    pub position: usize,
    /// Surface text of the token.
    pub text: String,
    /// Log-probability under the behavior policy that produced the rollout.
    pub logprob_old: f64,
    /// Log-probability under the policy currently being optimized.
    pub logprob_new: f64,
    /// 1 for model-generated tokens, 0 for prompt- or tool-injected ones.
    pub valid: bool,
    /// Token lies inside the answer block.
    pub in_answer: bool,
    /// Token is part of a numeric literal.
    pub is_numeric: bool,
    /// Behavior-policy distribution at this position, when recorded.
    pub dist_old: Option<TokenDist>,
    /// Current-policy distribution at this position, when recorded.
    pub dist_new: Option<TokenDist>,
}

/// One turn of a trajectory: raw text plus its token records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryTurn {
    pub text: String,
    pub tokens: Vec<TokenRecord>,
}

/// One rollout of a group, across all of its turns.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    /// Index of the rollout within its group.
    pub rollout_index: usize,
    pub turns: Vec<TrajectoryTurn>,
    /// Parsed responses per turn, when parsing succeeded.
    pub parsed: Vec<Option<StructuredResponse>>,
    /// Reward components, once computed.
    pub rewards: Option<RewardBreakdown>,
    /// Group-normalized advantage, once computed.
    pub advantage: Option<f64>,
}

impl TrajectoryRecord {
    /// Tokens flattened across turns in generation order.
    pub fn tokens(&self) -> impl Iterator<Item = &TokenRecord> {
        self.turns.iter().flat_map(|t| t.tokens.iter())
    }

    pub fn tokens_mut(&mut self) -> impl Iterator<Item = &mut TokenRecord> {
        self.turns.iter_mut().flat_map(|t| t.tokens.iter_mut())
    }

    pub fn token_at(&self, flat: usize) -> Option<&TokenRecord> {
        self.tokens().nth(flat)
    }
}

/// All rollouts answering one query, plus shared ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub query_id: String,
    /// Ground-truth score of the query image.
    pub r_gt: f64,
    /// Image size, when the host recorded it.
    pub image_dims: Option<(u32, u32)>,
    pub trajectories: Vec<TrajectoryRecord>,
}

/// KL-coverage regularizer knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlcConfig {
    /// Fraction of candidate tokens to mask.
    pub p: f64,
    /// Weight of the KL term in the step objective.
    pub beta_kl: f64,
    /// Lower bound on the mask size whenever any candidate exists.
    pub min_masked: usize,
}

impl Default for KlcConfig {
    fn default() -> Self {
        KlcConfig {
            p: 0.02,
            beta_kl: 0.04,
            min_masked: 1,
        }
    }
}

/// Identifies one token inside a batch by indices:
/// `batch[group].trajectories[traj]`, flattened token index `flat`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenRef {
    pub group: usize,
    pub traj: usize,
    pub flat: usize,
}

/// Covariance scores for every valid token of a batch, in batch order.
#[derive(Debug, Clone, PartialEq)]
pub struct CovScores {
    pub scores: Vec<(TokenRef, f64)>,
}

/// The selected KL-coverage mask for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct KlcMask {
    /// Chosen tokens, sorted by `(group, traj, flat)`.
    pub selected: Vec<TokenRef>,
    /// Number of candidate tokens the fraction was taken of.
    pub candidate_count: usize,
    /// Covariance scores of all candidates (not just the selected ones).
    pub cov_scores: Vec<(TokenRef, f64)>,
}

impl KlcMask {
    /// An empty mask (disables the KL term).
    pub fn empty() -> Self {
        KlcMask {
            selected: Vec::new(),
            candidate_count: 0,
            cov_scores: Vec::new(),
        }
    }
}

/// Per-step objective summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepObjective {
    /// Mean clipped surrogate across groups.
    pub surrogate: f64,
    /// Mean KL divergence over the masked tokens (0 for an empty mask).
    pub klc: f64,
    /// `surrogate - beta_kl * klc`.
    pub objective: f64,
    pub mask_size: usize,
    pub candidate_count: usize,
}

/// Default stabilizer added to the reward standard deviation when
/// normalizing group advantages.
pub const ADVANTAGE_EPS: f64 = 1e-8;

/// Normalizes the group's reward totals into advantages:
/// `A_k = (R_k - mean) / (std + eps)` with the population (1/G) standard
/// deviation. Identical rewards therefore give exactly zero advantages
/// instead of NaNs.
pub fn group_advantages(group: &mut RolloutGroup, eps: f64) -> Result<(), PolicyError> {
    let g = group.trajectories.len();
    if g < 2 {
        return Err(PolicyError::GroupTooSmall {
            query_id: group.query_id.clone(),
            got: g,
        });
    }
    let mut totals = Vec::with_capacity(g);
    for traj in &group.trajectories {
        let rewards = traj.rewards.as_ref().ok_or(PolicyError::MissingRewards {
            query_id: group.query_id.clone(),
            rollout_index: traj.rollout_index,
        })?;
        if !rewards.total.is_finite() {
            return Err(PolicyError::NonFinite(format!(
                "reward total of {}/{}",
                group.query_id, traj.rollout_index
            )));
        }
        totals.push(rewards.total);
    }
    let mean = totals.iter().sum::<f64>() / g as f64;
    let var = totals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    for (traj, total) in group.trajectories.iter_mut().zip(&totals) {
        traj.advantage = Some((total - mean) / (std + eps));
    }
    Ok(())
}

/// Covariance score of every valid token in the batch:
/// `(lp_new - mean lp_new) * (A - mean A)`, with both means taken over all
/// valid tokens of the whole batch and the trajectory advantage broadcast
/// to its tokens.
pub fn token_covariance(batch: &[RolloutGroup]) -> Result<CovScores, PolicyError> {
    let mut refs: Vec<(TokenRef, f64, f64)> = Vec::new();
    for (gi, group) in batch.iter().enumerate() {
        for (ti, traj) in group.trajectories.iter().enumerate() {
            let adv = traj.advantage.ok_or(PolicyError::MissingAdvantage {
                query_id: group.query_id.clone(),
                rollout_index: traj.rollout_index,
            })?;
            for (fi, token) in traj.tokens().enumerate() {
                if !token.valid {
                    continue;
                }
                if !token.logprob_new.is_finite() {
                    return Err(PolicyError::NonFinite(format!(
                        "logprob_new of {}/{}/{}",
                        group.query_id, traj.rollout_index, fi
                    )));
                }
                refs.push((
                    TokenRef {
                        group: gi,
                        traj: ti,
                        flat: fi,
                    },
                    token.logprob_new,
                    adv,
                ));
            }
        }
    }
    if refs.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let n = refs.len() as f64;
    let mean_lp = refs.iter().map(|(_, lp, _)| lp).sum::<f64>() / n;
    let mean_adv = refs.iter().map(|(_, _, a)| a).sum::<f64>() / n;
    Ok(CovScores {
        scores: refs
            .into_iter()
            .map(|(r, lp, adv)| (r, (lp - mean_lp) * (adv - mean_adv)))
            .collect(),
    })
}

fn is_candidate(token: &TokenRecord) -> bool {
    token.valid && token.in_answer && token.is_numeric
}

/// Selects the KL-coverage mask: among numeric answer tokens, take the
/// `max(min_masked, floor(p * candidates))` highest covariance scores
/// (clamped to the number of candidates; zero when there are none).
pub fn select_klc_mask(batch: &[RolloutGroup], cov: &CovScores, cfg: &KlcConfig) -> KlcMask {
    let mut candidates: Vec<(TokenRef, f64)> = cov
        .scores
        .iter()
        .filter(|(r, _)| {
            batch[r.group].trajectories[r.traj]
                .token_at(r.flat)
                .map(is_candidate)
                .unwrap_or(false)
        })
        .map(|&(r, c)| (r, c))
        .collect();
    let candidate_count = candidates.len();
    if candidate_count == 0 {
        return KlcMask::empty();
    }
    let target = ((cfg.p * candidate_count as f64).floor() as usize).max(cfg.min_masked);
    let take = target.min(candidate_count);
    // Descending covariance; deterministic tie-break on the stable identity
    // of the token within its group and rollout.
    let sort_key = |r: &TokenRef| {
        (
            batch[r.group].query_id.clone(),
            batch[r.group].trajectories[r.traj].rollout_index,
            r.flat,
        )
    };
    candidates.sort_by(|(ra, ca), (rb, cb)| {
        cb.total_cmp(ca).then_with(|| sort_key(ra).cmp(&sort_key(rb)))
    });
    let mut selected: Vec<TokenRef> = candidates[..take].iter().map(|&(r, _)| r).collect();
    selected.sort();
    KlcMask {
        selected,
        candidate_count,
        cov_scores: candidates,
    }
}

/// Mean KL divergence `D(old || new)` over the masked tokens; 0 for an
/// empty mask. Every selected token must carry both distributions.
pub fn klc_loss(batch: &[RolloutGroup], mask: &KlcMask) -> Result<f64, PolicyError> {
    if mask.selected.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for r in &mask.selected {
        let group = &batch[r.group];
        let traj = &group.trajectories[r.traj];
        let token = traj.token_at(r.flat).ok_or_else(|| PolicyError::MissingDistribution {
            query_id: group.query_id.clone(),
            rollout_index: traj.rollout_index,
            position: r.flat,
        })?;
        let (Some(old), Some(new)) = (&token.dist_old, &token.dist_new) else {
            return Err(PolicyError::MissingDistribution {
                query_id: group.query_id.clone(),
                rollout_index: traj.rollout_index,
                position: r.flat,
            });
        };
        acc += kl_divergence(old, new)?;
    }
    Ok(acc / mask.selected.len() as f64)
}

/// Clipped importance-ratio surrogate of one group: per trajectory the
/// valid-token mean of `min(r_t * A, clip(r_t, 1 - eps, 1 + eps) * A)`,
/// then the plain mean over the group's trajectories.
pub fn clipped_surrogate(group: &RolloutGroup, eps_clip: f64) -> Result<f64, PolicyError> {
    let mut acc = 0.0;
    for traj in &group.trajectories {
        let adv = traj.advantage.ok_or(PolicyError::MissingAdvantage {
            query_id: group.query_id.clone(),
            rollout_index: traj.rollout_index,
        })?;
        let mut token_acc = 0.0;
        let mut valid = 0usize;
        for token in traj.tokens() {
            if !token.valid {
                continue;
            }
            let ratio = (token.logprob_new - token.logprob_old).exp();
            if !ratio.is_finite() {
                return Err(PolicyError::NonFinite(format!(
                    "importance ratio of {}/{}",
                    group.query_id, traj.rollout_index
                )));
            }
            let clipped = ratio.clamp(1.0 - eps_clip, 1.0 + eps_clip);
            token_acc += (ratio * adv).min(clipped * adv);
            valid += 1;
        }
        if valid == 0 {
            return Err(PolicyError::NoValidTokens {
                query_id: group.query_id.clone(),
                rollout_index: traj.rollout_index,
            });
        }
        acc += token_acc / valid as f64;
    }
    Ok(acc / group.trajectories.len() as f64)
}

/// Step objective with an externally fixed mask.
///
/// This is the differentiable core: the mask is data the gradient does not
/// flow through, so gradient checks and inner optimization iterations hold
/// it constant while `logprob_new`/`dist_new` move with the policy.
pub fn step_objective_with_mask(
    batch: &[RolloutGroup],
    mask: &KlcMask,
    beta_kl: f64,
    eps_clip: f64,
) -> Result<StepObjective, PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let mut surrogate = 0.0;
    for group in batch {
        surrogate += clipped_surrogate(group, eps_clip)?;
    }
    surrogate /= batch.len() as f64;
    let klc = klc_loss(batch, mask)?;
    Ok(StepObjective {
        surrogate,
        klc,
        objective: surrogate - beta_kl * klc,
        mask_size: mask.selected.len(),
        candidate_count: mask.candidate_count,
    })
}

/// Full step objective: covariance scoring, mask selection, KL penalty, and
/// clipped surrogate in one call. Advantages must already be computed.
pub fn grpo_step_objective(
    batch: &[RolloutGroup],
    cfg: &KlcConfig,
    eps_clip: f64,
) -> Result<StepObjective, PolicyError> {
    let cov = token_covariance(batch)?;
    let mask = select_klc_mask(batch, &cov, cfg);
    step_objective_with_mask(batch, &mask, cfg.beta_kl, eps_clip)
}
