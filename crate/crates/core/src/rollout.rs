//! Rollout wire format and the reward-annotation / step-report pipeline.
//!
//! Hosts stream rollouts as JSONL, one record per trajectory. This module
//! reads and writes that format, regroups records by query, scores every
//! trajectory (format + score + rank), and produces the per-step training
//! objective. The wire types are deliberately separate from the in-memory
//! policy types: on-disk records tolerate missing optional fields and carry
//! plain maps, while the in-memory batch is fully validated.
//!
//! Scoring rules for one trajectory:
//!
//! * **format** is 1 only if every turn parses, every non-final turn
//!   requests a crop, and the final turn commits a final rating.
//! * **score** needs a parsed final rating; otherwise it is 0.
//! * **rank** compares the trajectory's rating against the other *rated*
//!   groups of the batch; trajectories without a rating get 0 and groups
//!   with no rated trajectory are excluded as comparators.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::metrics::unique_score_ratio;
use crate::policy::{
    group_advantages, grpo_step_objective, PolicyError, RolloutGroup, StepObjective, TokenDist,
    TokenRecord, TrajectoryRecord, TrajectoryTurn, ADVANTAGE_EPS,
};
use crate::response::{parse_response_opt, StructuredResponse, Tool};
use crate::reward::{
    rank_rewards, reward_breakdown, score_reward, GroupRatings, RewardBreakdown, RewardError,
};

/// Errors from rollout ingestion and scoring.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RolloutError {
    #[error("i/o: {0}")]
    Io(String),
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("group {query_id:?}: {reason}")]
    InconsistentGroup { query_id: String, reason: String },
    #[error(
        "rank reward needs at least 2 groups with parsed ratings, found {have}"
    )]
    InsufficientComparators { have: usize },
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// One token as it appears on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenWire {
    /// Position within the turn.
    pub pos: usize,
    #[serde(default)]
    pub text: String,
    /// Log-probability under the behavior policy.
    pub lp_old: f64,
    /// Log-probability under the current policy.
    pub lp_new: f64,
    /// 1 for model-generated tokens, 0 for injected ones.
    pub valid: u8,
    #[serde(default)]
    pub in_answer: bool,
    #[serde(default)]
    pub is_numeric: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist_old: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist_new: Option<BTreeMap<String, f64>>,
}

/// One turn as it appears on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnWire {
    pub text: String,
    #[serde(default)]
    pub tokens: Vec<TokenWire>,
}

/// One trajectory as it appears on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub query_id: String,
    pub rollout_index: usize,
    /// Ground-truth score of the query image.
    pub r_gt: f64,
    /// Image size, when the host recorded it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_dims: Option<(u32, u32)>,
    pub turns: Vec<TurnWire>,
    /// Reward components, filled in by [`annotate_rewards`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<RewardBreakdown>,
}

/// Reads JSONL rollout records, reporting parse failures with 1-based line
/// numbers. Blank lines are skipped.
pub fn read_rollouts<R: BufRead>(reader: R) -> Result<Vec<RolloutRecord>, RolloutError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| RolloutError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RolloutRecord = serde_json::from_str(&line).map_err(|e| {
            RolloutError::Line {
                line: i + 1,
                reason: e.to_string(),
            }
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Reads rollouts from a JSONL file.
pub fn read_rollouts_path(path: &Path) -> Result<Vec<RolloutRecord>, RolloutError> {
    let file = std::fs::File::open(path)
        .map_err(|e| RolloutError::Io(format!("{}: {e}", path.display())))?;
    read_rollouts(std::io::BufReader::new(file))
}

/// Writes rollout records as JSONL.
pub fn write_rollouts<W: Write>(
    mut writer: W,
    records: &[RolloutRecord],
) -> Result<(), RolloutError> {
    for record in records {
        let line =
            serde_json::to_string(record).map_err(|e| RolloutError::Io(e.to_string()))?;
        writeln!(writer, "{line}").map_err(|e| RolloutError::Io(e.to_string()))?;
    }
    Ok(())
}

fn token_to_policy(w: &TokenWire) -> Result<TokenRecord, String> {
    let valid = match w.valid {
        0 => false,
        1 => true,
        other => return Err(format!("token {}: valid flag {other} not in {{0, 1}}", w.pos)),
    };
    let convert = |name: &str, d: &Option<BTreeMap<String, f64>>| match d {
        None => Ok(None),
        Some(m) => TokenDist::new(m.clone())
            .map(Some)
            .map_err(|e| format!("token {}: {name}: {e}", w.pos)),
    };
    Ok(TokenRecord {
        position: w.pos,
        text: w.text.clone(),
        logprob_old: w.lp_old,
        logprob_new: w.lp_new,
        valid,
        in_answer: w.in_answer,
        is_numeric: w.is_numeric,
        dist_old: convert("dist_old", &w.dist_old)?,
        dist_new: convert("dist_new", &w.dist_new)?,
    })
}

/// Groups wire records by `query_id` (first-appearance order) into validated
/// in-memory rollout groups. Each turn is parsed on the way in; the parse
/// results feed the format reward and rating extraction later.
pub fn to_policy_groups(records: &[RolloutRecord]) -> Result<Vec<RolloutGroup>, RolloutError> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, RolloutGroup> = BTreeMap::new();
    for record in records {
        if !groups.contains_key(&record.query_id) {
            order.push(record.query_id.clone());
            groups.insert(
                record.query_id.clone(),
                RolloutGroup {
                    query_id: record.query_id.clone(),
                    r_gt: record.r_gt,
                    image_dims: record.image_dims,
                    trajectories: Vec::new(),
                },
            );
        }
        let group = groups.get_mut(&record.query_id).expect("just inserted");
        if group.r_gt != record.r_gt {
            return Err(RolloutError::InconsistentGroup {
                query_id: record.query_id.clone(),
                reason: format!(
                    "ground truth differs across records: {} vs {}",
                    group.r_gt, record.r_gt
                ),
            });
        }
        if group.image_dims != record.image_dims {
            return Err(RolloutError::InconsistentGroup {
                query_id: record.query_id.clone(),
                reason: "image dimensions differ across records".to_string(),
            });
        }
        if group
            .trajectories
            .iter()
            .any(|t| t.rollout_index == record.rollout_index)
        {
            return Err(RolloutError::InconsistentGroup {
                query_id: record.query_id.clone(),
                reason: format!("duplicate rollout index {}", record.rollout_index),
            });
        }
        let mut turns = Vec::with_capacity(record.turns.len());
        let mut parsed: Vec<Option<StructuredResponse>> = Vec::with_capacity(record.turns.len());
        for (ti, turn) in record.turns.iter().enumerate() {
            let mut tokens = Vec::with_capacity(turn.tokens.len());
            for tw in &turn.tokens {
                tokens.push(token_to_policy(tw).map_err(|reason| {
                    RolloutError::InconsistentGroup {
                        query_id: record.query_id.clone(),
                        reason: format!("rollout {} turn {}: {reason}", record.rollout_index, ti),
                    }
                })?);
            }
            turns.push(TrajectoryTurn {
                text: turn.text.clone(),
                tokens,
            });
            parsed.push(parse_response_opt(&turn.text, record.image_dims, ti + 1).ok());
        }
        group.trajectories.push(TrajectoryRecord {
            rollout_index: record.rollout_index,
            turns,
            parsed,
            rewards: record.rewards,
            advantage: None,
        });
    }
    Ok(order
        .into_iter()
        .map(|id| groups.remove(&id).expect("group recorded"))
        .collect())
}

/// Format gate over a trajectory's parsed turns: every turn parsed, every
/// non-final turn requested a crop, and the final turn committed.
fn trajectory_format(traj: &TrajectoryRecord) -> f64 {
    if traj.parsed.is_empty() {
        return 0.0;
    }
    let last = traj.parsed.len() - 1;
    for (i, p) in traj.parsed.iter().enumerate() {
        match p {
            Some(resp) if resp.think.has_required_sections() => {
                let expected = if i == last { Tool::Final } else { Tool::Crop };
                if resp.answer.tool != expected {
                    return 0.0;
                }
            }
            _ => return 0.0,
        }
    }
    1.0
}

/// Final committed rating of a trajectory, when its last turn parsed as a
/// final answer. Available even when an earlier turn failed the format gate.
fn trajectory_rating(traj: &TrajectoryRecord) -> Option<f64> {
    let last = traj.parsed.last()?.as_ref()?;
    (last.answer.tool == Tool::Final).then_some(last.answer.rating)
}

/// Scores every trajectory of the batch in place (both the in-memory groups
/// and, via the returned breakdowns, the wire records).
fn score_groups(
    groups: &mut [RolloutGroup],
    cfg: &EngineConfig,
) -> Result<(), RolloutError> {
    // Collect rated groups as rank comparators, remembering which
    // trajectory each rating came from.
    let mut comparators: Vec<GroupRatings> = Vec::new();
    let mut sources: Vec<(usize, Vec<usize>)> = Vec::new(); // (group idx, traj idxs)
    for (gi, group) in groups.iter().enumerate() {
        let mut ratings = Vec::new();
        let mut from = Vec::new();
        for (ti, traj) in group.trajectories.iter().enumerate() {
            if let Some(r) = trajectory_rating(traj) {
                ratings.push(r);
                from.push(ti);
            }
        }
        if !ratings.is_empty() {
            comparators.push(GroupRatings {
                mos: group.r_gt,
                ratings,
            });
            sources.push((gi, from));
        }
    }
    if comparators.len() < 2 {
        return Err(RolloutError::InsufficientComparators {
            have: comparators.len(),
        });
    }
    let ranks = rank_rewards(&comparators, cfg.v_floor)?;

    // Distribute rank values back onto their source trajectories.
    let mut rank_of: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for ((gi, from), group_ranks) in sources.iter().zip(&ranks) {
        for (ti, r) in from.iter().zip(group_ranks) {
            rank_of.insert((*gi, *ti), *r);
        }
    }

    for (gi, group) in groups.iter_mut().enumerate() {
        let r_gt = group.r_gt;
        for (ti, traj) in group.trajectories.iter_mut().enumerate() {
            let format = trajectory_format(traj);
            let score = match trajectory_rating(traj) {
                Some(r) => score_reward(r, r_gt, cfg.coeffs.sigma)?,
                None => 0.0,
            };
            let rank = rank_of.get(&(gi, ti)).copied().unwrap_or(0.0);
            traj.rewards = Some(reward_breakdown(format, score, rank, &cfg.coeffs));
        }
    }
    Ok(())
}

/// Scores all records and writes the reward breakdown back onto each wire
/// record. Returns the fully validated in-memory batch with rewards set.
pub fn annotate_rewards(
    records: &mut [RolloutRecord],
    cfg: &EngineConfig,
) -> Result<Vec<RolloutGroup>, RolloutError> {
    let mut groups = to_policy_groups(records)?;
    score_groups(&mut groups, cfg)?;
    let mut rewards_of: BTreeMap<(String, usize), RewardBreakdown> = BTreeMap::new();
    for group in &groups {
        for traj in &group.trajectories {
            rewards_of.insert(
                (group.query_id.clone(), traj.rollout_index),
                traj.rewards.expect("scored above"),
            );
        }
    }
    for record in records.iter_mut() {
        record.rewards = rewards_of
            .get(&(record.query_id.clone(), record.rollout_index))
            .copied();
    }
    Ok(groups)
}

/// Aggregate step diagnostics alongside the optimization objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub groups: usize,
    pub trajectories: usize,
    /// Fraction of trajectories passing the format gate.
    pub format_rate: f64,
    pub mean_total_reward: f64,
    /// Diversity of parsed final ratings at two decimals, when any exist.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rating_diversity: Option<f64>,
    pub objective: StepObjective,
}

/// Full step pipeline: score, normalize advantages per group, and evaluate
/// the clipped surrogate with KL-coverage regularization.
pub fn step_report(
    records: &mut [RolloutRecord],
    cfg: &EngineConfig,
) -> Result<(Vec<RolloutGroup>, StepReport), RolloutError> {
    let mut groups = annotate_rewards(records, cfg)?;
    for group in &mut groups {
        group_advantages(group, ADVANTAGE_EPS)?;
    }
    let objective = grpo_step_objective(&groups, &cfg.klc, cfg.eps_clip)?;

    let mut n = 0usize;
    let mut format_sum = 0.0;
    let mut total_sum = 0.0;
    let mut ratings = Vec::new();
    for group in &groups {
        for traj in &group.trajectories {
            let r = traj.rewards.expect("annotated above");
            n += 1;
            format_sum += r.format;
            total_sum += r.total;
            if let Some(rating) = trajectory_rating(traj) {
                ratings.push(rating);
            }
        }
    }
    let report = StepReport {
        groups: groups.len(),
        trajectories: n,
        format_rate: format_sum / n as f64,
        mean_total_reward: total_sum / n as f64,
        rating_diversity: unique_score_ratio(&ratings, 2).ok(),
        objective,
    };
    Ok((groups, report))
}
