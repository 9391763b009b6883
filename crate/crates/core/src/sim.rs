//! Toy-policy simulator demonstrating score-diversity collapse and its
//! prevention by KL-coverage regularization.
//!
//! The simulator trains a tabular softmax policy over a fixed vocabulary of
//! 17 rating symbols (`1.00`, `1.25`, …, `5.00`): each synthetic image
//! belongs to one of a handful of contexts, and the policy holds one logit
//! row per context. A trajectory is a single numeric answer token — the
//! sampled rating — wrapped in a minimal well-formed response, so the full
//! engine pipeline (rewards, group advantages, clipped surrogate, coverage
//! mask, KL penalty) runs unmodified on simulator batches.
//!
//! With the KL term disabled, group-relative optimization steadily sharpens
//! each context's distribution onto its single best-rewarded symbol:
//! correlation with ground truth stays respectable while the *number of
//! distinct scores the policy can produce* collapses toward one per context.
//! With coverage masking on, the highest-covariance answer tokens — exactly
//! the ones the surrogate pushes hardest — pay a KL price for moving, which
//! brakes the sharpening and preserves score diversity at equal training
//! length. [`run_experiment`] runs one arm and reports per-step and final
//! diagnostics so the two arms can be compared seed-by-seed.
//!
//! The update rule is plain gradient ascent on the step objective with an
//! analytic gradient ([`objective_and_grad`]); the coverage mask is chosen
//! once per step at the pre-update policy and then held fixed for all inner
//! iterations, matching the stop-gradient treatment of the mask in the
//! engine objective. Because the KL gradient vanishes exactly at the
//! pre-update policy, at least two inner iterations are needed for the KL
//! term to influence the trajectory of the parameters; the default
//! configuration uses four. The KL weight is likewise simulator-scale: the
//! penalty only sees the displacement accrued *within* one step, which a
//! handful of inner iterations keeps small, so holding diversity over
//! hundreds of steps takes a weight far above the production value.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{plcc, srcc, unique_score_ratio, MetricsError};
use crate::policy::{
    group_advantages, select_klc_mask, step_objective_with_mask, token_covariance, KlcConfig,
    KlcMask, PolicyError, RolloutGroup, StepObjective, TokenDist, TokenRecord, TokenRef,
    TrajectoryRecord, TrajectoryTurn,
};
use crate::resample::{
    bin_scores, epoch_seed, sample_epoch, stage_weights, uniform_edges, BinAssignment,
    ResampleError, ResampleParams,
};
use crate::response::{serialize_response, AnswerBlock, BBox, StructuredResponse, ThinkBlock, Tool};
use crate::reward::{
    rank_rewards, reward_breakdown, score_reward, GroupRatings, RewardCoefficients, RewardError,
};

/// Number of distinct rating symbols the toy policy can emit.
pub const NUM_RATINGS: usize = 17;

/// Salt folded into the seed stream used for trajectory sampling.
const ROLLOUT_SALT: u64 = 0x726f_6c6c;
/// Salt folded into the seed stream used for the final evaluation pass.
const EVAL_SALT: u64 = 0x6576_616c;

/// Errors from the simulator.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("bad run configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Resample(#[from] ResampleError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// The 17 rating symbols, `1.00` through `5.00` in quarter steps. Their
/// lexicographic order equals their numeric order, so ordered maps keyed by
/// symbol iterate in rating order.
pub fn rating_symbols() -> &'static [String; NUM_RATINGS] {
    static SYMBOLS: OnceLock<[String; NUM_RATINGS]> = OnceLock::new();
    SYMBOLS.get_or_init(|| {
        std::array::from_fn(|i| format!("{:.2}", rating_value(i)))
    })
}

/// Numeric value of rating symbol `index`.
pub fn rating_value(index: usize) -> f64 {
    1.0 + 0.25 * index as f64
}

/// One synthetic image: a context the policy conditions on and a
/// ground-truth score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticImage {
    pub id: String,
    pub context: usize,
    pub mos: f64,
}

/// Tabular softmax policy: one logit row per context over the rating
/// symbols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub contexts: usize,
    /// `logits[context][symbol]`.
    pub logits: Vec<Vec<f64>>,
}

impl ToyPolicy {
    /// Uniform policy: all logits zero.
    pub fn new(contexts: usize) -> Self {
        ToyPolicy {
            contexts,
            logits: vec![vec![0.0; NUM_RATINGS]; contexts],
        }
    }

    /// Softmax probabilities for one context (max-subtracted, so large
    /// logits cannot overflow).
    pub fn probs(&self, context: usize) -> Vec<f64> {
        let row = &self.logits[context];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    /// The context's distribution keyed by rating symbol.
    pub fn dist(&self, context: usize) -> TokenDist {
        let probs = self.probs(context);
        let map: BTreeMap<String, f64> = rating_symbols()
            .iter()
            .cloned()
            .zip(probs)
            .collect();
        TokenDist::new(map).expect("softmax output is a valid distribution")
    }

    /// Log-probability of one symbol under one context.
    pub fn logprob(&self, context: usize, symbol: usize) -> f64 {
        self.probs(context)[symbol].ln()
    }

    /// Mean Shannon entropy (nats) across contexts.
    pub fn entropy_mean(&self) -> f64 {
        let total: f64 = (0..self.contexts)
            .map(|c| {
                self.probs(c)
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| -p * p.ln())
                    .sum::<f64>()
            })
            .sum();
        total / self.contexts as f64
    }

    /// Expected rating value under one context.
    pub fn expected_rating(&self, context: usize) -> f64 {
        self.probs(context)
            .iter()
            .enumerate()
            .map(|(i, &p)| p * rating_value(i))
            .sum()
    }

    /// Samples a symbol index from one context.
    pub fn sample<R: Rng>(&self, context: usize, rng: &mut R) -> usize {
        let probs = self.probs(context);
        let mut u: f64 = rng.random_range(0.0..1.0);
        for (i, &p) in probs.iter().enumerate() {
            u -= p;
            if u < 0.0 {
                return i;
            }
        }
        NUM_RATINGS - 1
    }
}

/// Full configuration of one simulator run. The default is the frozen
/// collapse-demonstration operating point: identical settings with the KL
/// term switched on or off separate cleanly in final score diversity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Seed for rollout sampling and batch composition.
    pub seed: u64,
    /// Seed for the synthetic dataset (shared across arms).
    pub data_seed: u64,
    pub steps: usize,
    pub contexts: usize,
    pub dataset_size: usize,
    /// Images per step (`B`).
    pub batch_groups: usize,
    /// Rollouts per image (`G`).
    pub group_size: usize,
    /// Gradient-ascent iterations per step under the fixed mask.
    pub inner_iters: usize,
    pub learning_rate: f64,
    pub eps_clip: f64,
    /// Stabilizer in the advantage normalization.
    pub adv_eps: f64,
    /// Variance floor of the rank reward's comparison model.
    pub v_floor: f64,
    pub coeffs: RewardCoefficients,
    /// Coverage-mask knobs. `p` and `beta_kl` here are simulator-scale:
    /// with only 17 symbols and one token per trajectory the mask fraction
    /// and KL weight must be far larger than production values to exert a
    /// comparable braking force.
    pub klc: KlcConfig,
    pub resample: ResampleParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            data_seed: 7777,
            steps: 200,
            contexts: 6,
            dataset_size: 64,
            batch_groups: 4,
            group_size: 8,
            inner_iters: 4,
            learning_rate: 0.35,
            eps_clip: 0.2,
            adv_eps: 1e-8,
            v_floor: 1e-4,
            coeffs: RewardCoefficients::default(),
            klc: KlcConfig {
                p: 0.5,
                beta_kl: 20.0,
                min_masked: 1,
            },
            resample: ResampleParams::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |msg: &str| Err(SimError::BadConfig(msg.to_string()));
        if self.contexts < 2 {
            return fail("need at least 2 contexts");
        }
        if self.dataset_size < self.contexts {
            return fail("dataset smaller than the number of contexts");
        }
        if self.batch_groups < 2 {
            return fail("rank reward needs at least 2 groups per batch");
        }
        if self.group_size < 2 {
            return fail("group advantages need at least 2 rollouts per group");
        }
        if self.inner_iters == 0 {
            return fail("need at least 1 inner iteration");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail("learning rate must be positive");
        }
        if !(self.eps_clip.is_finite() && self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            return fail("clip width must lie in (0, 1)");
        }
        if !(self.adv_eps.is_finite() && self.adv_eps > 0.0) {
            return fail("advantage stabilizer must be positive");
        }
        if !(self.v_floor.is_finite() && self.v_floor > 0.0) {
            return fail("variance floor must be positive");
        }
        Ok(())
    }
}

/// Per-step training diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    /// Mean total reward across the step's trajectories.
    pub mean_reward: f64,
    /// Mean policy entropy after the step's updates.
    pub policy_entropy: f64,
    /// Diversity of the step's sampled ratings (two decimals).
    pub unique_score_ratio: f64,
    /// KL of the post-update policy against the step's snapshot, over the
    /// masked tokens (0 with the mask disabled).
    pub klc_loss: f64,
    pub mask_size: usize,
}

/// End-of-run evaluation over the whole dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalStats {
    /// Linear correlation of per-image expected ratings with ground truth;
    /// absent when degenerate (e.g. an untrained, constant policy).
    pub plcc: Option<f64>,
    /// Rank correlation of per-image expected ratings with ground truth.
    pub srcc: Option<f64>,
    /// Diversity of one sampled rating per dataset image (two decimals).
    pub unique_score_ratio: f64,
    /// Mean policy entropy at the end of training.
    pub policy_entropy: f64,
}

/// Everything one arm of the experiment produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub klc_on: bool,
    pub seed: u64,
    /// Mean policy entropy before any update (`ln 17` for uniform init).
    pub initial_entropy: f64,
    pub steps: Vec<StepStats>,
    #[serde(rename = "final")]
    pub final_stats: FinalStats,
}

/// Synthesizes the dataset: contexts with long-tailed sizes, context score
/// centers spread across the rating scale, per-image scores jittered around
/// their center. Deterministic in `data_seed`.
pub fn generate_dataset(cfg: &RunConfig) -> Vec<SyntheticImage> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.data_seed);
    let c = cfg.contexts;
    let centers: Vec<f64> = (0..c)
        .map(|i| 1.5 + 3.0 * i as f64 / (c - 1).max(1) as f64)
        .collect();
    // Long-tailed cluster sizes: weight 1/(rank+1), at least one image each.
    let weight_total: f64 = (0..c).map(|i| 1.0 / (i + 1) as f64).sum();
    let mut sizes: Vec<usize> = (0..c)
        .map(|i| {
            let w = 1.0 / (i + 1) as f64 / weight_total;
            ((cfg.dataset_size as f64 * w).round() as usize).max(1)
        })
        .collect();
    // Reconcile rounding so the totals match exactly.
    loop {
        let total: usize = sizes.iter().sum();
        match total.cmp(&cfg.dataset_size) {
            std::cmp::Ordering::Equal => break,
            std::cmp::Ordering::Less => {
                let i = sizes
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, &s)| s)
                    .map(|(i, _)| i)
                    .expect("nonempty");
                sizes[i] += 1;
            }
            std::cmp::Ordering::Greater => {
                let i = sizes
                    .iter()
                    .enumerate()
                    .max_by_key(|(_, &s)| s)
                    .map(|(i, _)| i)
                    .expect("nonempty");
                sizes[i] -= 1;
            }
        }
    }
    let mut images = Vec::with_capacity(cfg.dataset_size);
    for (context, (&size, &center)) in sizes.iter().zip(&centers).enumerate() {
        for _ in 0..size {
            let noise: f64 = rng.random_range(-0.35..0.35);
            images.push(SyntheticImage {
                id: format!("img{:04}", images.len()),
                context,
                mos: (center + noise).clamp(1.0, 5.0),
            });
        }
    }
    images
}

/// A rolled-out batch with the simulator-side bookkeeping the gradient
/// needs: context and sampled symbol per trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SimBatch {
    pub groups: Vec<RolloutGroup>,
    /// Context of each group's image.
    pub contexts: Vec<usize>,
    /// Sampled symbol index per `[group][trajectory]`.
    pub symbols: Vec<Vec<usize>>,
}

fn sim_response(rating: f64) -> StructuredResponse {
    StructuredResponse {
        think: ThinkBlock {
            summary: "synthetic quality summary".to_string(),
            improvements: "increase sharpness".to_string(),
            issues: "avoid halo artifacts".to_string(),
            decision_rationale: "overall impression".to_string(),
            raw: String::new(),
        },
        answer: AnswerBlock {
            bbox: BBox::SENTINEL,
            rating,
            tool: Tool::Final,
        },
        turn_index: 1,
    }
}

/// Rolls out one group: `group_size` single-token trajectories sampled from
/// the current policy, with behavior and current log-probabilities equal
/// (the batch is fresh) and full per-position distributions recorded.
pub fn rollout_group<R: Rng>(
    policy: &ToyPolicy,
    image: &SyntheticImage,
    group_size: usize,
    rng: &mut R,
) -> (RolloutGroup, Vec<usize>) {
    let dist = policy.dist(image.context);
    let probs = policy.probs(image.context);
    let mut trajectories = Vec::with_capacity(group_size);
    let mut symbols = Vec::with_capacity(group_size);
    for rollout_index in 0..group_size {
        let v = policy.sample(image.context, rng);
        symbols.push(v);
        let lp = probs[v].ln();
        let response = sim_response(rating_value(v));
        let token = TokenRecord {
            position: 0,
            text: rating_symbols()[v].clone(),
            logprob_old: lp,
            logprob_new: lp,
            valid: true,
            in_answer: true,
            is_numeric: true,
            dist_old: Some(dist.clone()),
            dist_new: Some(dist.clone()),
        };
        trajectories.push(TrajectoryRecord {
            rollout_index,
            turns: vec![TrajectoryTurn {
                text: serialize_response(&response),
                tokens: vec![token],
            }],
            parsed: vec![Some(response)],
            rewards: None,
            advantage: None,
        });
    }
    (
        RolloutGroup {
            query_id: image.id.clone(),
            r_gt: image.mos,
            image_dims: None,
            trajectories,
        },
        symbols,
    )
}

/// Scores a fresh batch: format is 1 by construction, score from the
/// sampled rating, rank across the batch's groups; then normalizes
/// advantages within each group.
pub fn score_batch(batch: &mut SimBatch, cfg: &RunConfig) -> Result<f64, SimError> {
    let rating_groups: Vec<GroupRatings> = batch
        .groups
        .iter()
        .zip(&batch.symbols)
        .map(|(g, symbols)| GroupRatings {
            mos: g.r_gt,
            ratings: symbols.iter().map(|&v| rating_value(v)).collect(),
        })
        .collect();
    let ranks = rank_rewards(&rating_groups, cfg.v_floor)?;
    let mut total_sum = 0.0;
    let mut n = 0usize;
    for ((group, symbols), group_ranks) in
        batch.groups.iter_mut().zip(&batch.symbols).zip(&ranks)
    {
        let r_gt = group.r_gt;
        for ((traj, &v), &rank) in group.trajectories.iter_mut().zip(symbols).zip(group_ranks) {
            let score = score_reward(rating_value(v), r_gt, cfg.coeffs.sigma)?;
            let breakdown = reward_breakdown(1.0, score, rank, &cfg.coeffs);
            total_sum += breakdown.total;
            n += 1;
            traj.rewards = Some(breakdown);
        }
    }
    for group in &mut batch.groups {
        group_advantages(group, cfg.adv_eps)?;
    }
    Ok(total_sum / n as f64)
}

/// Refreshes `logprob_new`/`dist_new` of every token from the current
/// policy, leaving the behavior-policy fields untouched.
pub fn sync_policy(policy: &ToyPolicy, batch: &mut SimBatch) {
    for (group, (&context, symbols)) in batch
        .groups
        .iter_mut()
        .zip(batch.contexts.iter().zip(&batch.symbols))
    {
        let dist = policy.dist(context);
        let probs = policy.probs(context);
        for (traj, &v) in group.trajectories.iter_mut().zip(symbols) {
            for token in traj.tokens_mut() {
                token.logprob_new = probs[v].ln();
                token.dist_new = Some(dist.clone());
            }
        }
    }
}

fn dist_as_vec(dist: &TokenDist) -> Vec<f64> {
    rating_symbols()
        .iter()
        .map(|s| dist.probs().get(s).copied().unwrap_or(0.0))
        .collect()
}

/// Evaluates the step objective at the current policy and its analytic
/// gradient with respect to the policy logits, under a fixed mask.
///
/// Exposed so the gradient can be verified against finite differences of
/// [`step_objective_with_mask`]. Syncs the batch to the policy first.
pub fn objective_and_grad(
    policy: &ToyPolicy,
    batch: &mut SimBatch,
    mask: &KlcMask,
    beta_kl: f64,
    eps_clip: f64,
) -> Result<(StepObjective, Vec<Vec<f64>>), SimError> {
    sync_policy(policy, batch);
    let objective = step_objective_with_mask(&batch.groups, mask, beta_kl, eps_clip)?;

    let mut grad = vec![vec![0.0; NUM_RATINGS]; policy.contexts];
    let b = batch.groups.len();
    let g = batch
        .groups
        .first()
        .map(|gr| gr.trajectories.len())
        .unwrap_or(0);
    let scale = 1.0 / (b * g) as f64;

    // Clipped-surrogate part: each trajectory contributes
    // adv * r * (1{w = v} - pi(w|c)) / (B*G) while its unclipped branch is
    // active, and nothing once clipping has frozen it.
    for (group, (&context, symbols)) in batch
        .groups
        .iter()
        .zip(batch.contexts.iter().zip(&batch.symbols))
    {
        let probs = policy.probs(context);
        for (traj, &v) in group.trajectories.iter().zip(symbols) {
            let adv = traj.advantage.expect("advantages computed before stepping");
            if adv == 0.0 {
                continue;
            }
            let token = traj.token_at(0).expect("one token per trajectory");
            let ratio = (probs[v].ln() - token.logprob_old).exp();
            let active = if adv > 0.0 {
                ratio <= 1.0 + eps_clip
            } else {
                ratio >= 1.0 - eps_clip
            };
            if !active {
                continue;
            }
            let coeff = scale * adv * ratio;
            for (w, gw) in grad[context].iter_mut().enumerate() {
                let indicator = if w == v { 1.0 } else { 0.0 };
                *gw += coeff * (indicator - probs[w]);
            }
        }
    }

    // KL part: d KL(p_old || pi)/d logit_w = pi(w|c) - p_old(w), averaged
    // over the masked tokens and weighted by -beta_kl in the objective.
    if !mask.selected.is_empty() && beta_kl != 0.0 {
        let kl_scale = beta_kl / mask.selected.len() as f64;
        for TokenRef { group, traj, flat } in &mask.selected {
            let context = batch.contexts[*group];
            let token = batch.groups[*group].trajectories[*traj]
                .token_at(*flat)
                .expect("mask refers to an existing token");
            let p_old = dist_as_vec(token.dist_old.as_ref().expect("simulator records dists"));
            let probs = policy.probs(context);
            for (w, gw) in grad[context].iter_mut().enumerate() {
                *gw -= kl_scale * (probs[w] - p_old[w]);
            }
        }
    }

    Ok((objective, grad))
}

/// One training step: select the mask at the snapshot policy, then run
/// `inner_iters` gradient-ascent updates against the fixed mask. Returns
/// the post-update objective evaluation.
pub fn train_step(
    policy: &mut ToyPolicy,
    batch: &mut SimBatch,
    cfg: &RunConfig,
    klc_on: bool,
) -> Result<StepObjective, SimError> {
    let (mask, beta_kl) = if klc_on {
        let cov = token_covariance(&batch.groups)?;
        (
            select_klc_mask(&batch.groups, &cov, &cfg.klc),
            cfg.klc.beta_kl,
        )
    } else {
        (KlcMask::empty(), 0.0)
    };
    for _ in 0..cfg.inner_iters {
        let (_, grad) = objective_and_grad(policy, batch, &mask, beta_kl, cfg.eps_clip)?;
        for (row, grow) in policy.logits.iter_mut().zip(&grad) {
            for (l, g) in row.iter_mut().zip(grow) {
                *l += cfg.learning_rate * g;
            }
        }
    }
    sync_policy(policy, batch);
    Ok(step_objective_with_mask(
        &batch.groups,
        &mask,
        beta_kl,
        cfg.eps_clip,
    )?)
}

fn binned_dataset(
    dataset: &[SyntheticImage],
    params: &ResampleParams,
) -> Result<BinAssignment, SimError> {
    let edges = uniform_edges(1.0, 5.0, params.bins)?;
    let scores: Vec<f64> = dataset.iter().map(|img| img.mos).collect();
    Ok(bin_scores(&scores, &edges)?)
}

/// Runs one arm of the collapse experiment.
pub fn run_experiment(cfg: &RunConfig, klc_on: bool) -> Result<RunReport, SimError> {
    cfg.validate()?;
    let dataset = generate_dataset(cfg);
    let assignment = binned_dataset(&dataset, &cfg.resample)?;
    let mut policy = ToyPolicy::new(cfg.contexts);
    let initial_entropy = policy.entropy_mean();
    let stages = cfg.resample.stages;

    let mut step_stats = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        // Progress through the tempering schedule across the run.
        let stage = (step * (stages + 1))
            .checked_div(cfg.steps)
            .map_or(0, |s| s.min(stages));
        let weights =
            stage_weights(&assignment.counts, stage, stages, cfg.resample.gamma)?;
        let image_indices = sample_epoch(
            &assignment,
            &weights,
            cfg.batch_groups,
            epoch_seed(cfg.seed, stage as u64, step as u64),
        )?;
        let mut rollout_rng = ChaCha20Rng::seed_from_u64(epoch_seed(
            cfg.seed ^ ROLLOUT_SALT,
            stage as u64,
            step as u64,
        ));

        let mut groups = Vec::with_capacity(cfg.batch_groups);
        let mut contexts = Vec::with_capacity(cfg.batch_groups);
        let mut symbols = Vec::with_capacity(cfg.batch_groups);
        for &i in &image_indices {
            let image = &dataset[i];
            let (group, group_symbols) =
                rollout_group(&policy, image, cfg.group_size, &mut rollout_rng);
            groups.push(group);
            contexts.push(image.context);
            symbols.push(group_symbols);
        }
        let mut batch = SimBatch {
            groups,
            contexts,
            symbols,
        };
        let mean_reward = score_batch(&mut batch, cfg)?;
        let objective = train_step(&mut policy, &mut batch, cfg, klc_on)?;

        let sampled: Vec<f64> = batch
            .symbols
            .iter()
            .flatten()
            .map(|&v| rating_value(v))
            .collect();
        step_stats.push(StepStats {
            step,
            mean_reward,
            policy_entropy: policy.entropy_mean(),
            unique_score_ratio: unique_score_ratio(&sampled, 2)?,
            klc_loss: objective.klc,
            mask_size: objective.mask_size,
        });
    }

    // Final evaluation over the full dataset: correlations from expected
    // ratings, diversity from one sampled rating per image under a fixed
    // evaluation stream.
    let mos: Vec<f64> = dataset.iter().map(|img| img.mos).collect();
    let expected: Vec<f64> = dataset
        .iter()
        .map(|img| policy.expected_rating(img.context))
        .collect();
    let mut eval_rng =
        ChaCha20Rng::seed_from_u64(epoch_seed(cfg.seed ^ EVAL_SALT, 0, 0));
    let sampled: Vec<f64> = dataset
        .iter()
        .map(|img| rating_value(policy.sample(img.context, &mut eval_rng)))
        .collect();
    let final_stats = FinalStats {
        plcc: plcc(&expected, &mos).ok(),
        srcc: srcc(&expected, &mos).ok(),
        unique_score_ratio: unique_score_ratio(&sampled, 2)?,
        policy_entropy: policy.entropy_mean(),
    };
    Ok(RunReport {
        klc_on,
        seed: cfg.seed,
        initial_entropy,
        steps: step_stats,
        final_stats,
    })
}
