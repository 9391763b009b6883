//! Progressive difficulty re-sampling over a binned score axis.
//!
//! Training data is bucketed into `K` uniform bins by ground-truth score.
//! Early in training, epochs are drawn from the empirical bin distribution;
//! as the stage index `s` advances toward the final stage `S`, bin weights
//! are flattened by tempering the counts:
//!
//! ```text
//! w_i(s) ∝ count_i ^ (1 - γ·s/S)        (occupied bins only)
//! ```
//!
//! so stage 0 reproduces the data as-is and stage `S` (with `γ = 1`) weights
//! every *occupied* bin equally, forcing rare score regions to appear as
//! often as common ones. Empty bins always get weight zero — tempering must
//! never invent mass where there is no data (`0^0 = 1` would otherwise do
//! exactly that at the final stage).
//!
//! Epochs are drawn with replacement: first a bin from the tempered weights,
//! then a record uniformly within the bin. Seeds are derived per
//! `(stage, epoch)` with a splitmix64 mix so runs are reproducible and
//! epochs are decorrelated.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Errors from binning and re-sampling.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ResampleError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("bin count must be at least 1")]
    ZeroBins,
    #[error("bin range [{lo}, {hi}] is not a nonempty finite interval")]
    BadRange { lo: f64, hi: f64 },
    #[error("score {value} at index {index} falls outside [{lo}, {hi}]")]
    OutOfRange {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("stage {stage} exceeds total stages {stages}")]
    StageOutOfRange { stage: usize, stages: usize },
    #[error("stage schedule needs at least 1 stage for tempering")]
    DegenerateStages,
    #[error("gamma must be finite and in [0, 1], got {0}")]
    BadGamma(f64),
    #[error("could not build sampling distribution: {0}")]
    BadWeights(String),
}

/// Schedule parameters: number of score bins, number of tempering stages,
/// and tempering strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResampleParams {
    /// Number of uniform score bins (`K`).
    pub bins: usize,
    /// Final stage index (`S`); stages run `0..=S`.
    pub stages: usize,
    /// Tempering strength (`γ`); 1 reaches fully equal occupied bins at the
    /// final stage, 0 never leaves the empirical distribution.
    pub gamma: f64,
}

impl Default for ResampleParams {
    fn default() -> Self {
        ResampleParams {
            bins: 10,
            stages: 3,
            gamma: 1.0,
        }
    }
}

/// One dataset row: an identifier, its ground-truth score, and where the
/// underlying sample lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub mos: f64,
    pub path: String,
}

/// `k + 1` uniform edges spanning `[lo, hi]`.
pub fn uniform_edges(lo: f64, hi: f64, k: usize) -> Result<Vec<f64>, ResampleError> {
    if k == 0 {
        return Err(ResampleError::ZeroBins);
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(ResampleError::BadRange { lo, hi });
    }
    let mut edges = Vec::with_capacity(k + 1);
    for i in 0..=k {
        edges.push(lo + (hi - lo) * i as f64 / k as f64);
    }
    // Pin the endpoints exactly regardless of float accumulation.
    edges[0] = lo;
    edges[k] = hi;
    Ok(edges)
}

/// Scores bucketed into bins: half-open `[e_i, e_{i+1})` except the last
/// bin, which closes at the top edge so the maximum score is assignable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinAssignment {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Record indices per bin, in input order.
    pub indices: Vec<Vec<usize>>,
}

impl BinAssignment {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

fn bin_of(value: f64, edges: &[f64]) -> Option<usize> {
    let k = edges.len() - 1;
    let lo = edges[0];
    let hi = edges[k];
    if !(lo..=hi).contains(&value) {
        return None;
    }
    if value == hi {
        return Some(k - 1);
    }
    // partition_point finds the first edge > value; that edge's left
    // neighbour opens the containing half-open bin.
    Some(edges.partition_point(|&e| e <= value) - 1)
}

/// Buckets `scores` into the bins defined by `edges`.
pub fn bin_scores(scores: &[f64], edges: &[f64]) -> Result<BinAssignment, ResampleError> {
    if edges.len() < 2 {
        return Err(ResampleError::ZeroBins);
    }
    let k = edges.len() - 1;
    let mut counts = vec![0usize; k];
    let mut indices = vec![Vec::new(); k];
    for (i, &s) in scores.iter().enumerate() {
        let Some(b) = bin_of(s, edges) else {
            return Err(ResampleError::OutOfRange {
                index: i,
                value: s,
                lo: edges[0],
                hi: edges[k],
            });
        };
        counts[b] += 1;
        indices[b].push(i);
    }
    Ok(BinAssignment {
        edges: edges.to_vec(),
        counts,
        indices,
    })
}

/// Tempered bin weights for stage `s` of `S`: occupied bins carry
/// `count^(1 - γ·s/S)`, normalized; empty bins carry exactly zero.
pub fn stage_weights(
    counts: &[usize],
    stage: usize,
    stages: usize,
    gamma: f64,
) -> Result<Vec<f64>, ResampleError> {
    if !gamma.is_finite() || !(0.0..=1.0).contains(&gamma) {
        return Err(ResampleError::BadGamma(gamma));
    }
    if stage > stages {
        return Err(ResampleError::StageOutOfRange { stage, stages });
    }
    if stages == 0 && stage > 0 {
        return Err(ResampleError::DegenerateStages);
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(ResampleError::EmptyDataset);
    }
    let exponent = if stages == 0 {
        1.0
    } else {
        1.0 - gamma * stage as f64 / stages as f64
    };
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { (c as f64).powf(exponent) })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// A sampled epoch: which stage drew it and the record indices drawn (with
/// replacement).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub stage: usize,
    pub epoch: u64,
    pub indices: Vec<usize>,
}

/// splitmix64 finalizer: a cheap, well-mixed 64-bit permutation.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Derives a stream seed for `(stage, epoch)` from a base seed. Mixing each
/// coordinate separately keeps nearby stages and epochs decorrelated even
/// for small integer inputs.
pub fn epoch_seed(base: u64, stage: u64, epoch: u64) -> u64 {
    let mut z = base;
    z = splitmix64(z ^ splitmix64(stage));
    z = splitmix64(z ^ splitmix64(epoch));
    z
}

/// Draws `epoch_size` record indices with replacement: bin by tempered
/// weight, then uniformly within the bin.
pub fn sample_epoch(
    assignment: &BinAssignment,
    weights: &[f64],
    epoch_size: usize,
    seed: u64,
) -> Result<Vec<usize>, ResampleError> {
    if assignment.total() == 0 {
        return Err(ResampleError::EmptyDataset);
    }
    let dist =
        WeightedIndex::new(weights).map_err(|e| ResampleError::BadWeights(e.to_string()))?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(epoch_size);
    for _ in 0..epoch_size {
        let bin = dist.sample(&mut rng);
        let members = &assignment.indices[bin];
        out.push(members[rng.random_range(0..members.len())]);
    }
    Ok(out)
}

/// Bins a dataset and draws one epoch for the given stage of the schedule.
pub fn plan_epoch(
    records: &[DatasetRecord],
    params: &ResampleParams,
    edges: &[f64],
    stage: usize,
    epoch: u64,
    base_seed: u64,
    epoch_size: usize,
) -> Result<(EpochPlan, BinAssignment, Vec<f64>), ResampleError> {
    if records.is_empty() {
        return Err(ResampleError::EmptyDataset);
    }
    let scores: Vec<f64> = records.iter().map(|r| r.mos).collect();
    let assignment = bin_scores(&scores, edges)?;
    let weights = stage_weights(&assignment.counts, stage, params.stages, params.gamma)?;
    let indices = sample_epoch(
        &assignment,
        &weights,
        epoch_size,
        epoch_seed(base_seed, stage as u64, epoch),
    )?;
    Ok((
        EpochPlan {
            stage,
            epoch,
            indices,
        },
        assignment,
        weights,
    ))
}
