//! Evaluation metrics: linear correlation, rank correlation, and the
//! score-diversity diagnostic.
//!
//! * [`plcc`] — Pearson linear correlation on raw values, two-pass so the
//!   mean is removed before any product is formed.
//! * [`srcc`] — Spearman rank correlation, defined as Pearson correlation of
//!   average (fractional) ranks; ties share the mean of the rank positions
//!   they span.
//! * [`unique_score_ratio`] — the fraction of distinct values after rounding
//!   to a fixed number of decimals. A healthy ground-truth rating column on a
//!   large perceptual dataset sits around 0.71 at two decimals; a policy that
//!   has collapsed onto a handful of scores sits near 0.02. Tracking this
//!   ratio during training is the cheapest early warning for diversity
//!   collapse.

use serde::{Deserialize, Serialize};

/// Errors from the evaluation metrics.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("input lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("{0} has zero variance; correlation undefined")]
    ZeroVariance(&'static str),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("empty input")]
    EmptyInput,
}

fn check_finite(xs: &[f64]) -> Result<(), MetricsError> {
    match xs.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(MetricsError::NonFinite(i)),
        None => Ok(()),
    }
}

/// Pearson linear correlation coefficient.
///
/// Two-pass: means first, then centered products, so large offsets do not
/// cancel catastrophically. Requires at least two samples and nonzero
/// variance on both sides.
pub fn plcc(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(MetricsError::TooFewSamples {
            need: 2,
            got: xs.len(),
        });
    }
    check_finite(xs)?;
    check_finite(ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(MetricsError::ZeroVariance("first input"));
    }
    if syy == 0.0 {
        return Err(MetricsError::ZeroVariance("second input"));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Average (fractional) ranks, 1-based; tied values share the mean of the
/// rank positions they would occupy.
pub fn average_ranks(xs: &[f64]) -> Result<Vec<f64>, MetricsError> {
    check_finite(xs)?;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) tie; 1-based ranks i+1..=j+1 average to
        // (i + j) / 2 + 1.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    Ok(ranks)
}

/// Spearman rank correlation: Pearson correlation of average ranks. Using
/// the general Pearson form (not the tie-free shortcut `1 - 6 Σd²/…`) keeps
/// tied inputs exact.
pub fn srcc(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch(xs.len(), ys.len()));
    }
    let rx = average_ranks(xs)?;
    let ry = average_ranks(ys)?;
    plcc(&rx, &ry)
}

/// Fraction of distinct values after rounding half-away-from-zero to
/// `decimals` places. Diversity diagnostic: 1.0 means every score distinct,
/// 1/n means total collapse onto a single value.
pub fn unique_score_ratio(scores: &[f64], decimals: u32) -> Result<f64, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    check_finite(scores)?;
    let scale = 10f64.powi(decimals as i32);
    let mut seen = std::collections::BTreeSet::new();
    for &s in scores {
        seen.insert((s * scale).round() as i64);
    }
    Ok(seen.len() as f64 / scores.len() as f64)
}

/// Convenience bundle of all three metrics over paired predictions and
/// ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub plcc: f64,
    pub srcc: f64,
    pub unique_score_ratio: f64,
    pub n: usize,
}

/// Computes all three metrics for a prediction column against ground truth;
/// the diversity ratio is taken over the predictions at two decimals.
pub fn eval_report(predictions: &[f64], ground_truth: &[f64]) -> Result<EvalReport, MetricsError> {
    Ok(EvalReport {
        plcc: plcc(predictions, ground_truth)?,
        srcc: srcc(predictions, ground_truth)?,
        unique_score_ratio: unique_score_ratio(predictions, 2)?,
        n: predictions.len(),
    })
}
