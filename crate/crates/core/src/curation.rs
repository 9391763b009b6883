//! Dataset-curation filters for cold-start generations.
//!
//! Two independent gates decide whether a generated training sample
//! survives:
//!
//! * **Visual-reliance filter (VRF).** Each sample is generated twice, once
//!   with the image attached and once without. If the two generations are
//!   similar on *every* measured axis — final rating, crop box overlap,
//!   answer-distribution entropy, and tool choice — the sample never needed
//!   the image, teaches blind guessing, and is discarded. Dissimilarity on
//!   any single axis retains it.
//! * **Hint-assisted consistency filter (HACF).** The sample's rationale is
//!   serialized together with numeric image hints into a rater request; an
//!   external rater answers `pass` or `fail`. Anything else is a protocol
//!   error that queues the sample for retry instead of silently retaining
//!   or dropping it.
//!
//! Both filters emit a [`FilterOutcome`] carrying the measured statistics,
//! so curation decisions stay auditable after the fact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::hints::HintVector;
use crate::policy::TokenDist;
use crate::response::{AnswerBlock, BBox, Tool};

pub use crate::hints::compute_hints;

/// Errors from the curation filters.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CurationError {
    #[error("no per-position distributions supplied")]
    NoDistributions,
    #[error("invalid distribution at position {position}: {reason}")]
    BadDistribution { position: usize, reason: String },
    #[error("rater answered {answer:?}; expected \"pass\" or \"fail\"")]
    RaterProtocolError { answer: String },
    #[error("rater transport failed: {0}")]
    RaterTransport(String),
}

/// Keep or drop decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Retain,
    Discard,
}

/// Which filter produced an outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurationStage {
    Vrf,
    Hacf,
}

/// Auditable result of one filter applied to one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub sample_id: String,
    pub stage: CurationStage,
    pub verdict: Verdict,
    /// Measured quantities the verdict was based on.
    pub statistics: BTreeMap<String, serde_json::Value>,
}

/// Similarity thresholds of the visual-reliance filter.
///
/// A sample is discarded only when **all** criteria indicate similarity:
/// strict `<` for the two difference thresholds, inclusive `>=` for the
/// overlap threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VrfThresholds {
    /// `|rating_with - rating_without| < rating_diff` counts as similar.
    pub rating_diff: f64,
    /// `IoU >= iou_min` counts as similar (skipped when both answers are
    /// final, which carries no crop geometry).
    pub iou_min: f64,
    /// `|entropy_with - entropy_without| < entropy_diff` counts as similar.
    pub entropy_diff: f64,
}

impl Default for VrfThresholds {
    fn default() -> Self {
        VrfThresholds {
            rating_diff: 0.05,
            iou_min: 0.5,
            entropy_diff: 0.01,
        }
    }
}

/// One side of a paired generation (with or without the image).
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSide {
    pub answer: AnswerBlock,
    /// Mean answer-token entropy in nats.
    pub entropy: f64,
}

/// A sample generated twice for the visual-reliance filter.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedGeneration {
    pub sample_id: String,
    pub image_ref: String,
    pub with_image: GenerationSide,
    pub without_image: GenerationSide,
    /// Free-text rationale that accompanies the sample into rater requests.
    pub rationale: String,
}

/// Intersection-over-union of two boxes with sentinel semantics: two
/// "no crop" sentinels agree perfectly (1.0), a sentinel against a real box
/// shares nothing (0.0).
pub fn bbox_iou(a: &BBox, b: &BBox) -> f64 {
    match (a.is_sentinel(), b.is_sentinel()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        (false, false) => {}
    }
    let ax = a.area();
    let bx = b.area();
    if ax <= 0 || bx <= 0 {
        return 0.0;
    }
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0);
    let inter = ix * iy;
    let union = ax + bx - inter;
    inter as f64 / union as f64
}

/// Mean Shannon entropy (nats) of the per-position answer distributions.
pub fn answer_entropy(dists: &[TokenDist]) -> Result<f64, CurationError> {
    if dists.is_empty() {
        return Err(CurationError::NoDistributions);
    }
    Ok(dists.iter().map(TokenDist::entropy).sum::<f64>() / dists.len() as f64)
}

/// Applies the visual-reliance filter to one parsed pair.
///
/// Discards exactly when all four similarity criteria hold; the returned
/// statistics record every measured quantity plus the per-criterion result.
pub fn vrf_filter(pair: &PairedGeneration, thresholds: &VrfThresholds) -> FilterOutcome {
    let w = &pair.with_image;
    let wo = &pair.without_image;
    let rating_diff = (w.answer.rating - wo.answer.rating).abs();
    let entropy_diff = (w.entropy - wo.entropy).abs();
    let tool_match = w.answer.tool == wo.answer.tool;
    let both_final = w.answer.tool == Tool::Final && wo.answer.tool == Tool::Final;
    let iou = if both_final {
        None
    } else {
        Some(bbox_iou(&w.answer.bbox, &wo.answer.bbox))
    };

    let rating_similar = rating_diff < thresholds.rating_diff;
    let entropy_similar = entropy_diff < thresholds.entropy_diff;
    // Both-final pairs carry no crop geometry to compare; the overlap
    // criterion is vacuously similar for them.
    let iou_similar = iou.map(|v| v >= thresholds.iou_min).unwrap_or(true);
    let similar = rating_similar && iou_similar && entropy_similar && tool_match;

    let mut statistics = BTreeMap::new();
    statistics.insert("rating_diff".to_string(), serde_json::json!(rating_diff));
    statistics.insert(
        "iou".to_string(),
        match iou {
            Some(v) => serde_json::json!(v),
            None => serde_json::json!("skipped"),
        },
    );
    statistics.insert("entropy_diff".to_string(), serde_json::json!(entropy_diff));
    statistics.insert("tool_match".to_string(), serde_json::json!(tool_match));
    statistics.insert(
        "rating_similar".to_string(),
        serde_json::json!(rating_similar),
    );
    statistics.insert("iou_similar".to_string(), serde_json::json!(iou_similar));
    statistics.insert(
        "entropy_similar".to_string(),
        serde_json::json!(entropy_similar),
    );

    FilterOutcome {
        sample_id: pair.sample_id.clone(),
        stage: CurationStage::Vrf,
        verdict: if similar {
            Verdict::Discard
        } else {
            Verdict::Retain
        },
        statistics,
    }
}

/// A retained sample that could not be measured: unparseable sides retain
/// by policy (the filter must never destroy data it cannot judge), with a
/// warning recorded in the statistics.
pub fn vrf_retain_unparseable(sample_id: &str, warning: &str) -> FilterOutcome {
    let mut statistics = BTreeMap::new();
    statistics.insert("warning".to_string(), serde_json::json!(warning));
    FilterOutcome {
        sample_id: sample_id.to_string(),
        stage: CurationStage::Vrf,
        verdict: Verdict::Retain,
        statistics,
    }
}

/// Serialized request handed to an external rater.
///
/// Field order is fixed by this struct, so serialization is deterministic
/// and repeated runs produce byte-identical requests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterRequest {
    pub rationale: String,
    pub image_ref: String,
    pub hints: HintVector,
    pub instructions_id: String,
}

/// Builds the rater request for the hint-assisted consistency filter.
pub fn hacf_request(
    sample: &PairedGeneration,
    hints: &HintVector,
    instructions_id: &str,
) -> RaterRequest {
    RaterRequest {
        rationale: sample.rationale.clone(),
        image_ref: sample.image_ref.clone(),
        hints: *hints,
        instructions_id: instructions_id.to_string(),
    }
}

/// Interprets a rater's verdict text: `pass` retains, `fail` discards
/// (after trimming and case-folding); anything else is a protocol error the
/// caller should retry, never a silent default.
pub fn hacf_apply(sample_id: &str, verdict_text: &str) -> Result<FilterOutcome, CurationError> {
    let normalized = verdict_text.trim().to_lowercase();
    let verdict = match normalized.as_str() {
        "pass" => Verdict::Retain,
        "fail" => Verdict::Discard,
        _ => {
            return Err(CurationError::RaterProtocolError {
                answer: verdict_text.to_string(),
            })
        }
    };
    let mut statistics = BTreeMap::new();
    statistics.insert("rater_verdict".to_string(), serde_json::json!(normalized));
    Ok(FilterOutcome {
        sample_id: sample_id.to_string(),
        stage: CurationStage::Hacf,
        verdict,
        statistics,
    })
}

/// Transport abstraction over the external rater. Implementations may talk
/// to a live service; tests and the CLI replay recorded verdicts.
pub trait Rater {
    fn rate(&self, request: &RaterRequest) -> Result<String, CurationError>;
}

/// A rater that replays recorded verdicts keyed by `image_ref`.
#[derive(Debug, Clone, Default)]
pub struct FixtureRater {
    verdicts: BTreeMap<String, String>,
}

impl FixtureRater {
    pub fn new(verdicts: BTreeMap<String, String>) -> Self {
        FixtureRater { verdicts }
    }
}

impl Rater for FixtureRater {
    fn rate(&self, request: &RaterRequest) -> Result<String, CurationError> {
        self.verdicts
            .get(&request.image_ref)
            .cloned()
            .ok_or_else(|| CurationError::RaterTransport(format!(
                "no recorded verdict for {:?}",
                request.image_ref
            )))
    }
}

/// Aggregate counters across a curation run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CurationSummary {
    pub total: usize,
    pub vrf_discarded: usize,
    pub hacf_discarded: usize,
    pub retained: usize,
    /// Samples whose rater answer violated the protocol; they are queued
    /// for retry and excluded from `retained`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub retry: Vec<String>,
}

impl CurationSummary {
    pub fn record(&mut self, outcome: &FilterOutcome) {
        self.total += 1;
        match (outcome.stage, outcome.verdict) {
            (CurationStage::Vrf, Verdict::Discard) => self.vrf_discarded += 1,
            (CurationStage::Hacf, Verdict::Discard) => self.hacf_discarded += 1,
            (_, Verdict::Retain) => self.retained += 1,
        }
    }

    pub fn record_retry(&mut self, sample_id: &str) {
        self.total += 1;
        self.retry.push(sample_id.to_string());
    }
}

// ---------------------------------------------------------------------------
// Wire schema for curation record files (JSONL).
// ---------------------------------------------------------------------------

/// One side of a paired generation as it appears on disk. `answer` stays a
/// raw JSON value so that malformed generations survive deserialization and
/// can be retained-with-warning instead of aborting the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSide {
    pub answer: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dists: Option<Vec<BTreeMap<String, f64>>>,
}

/// A paired-generation record as it appears on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPairRecord {
    pub sample_id: String,
    pub image_path: String,
    pub with_image: RawSide,
    pub without_image: RawSide,
    #[serde(default)]
    pub rationale: String,
}

enum SideOutcome {
    Parsed(GenerationSide),
    Unparseable(String),
}

fn parse_side(label: &str, side: &RawSide) -> SideOutcome {
    let answer = match AnswerBlock::from_json_value(&side.answer, None) {
        Ok(a) => a,
        Err(e) => return SideOutcome::Unparseable(format!("{label} answer: {e}")),
    };
    let entropy = match side.entropy {
        Some(e) if e.is_finite() && e >= 0.0 => e,
        Some(e) => return SideOutcome::Unparseable(format!("{label} entropy {e} invalid")),
        None => {
            let Some(raw_dists) = &side.dists else {
                return SideOutcome::Unparseable(format!(
                    "{label} carries neither entropy nor dists"
                ));
            };
            let mut dists = Vec::with_capacity(raw_dists.len());
            for (i, d) in raw_dists.iter().enumerate() {
                match TokenDist::new(d.clone()) {
                    Ok(d) => dists.push(d),
                    Err(e) => {
                        return SideOutcome::Unparseable(format!("{label} dists[{i}]: {e}"))
                    }
                }
            }
            match answer_entropy(&dists) {
                Ok(e) => e,
                Err(e) => return SideOutcome::Unparseable(format!("{label}: {e}")),
            }
        }
    };
    SideOutcome::Parsed(GenerationSide { answer, entropy })
}

/// Applies the VRF to one on-disk record, retaining unparseable sides with
/// a warning per filter policy.
pub fn vrf_filter_record(record: &RawPairRecord, thresholds: &VrfThresholds) -> FilterOutcome {
    let with_image = parse_side("with_image", &record.with_image);
    let without_image = parse_side("without_image", &record.without_image);
    match (with_image, without_image) {
        (SideOutcome::Parsed(w), SideOutcome::Parsed(wo)) => {
            let pair = PairedGeneration {
                sample_id: record.sample_id.clone(),
                image_ref: record.image_path.clone(),
                with_image: w,
                without_image: wo,
                rationale: record.rationale.clone(),
            };
            vrf_filter(&pair, thresholds)
        }
        (SideOutcome::Unparseable(w), _) => vrf_retain_unparseable(&record.sample_id, &w),
        (_, SideOutcome::Unparseable(wo)) => vrf_retain_unparseable(&record.sample_id, &wo),
    }
}
