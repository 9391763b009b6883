//! Model-agnostic training-loop mathematics for image-quality-assessment (IQA)
//! policies that answer with a structured think/answer protocol.
//!
//! The crate deliberately contains no model, no tokenizer, and no image codec.
//! It operates on plain numbers and serialized records produced by a host
//! training stack, and provides:
//!
//! * [`response`] — parsing and validation of the two-block
//!   `<think>…</think><answer>{…}</answer>` response format, the binary
//!   format reward, and the two-turn crop protocol state machine.
//! * [`reward`] — the scalar reward family: Gaussian score reward, pairwise
//!   rank reward built from a Thurstone comparison model and Bhattacharyya
//!   agreement, reward totals, and a token-level cross-entropy loss.
//! * [`policy`] — group-relative advantage normalization, the clipped
//!   multi-turn surrogate, and a covariance-targeted KL regularizer that
//!   pins the most advantage-correlated numeric answer tokens to the
//!   behavior policy ("KL coverage").
//! * [`rollout`] — the JSONL wire schema for rollout records plus the glue
//!   that scores whole files and produces per-step objective reports.
//! * [`curation`] — dataset filters: a visual-reliance filter comparing
//!   paired generations with and without the image, and a hint-assisted
//!   consistency filter that serializes rater requests and applies verdicts.
//! * [`hints`] — low-level image statistics (brightness, contrast,
//!   colorfulness, sharpness) computed from decoded RGB buffers.
//! * [`resample`] — score-binned progressive re-sampling that anneals an
//!   empirical long-tailed score distribution toward a flat one over a
//!   fixed number of stages.
//! * [`metrics`] — evaluation diagnostics: Pearson and Spearman rank
//!   correlation and the unique-score ratio used to detect score-diversity
//!   collapse.
//! * [`sim`] — a tiny categorical toy policy with exact analytic gradients
//!   that reproduces score-diversity collapse and its prevention by the KL
//!   coverage term, entirely on synthetic data.
//!
//! All public entry points are pure functions or operate on caller-owned
//! state; nothing in the crate spawns threads or touches global mutable
//! state, so every result is reproducible from (inputs, config, seed).

pub mod config;
pub mod curation;
pub mod hints;
pub mod metrics;
pub mod policy;
pub mod resample;
pub mod response;
pub mod reward;
pub mod rollout;
pub mod sim;

pub use config::EngineConfig;
pub use curation::{FilterOutcome, PairedGeneration, Verdict, VrfThresholds};
pub use metrics::{plcc, srcc, unique_score_ratio};
pub use policy::{KlcConfig, RolloutGroup, StepObjective, TrajectoryRecord};
pub use response::{format_reward, parse_response, AnswerBlock, StructuredResponse};
pub use reward::{rank_reward, score_reward, total_reward, RewardBreakdown, RewardCoefficients};
