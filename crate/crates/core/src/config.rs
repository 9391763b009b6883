//! Engine configuration: a small, flat `key = value` text format.
//!
//! The format is intentionally primitive so that training harnesses in any
//! language can emit it: one `key = value` pair per line, `#` starts a
//! comment, blank lines are ignored, keys are dotted paths. Serialization
//! is canonical (fixed key order, shortest round-trip float formatting), so
//! write → parse → write is byte-stable and parse → write → parse is exact.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::curation::VrfThresholds;
use crate::policy::KlcConfig;
use crate::resample::ResampleParams;
use crate::reward::RewardCoefficients;

/// Errors produced while reading a configuration file.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: invalid value {value:?} for {key}: {reason}")]
    InvalidValue {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("{key}: {reason}")]
    OutOfRange { key: String, reason: String },
}

/// Complete tunable surface of the engine.
///
/// Every knob used by the reward functions, the policy-optimization step,
/// the curation filters, and the re-sampler lives here; library functions
/// take the relevant sub-struct so callers can also drive them directly.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    /// Reward mixing coefficients and score-reward bandwidth.
    pub coeffs: RewardCoefficients,
    /// Variance floor applied to per-group rating variances in the rank
    /// reward's pairwise comparison model.
    pub v_floor: f64,
    /// Clipping half-width for the importance-ratio surrogate.
    pub eps_clip: f64,
    /// KL-coverage regularizer knobs.
    pub klc: KlcConfig,
    /// Rollouts sampled per query when forming a group.
    pub group_size: usize,
    /// Similarity thresholds for the visual-reliance filter.
    pub vrf: VrfThresholds,
    /// Score-binned progressive re-sampling parameters.
    pub resample: ResampleParams,
    /// Optional path to a ground-truth MOS table used by diagnostics.
    pub koniq_mos_path: Option<PathBuf>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            coeffs: RewardCoefficients::default(),
            v_floor: 1e-4,
            eps_clip: 0.2,
            klc: KlcConfig::default(),
            group_size: 8,
            vrf: VrfThresholds::default(),
            resample: ResampleParams::default(),
            koniq_mos_path: None,
        }
    }
}

/// Canonical key order used by [`EngineConfig::to_config_string`].
const KEYS: &[&str] = &[
    "alpha",
    "beta",
    "sigma",
    "v_floor",
    "eps_clip",
    "klc.p",
    "klc.beta_kl",
    "klc.min_masked",
    "group_size",
    "vrf.rating_diff",
    "vrf.iou_min",
    "vrf.entropy_diff",
    "resample.K",
    "resample.S",
    "resample.gamma",
    "koniq_mos_path",
];

impl EngineConfig {
    /// Parses the flat `key = value` format. Unknown or duplicated keys are
    /// rejected; keys absent from the file keep their default values.
    pub fn from_config_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = EngineConfig::default();
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            if stripped.trim().is_empty() {
                continue;
            }
            let (key, value) = stripped.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line,
                text: raw.trim().to_string(),
            })?;
            let key = key.trim();
            let value = value.trim();
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey {
                    line,
                    key: key.to_string(),
                });
            }
            cfg.set_key(line, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a configuration file from disk.
    pub fn from_config_file(path: &std::path::Path) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        EngineConfig::from_config_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
    }

    /// Serializes in canonical key order with shortest round-trip floats.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "alpha = {}", self.coeffs.alpha);
        let _ = writeln!(out, "beta = {}", self.coeffs.beta);
        let _ = writeln!(out, "sigma = {}", self.coeffs.sigma);
        let _ = writeln!(out, "v_floor = {}", self.v_floor);
        let _ = writeln!(out, "eps_clip = {}", self.eps_clip);
        let _ = writeln!(out, "klc.p = {}", self.klc.p);
        let _ = writeln!(out, "klc.beta_kl = {}", self.klc.beta_kl);
        let _ = writeln!(out, "klc.min_masked = {}", self.klc.min_masked);
        let _ = writeln!(out, "group_size = {}", self.group_size);
        let _ = writeln!(out, "vrf.rating_diff = {}", self.vrf.rating_diff);
        let _ = writeln!(out, "vrf.iou_min = {}", self.vrf.iou_min);
        let _ = writeln!(out, "vrf.entropy_diff = {}", self.vrf.entropy_diff);
        let _ = writeln!(out, "resample.K = {}", self.resample.bins);
        let _ = writeln!(out, "resample.S = {}", self.resample.stages);
        let _ = writeln!(out, "resample.gamma = {}", self.resample.gamma);
        if let Some(path) = &self.koniq_mos_path {
            let _ = writeln!(out, "koniq_mos_path = {}", path.display());
        }
        out
    }

    fn set_key(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse::<T>().map_err(|e| ConfigError::InvalidValue {
                line,
                key: key.to_string(),
                value: value.to_string(),
                reason: e.to_string(),
            })
        }
        match key {
            "alpha" => self.coeffs.alpha = num(line, key, value)?,
            "beta" => self.coeffs.beta = num(line, key, value)?,
            "sigma" => self.coeffs.sigma = num(line, key, value)?,
            "v_floor" => self.v_floor = num(line, key, value)?,
            "eps_clip" => self.eps_clip = num(line, key, value)?,
            "klc.p" => self.klc.p = num(line, key, value)?,
            "klc.beta_kl" => self.klc.beta_kl = num(line, key, value)?,
            "klc.min_masked" => self.klc.min_masked = num(line, key, value)?,
            "group_size" => self.group_size = num(line, key, value)?,
            "vrf.rating_diff" => self.vrf.rating_diff = num(line, key, value)?,
            "vrf.iou_min" => self.vrf.iou_min = num(line, key, value)?,
            "vrf.entropy_diff" => self.vrf.entropy_diff = num(line, key, value)?,
            "resample.K" => self.resample.bins = num(line, key, value)?,
            "resample.S" => self.resample.stages = num(line, key, value)?,
            "resample.gamma" => self.resample.gamma = num(line, key, value)?,
            "koniq_mos_path" => self.koniq_mos_path = Some(PathBuf::from(value)),
            _ => unreachable!("key membership checked by caller"),
        }
        Ok(())
    }

    /// Rejects configurations the math cannot accept.
    pub fn validate(&self) -> Result<(), ConfigError> {
        fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(ConfigError::OutOfRange {
                    key: key.to_string(),
                    reason: format!("must be finite and > 0, got {v}"),
                })
            }
        }
        fn unit_interval(key: &str, v: f64) -> Result<(), ConfigError> {
            if v.is_finite() && (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(ConfigError::OutOfRange {
                    key: key.to_string(),
                    reason: format!("must lie in [0, 1], got {v}"),
                })
            }
        }
        fn nonneg(key: &str, v: f64) -> Result<(), ConfigError> {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(ConfigError::OutOfRange {
                    key: key.to_string(),
                    reason: format!("must be finite and >= 0, got {v}"),
                })
            }
        }
        nonneg("alpha", self.coeffs.alpha)?;
        nonneg("beta", self.coeffs.beta)?;
        positive("sigma", self.coeffs.sigma)?;
        positive("v_floor", self.v_floor)?;
        positive("eps_clip", self.eps_clip)?;
        if self.eps_clip >= 1.0 {
            return Err(ConfigError::OutOfRange {
                key: "eps_clip".to_string(),
                reason: format!("must be < 1, got {}", self.eps_clip),
            });
        }
        unit_interval("klc.p", self.klc.p)?;
        nonneg("klc.beta_kl", self.klc.beta_kl)?;
        if self.group_size == 0 {
            return Err(ConfigError::OutOfRange {
                key: "group_size".to_string(),
                reason: "must be >= 1".to_string(),
            });
        }
        nonneg("vrf.rating_diff", self.vrf.rating_diff)?;
        unit_interval("vrf.iou_min", self.vrf.iou_min)?;
        nonneg("vrf.entropy_diff", self.vrf.entropy_diff)?;
        if self.resample.bins == 0 {
            return Err(ConfigError::OutOfRange {
                key: "resample.K".to_string(),
                reason: "must be >= 1".to_string(),
            });
        }
        nonneg("resample.gamma", self.resample.gamma)?;
        Ok(())
    }
}
