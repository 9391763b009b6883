//! Low-level image statistics ("hints") computed from decoded RGB buffers.
//!
//! These four numbers summarize an image for a rater that cannot see it:
//!
//! * **brightness** — mean luma, scaled into `[0, 1]`;
//! * **contrast** — population standard deviation of luma, scaled into
//!   `[0, 1]`;
//! * **colorfulness** — the Hasler–Süsstrunk opponent-channel metric,
//!   scaled by 255;
//! * **sharpness** — variance of the 3×3 Laplacian response of luma over
//!   the interior pixels, unnormalized (luma kept in the 0–255 domain).
//!
//! The crate never decodes images; callers hand in an 8-bit RGB buffer
//! (row-major, interleaved) that their own stack produced.

use serde::{Deserialize, Serialize};

/// Errors for hint computation.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HintsError {
    #[error("image {width}x{height} is too small; need at least 3x3")]
    ImageTooSmall { width: usize, height: usize },
    #[error("buffer holds {got} bytes but {width}x{height} RGB needs {want}")]
    BadBufferLength {
        got: usize,
        want: usize,
        width: usize,
        height: usize,
    },
}

/// Hint statistics attached to rater requests.
///
/// The four computed statistics are always present; the remaining fields
/// are dataset metadata that is passed through when available and omitted
/// from serialization otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HintVector {
    pub brightness: f64,
    pub contrast: f64,
    pub colorfulness: f64,
    pub sharpness: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mos: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qmos: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifacts: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blurriness: Option<f64>,
}

/// Rec. 601 luma from 8-bit RGB, kept in the 0–255 domain.
#[inline]
fn luma(r: u8, g: u8, b: u8) -> f64 {
    0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
}

/// Computes the four hint statistics from an interleaved 8-bit RGB buffer.
///
/// `rgb.len()` must equal `width * height * 3`, and the image must be at
/// least 3×3 so the Laplacian has an interior to act on.
pub fn compute_hints(rgb: &[u8], width: usize, height: usize) -> Result<HintVector, HintsError> {
    if width < 3 || height < 3 {
        return Err(HintsError::ImageTooSmall { width, height });
    }
    let want = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .unwrap_or(usize::MAX);
    if rgb.len() != want {
        return Err(HintsError::BadBufferLength {
            got: rgb.len(),
            want,
            width,
            height,
        });
    }

    // Two-pass statistics (mean first, squared deviations second): the
    // straightforward formulation stays accurate on large images where the
    // one-pass E[x^2] - E[x]^2 form would cancel.
    fn population_stats(values: &[f64]) -> (f64, f64) {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var)
    }

    let mut lumas = Vec::with_capacity(width * height);
    let mut rgs = Vec::with_capacity(width * height);
    let mut ybs = Vec::with_capacity(width * height);
    for px in rgb.chunks_exact(3) {
        let (r, g, b) = (px[0], px[1], px[2]);
        lumas.push(luma(r, g, b));
        // Opponent channels of the Hasler–Süsstrunk colorfulness metric.
        rgs.push(r as f64 - g as f64);
        ybs.push((r as f64 + g as f64) / 2.0 - b as f64);
    }
    let (mean_l, var_l) = population_stats(&lumas);
    let (mean_rg, var_rg) = population_stats(&rgs);
    let (mean_yb, var_yb) = population_stats(&ybs);
    let colorfulness = ((var_rg + var_yb).sqrt()
        + 0.3 * (mean_rg * mean_rg + mean_yb * mean_yb).sqrt())
        / 255.0;

    // Variance of the 3x3 Laplacian response over the interior.
    let at = |x: usize, y: usize| lumas[y * width + x];
    let mut responses = Vec::with_capacity((width - 2) * (height - 2));
    for y in 1..height - 1 {
        for x in 1..width - 1 {
            responses
                .push(at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1) - 4.0 * at(x, y));
        }
    }
    let (_, sharpness) = population_stats(&responses);

    Ok(HintVector {
        brightness: mean_l / 255.0,
        contrast: var_l.sqrt() / 255.0,
        colorfulness,
        sharpness,
        mos: None,
        qmos: None,
        artifacts: None,
        blurriness: None,
    })
}
