//! Data sanity check from the slope of the cleaned score curve.

use serde::{Deserialize, Serialize};

use crate::error::{BpregError, Result};
use crate::postprocess::{fit_score_slope, CleanedScoreCurve, ModelCharacteristics};

pub const DEFAULT_THETA: f64 = 0.28;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SanityReport {
    pub reverse_z_ordering: bool,
    pub valid_z_spacing: bool,
    /// Fitted slope m_X per mm.
    pub observed_slope: f64,
    pub expected_slope: f64,
    /// r_m = m_X / m̄ₛ
    pub slope_ratio: f64,
    /// |1 - |r_m||
    pub relative_error: f64,
    /// Per-slice slope over the expected slope per mm.
    pub expected_z_spacing: f64,
    pub theta: f64,
}

pub fn data_sanity_check(curve: &CleanedScoreCurve, chars: &ModelCharacteristics, theta: f64) -> Result<SanityReport> {
    let expected = chars.slope_mean;
    if expected == 0.0 || !expected.is_finite() {
        return Err(BpregError::Config(format!("expected slope {expected} is unusable")));
    }
    if !(theta > 0.0) {
        return Err(BpregError::Config(format!("theta {theta} must be positive")));
    }
    let fit = fit_score_slope(curve)?;
    let ratio = fit.per_mm / expected;
    let rel = (1.0 - ratio.abs()).abs();
    Ok(SanityReport {
        reverse_z_ordering: fit.per_mm < 0.0,
        valid_z_spacing: rel < theta,
        observed_slope: fit.per_mm,
        expected_slope: expected,
        slope_ratio: ratio,
        relative_error: rel,
        expected_z_spacing: fit.per_index / expected,
        theta,
    })
}
