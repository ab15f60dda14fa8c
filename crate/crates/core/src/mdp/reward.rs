use super::features::{severity_score, AP_MAX, AP_MIN};
use crate::error::{Error, Result};

pub const DEFAULT_INTERMEDIATE_REWARD_WEIGHT: f64 = 0.5;

/// `λ · (AP(s_t) − AP(s_{t+1})) / (AP_max − AP_min)`.
pub fn intermediate_reward(s_t: &[f64], s_next: &[f64], weight: f64) -> Result<f64> {
    intermediate_reward_with_range(s_t, s_next, weight, AP_MIN, AP_MAX)
}

pub fn intermediate_reward_with_range(
    s_t: &[f64],
    s_next: &[f64],
    weight: f64,
    ap_min: f64,
    ap_max: f64,
) -> Result<f64> {
    if !(weight > 0.0) || !weight.is_finite() {
        return Err(Error::Config(format!("intermediate reward weight must be positive, got {weight}")));
    }
    let range = ap_max - ap_min;
    if !(range > 0.0) {
        return Err(Error::Config(format!(
            "severity range [{ap_min}, {ap_max}] is degenerate"
        )));
    }
    let before = severity_score(s_t)?;
    let after = severity_score(s_next)?;
    Ok(weight * (before - after) / range)
}

pub fn terminal_reward(survived_90d: bool) -> f64 {
    if survived_90d {
        1.0
    } else {
        -1.0
    }
}
