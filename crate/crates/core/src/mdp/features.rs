//! Feature layout of the 44-dimensional patient state and the severity
//! score used by the intermediate reward.
//!
//! The severity score is a weighted deviation proxy:
//!
//! ```text
//! AP(s) = Σ_i w_i · |clip(x_i) − ref_i| / scale_i
//! clip(x_i) = clamp(x_i, ref_i − BOUND·scale_i, ref_i + BOUND·scale_i)
//! ```
//!
//! over the ten features listed in [`SEVERITY_TABLE`], with `BOUND = 4`
//! deviation units. Hence `AP_MIN = 0` and `AP_MAX = BOUND · Σ w_i = 96`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_FEATURES: usize = 44;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeatureSpec {
    pub name: &'static str,
    /// Nominal healthy value.
    pub reference: f64,
    /// One deviation unit.
    pub scale: f64,
}

const fn f(name: &'static str, reference: f64, scale: f64) -> FeatureSpec {
    FeatureSpec { name, reference, scale }
}

pub const FEATURES: [FeatureSpec; N_FEATURES] = [
    // demographics
    f("age", 62.0, 15.0),
    f("gender", 0.5, 0.5),
    f("weight", 80.0, 15.0),
    f("icu_readmission", 0.1, 0.3),
    f("elixhauser", 4.0, 3.0),
    // fluids
    f("urine_output", 120.0, 60.0),
    f("iv_fluids", 300.0, 200.0),
    f("cumulative_balance", 1000.0, 1500.0),
    f("vasopressors", 0.05, 0.1),
    // vitals
    f("heart_rate", 85.0, 12.0),
    f("sys_bp", 120.0, 18.0),
    f("dias_bp", 65.0, 10.0),
    f("mean_bp", 80.0, 8.0),
    f("shock_index", 0.7, 0.2),
    f("resp_rate", 18.0, 4.0),
    f("temperature", 37.0, 0.6),
    f("spo2", 97.0, 1.5),
    f("gcs", 14.0, 1.5),
    f("sofa", 4.0, 3.0),
    f("sirs", 1.5, 1.0),
    // labs
    f("potassium", 4.1, 0.5),
    f("sodium", 140.0, 4.0),
    f("chloride", 104.0, 4.0),
    f("glucose", 130.0, 40.0),
    f("bun", 20.0, 12.0),
    f("creatinine", 1.0, 0.4),
    f("magnesium", 2.0, 0.3),
    f("calcium", 8.6, 0.6),
    f("ionized_calcium", 1.15, 0.08),
    f("carbon_dioxide", 24.0, 4.0),
    f("bilirubin", 0.8, 0.8),
    f("hemoglobin", 11.0, 2.0),
    f("wbc", 10.0, 4.0),
    f("platelet", 220.0, 80.0),
    f("ptt", 32.0, 8.0),
    f("pt", 14.0, 3.0),
    f("inr", 1.2, 0.3),
    f("ph", 7.40, 0.04),
    f("pao2", 100.0, 20.0),
    f("paco2", 40.0, 6.0),
    f("base_excess", 0.0, 3.0),
    f("bicarbonate", 24.0, 3.0),
    f("lactate", 1.5, 0.8),
    // hours since ventilation onset
    f("vent_hours", 0.0, 1.0),
];

pub const VENT_HOURS: usize = 43;

pub fn feature_index(name: &str) -> Option<usize> {
    FEATURES.iter().position(|f| f.name == name)
}

/// One scored component of the severity proxy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeverityComponent {
    pub feature: usize,
    pub weight: f64,
    /// +1 when physiological deterioration raises the value, −1 when it lowers it.
    pub direction: f64,
}

pub const SEVERITY_BOUND: f64 = 4.0;

const fn sc(feature: usize, weight: f64, direction: f64) -> SeverityComponent {
    SeverityComponent { feature, weight, direction }
}

pub const SEVERITY_TABLE: [SeverityComponent; 10] = [
    sc(9, 2.0, 1.0),   // heart_rate
    sc(12, 3.0, -1.0), // mean_bp
    sc(14, 2.0, 1.0),  // resp_rate
    sc(15, 1.0, 1.0),  // temperature
    sc(16, 3.0, -1.0), // spo2
    sc(17, 2.0, -1.0), // gcs
    sc(25, 2.0, 1.0),  // creatinine
    sc(37, 3.0, -1.0), // ph
    sc(38, 3.0, -1.0), // pao2
    sc(42, 3.0, 1.0),  // lactate
];

pub const AP_MIN: f64 = 0.0;
pub const AP_MAX: f64 = 96.0;

pub fn is_severity_feature(i: usize) -> bool {
    SEVERITY_TABLE.iter().any(|c| c.feature == i)
}

pub fn severity_score(values: &[f64]) -> Result<f64> {
    if values.len() != N_FEATURES {
        return Err(Error::Shape(format!(
            "state has {} features, expected {N_FEATURES}",
            values.len()
        )));
    }
    let mut total = 0.0;
    for c in &SEVERITY_TABLE {
        let x = values[c.feature];
        if !x.is_finite() {
            return Err(Error::Numeric(format!(
                "severity feature {} is not finite",
                FEATURES[c.feature].name
            )));
        }
        let spec = FEATURES[c.feature];
        let dev = ((x - spec.reference) / spec.scale).abs().min(SEVERITY_BOUND);
        total += c.weight * dev;
    }
    Ok(total)
}
