use serde::{Deserialize, Serialize};

use super::episode::Episode;
use super::features::N_FEATURES;
use crate::error::{Error, Result};

pub const DEFAULT_OOD_PERCENTILE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodSelection {
    pub percentile: f64,
    /// Patient ids, ascending.
    pub in_dist: Vec<u64>,
    pub ood: Vec<u64>,
    /// Per-feature `(lower, upper)` cut-offs.
    pub cutoffs: Vec<(f64, f64)>,
}

impl OodSelection {
    pub fn is_ood(&self, patient_id: u64) -> bool {
        self.ood.binary_search(&patient_id).is_ok()
    }

    pub fn ood_fraction(&self) -> f64 {
        let n = self.in_dist.len() + self.ood.len();
        if n == 0 {
            0.0
        } else {
            self.ood.len() as f64 / n as f64
        }
    }
}

/// Linear-interpolation quantile of sorted data (`(n−1)·q` position).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// An episode is out of distribution when any initial feature lies strictly
/// below the `p` quantile or strictly above the `1 − p` quantile of that
/// feature across all episodes' initial states.
pub fn select_ood(episodes: &[Episode], percentile: f64) -> Result<OodSelection> {
    if episodes.is_empty() {
        return Err(Error::Empty("no episodes for OOD selection".into()));
    }
    if !(0.0..0.5).contains(&percentile) {
        return Err(Error::Config(format!("OOD percentile {percentile} outside [0, 0.5)")));
    }
    let initial: Vec<&[f64]> = episodes
        .iter()
        .map(|e| {
            e.initial_state()
                .map(|s| s.values())
                .ok_or_else(|| Error::Empty(format!("patient {} has no windows", e.patient_id)))
        })
        .collect::<Result<_>>()?;
    if initial.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::Domain("initial states must be imputed before OOD selection".into()));
    }
    let mut cutoffs = Vec::with_capacity(N_FEATURES);
    let mut column = Vec::with_capacity(initial.len());
    for i in 0..N_FEATURES {
        column.clear();
        column.extend(initial.iter().map(|v| v[i]));
        column.sort_unstable_by(f64::total_cmp);
        cutoffs.push((
            quantile_sorted(&column, percentile),
            quantile_sorted(&column, 1.0 - percentile),
        ));
    }
    let mut in_dist = Vec::new();
    let mut ood = Vec::new();
    for (ep, v) in episodes.iter().zip(&initial) {
        let out = v
            .iter()
            .zip(&cutoffs)
            .any(|(&x, &(lo, hi))| x < lo || x > hi);
        if out {
            ood.push(ep.patient_id);
        } else {
            in_dist.push(ep.patient_id);
        }
    }
    in_dist.sort_unstable();
    ood.sort_unstable();
    Ok(OodSelection {
        percentile,
        in_dist,
        ood,
        cutoffs,
    })
}
