//! Hierarchical imputation keyed on each feature's missing fraction.
//!
//! | missing fraction | strategy |
//! |---|---|
//! | 0 | left as is |
//! | (0, 0.30) | k-nearest-neighbour mean (k = 5) |
//! | [0.30, 0.95] | sample-and-hold within the patient; dataset mean before the first observation |
//! | > 0.95 | feature removed (held at the constant 0 so the state keeps 44 slots) |
//!
//! Neighbour distance is Euclidean over the fully observed features after
//! z-scoring them with their dataset mean and standard deviation. Donors are
//! windows with every KNN-band feature observed; at most `max_donors` of them
//! are used, taken at evenly spaced positions in dataset order.

use serde::{Deserialize, Serialize};

use super::episode::Episode;
use super::features::{FEATURES, N_FEATURES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputeConfig {
    pub knn_max_missing: f64,
    pub hold_max_missing: f64,
    pub k: usize,
    pub max_donors: usize,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        Self {
            knn_max_missing: 0.30,
            hold_max_missing: 0.95,
            k: 5,
            max_donors: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputeStrategy {
    Complete,
    Knn,
    SampleAndHold,
    Removed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImputation {
    pub index: usize,
    pub name: String,
    pub missing_fraction: f64,
    pub strategy: ImputeStrategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationReport {
    pub features: Vec<FeatureImputation>,
}

impl ImputationReport {
    pub fn strategy(&self, i: usize) -> ImputeStrategy {
        self.features[i].strategy
    }

    pub fn removed(&self) -> Vec<usize> {
        self.features
            .iter()
            .filter(|f| f.strategy == ImputeStrategy::Removed)
            .map(|f| f.index)
            .collect()
    }
}

pub fn impute(episodes: &[Episode], cfg: &ImputeConfig) -> Result<(Vec<Episode>, ImputationReport)> {
    let n_rows: usize = episodes.iter().map(|e| e.len()).sum();
    if n_rows == 0 {
        return Err(Error::Empty("no windows to impute".into()));
    }
    let mut missing = [0usize; N_FEATURES];
    let mut sums = [0.0f64; N_FEATURES];
    for step in episodes.iter().flat_map(|e| &e.steps) {
        for i in 0..N_FEATURES {
            if step.state.is_missing(i) || !step.state.values()[i].is_finite() {
                missing[i] += 1;
            } else {
                sums[i] += step.state.values()[i];
            }
        }
    }
    let fractions: Vec<f64> = missing.iter().map(|&m| m as f64 / n_rows as f64).collect();
    let means: Vec<f64> = (0..N_FEATURES)
        .map(|i| {
            let observed = n_rows - missing[i];
            if observed > 0 {
                sums[i] / observed as f64
            } else {
                0.0
            }
        })
        .collect();

    let strategies: Vec<ImputeStrategy> = fractions
        .iter()
        .map(|&f| {
            if f == 0.0 {
                ImputeStrategy::Complete
            } else if f < cfg.knn_max_missing {
                ImputeStrategy::Knn
            } else if f <= cfg.hold_max_missing {
                ImputeStrategy::SampleAndHold
            } else {
                ImputeStrategy::Removed
            }
        })
        .collect();
    if strategies.iter().all(|&s| s == ImputeStrategy::Removed) {
        return Err(Error::UnusableDataset);
    }

    let mut out: Vec<Episode> = episodes.to_vec();

    let knn_features: Vec<usize> = (0..N_FEATURES)
        .filter(|&i| strategies[i] == ImputeStrategy::Knn)
        .collect();
    if !knn_features.is_empty() {
        knn_fill(&mut out, &strategies, &knn_features, &means, cfg)?;
    }

    for i in 0..N_FEATURES {
        match strategies[i] {
            ImputeStrategy::SampleAndHold => {
                for ep in &mut out {
                    let mut last: Option<f64> = None;
                    for step in &mut ep.steps {
                        if step.state.is_missing(i) || !step.state.values()[i].is_finite() {
                            step.state.fill(i, last.unwrap_or(means[i]));
                        } else {
                            last = Some(step.state.values()[i]);
                        }
                    }
                }
            }
            ImputeStrategy::Removed => {
                for step in out.iter_mut().flat_map(|e| e.steps.iter_mut()) {
                    step.state.fill(i, 0.0);
                }
            }
            _ => {}
        }
    }

    let report = ImputationReport {
        features: (0..N_FEATURES)
            .map(|i| FeatureImputation {
                index: i,
                name: FEATURES[i].name.to_string(),
                missing_fraction: fractions[i],
                strategy: strategies[i],
            })
            .collect(),
    };
    Ok((out, report))
}

fn knn_fill(
    episodes: &mut [Episode],
    strategies: &[ImputeStrategy],
    knn_features: &[usize],
    means: &[f64],
    cfg: &ImputeConfig,
) -> Result<()> {
    let complete: Vec<usize> = (0..N_FEATURES)
        .filter(|&i| strategies[i] == ImputeStrategy::Complete)
        .collect();

    // z-score parameters of the complete features
    let rows: Vec<&[f64]> = episodes
        .iter()
        .flat_map(|e| e.steps.iter().map(|s| s.state.values()))
        .collect();
    let n = rows.len() as f64;
    let mut scale = Vec::with_capacity(complete.len());
    for &c in &complete {
        let var = rows.iter().map(|r| (r[c] - means[c]).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        scale.push(if sd > 1e-12 { sd } else { 1.0 });
    }
    let key = |values: &[f64]| -> Vec<f64> {
        complete
            .iter()
            .zip(&scale)
            .map(|(&c, s)| (values[c] - means[c]) / s)
            .collect()
    };

    let is_obs = |values: &[f64], mask: &[bool], i: usize| !mask[i] && values[i].is_finite();
    let donor_rows: Vec<usize> = episodes
        .iter()
        .flat_map(|e| e.steps.iter())
        .enumerate()
        .filter(|(_, s)| {
            knn_features
                .iter()
                .all(|&i| is_obs(s.state.values(), s.state.mask(), i))
        })
        .map(|(r, _)| r)
        .collect();
    let donor_rows: Vec<usize> = if donor_rows.len() > cfg.max_donors {
        (0..cfg.max_donors)
            .map(|j| donor_rows[j * donor_rows.len() / cfg.max_donors])
            .collect()
    } else {
        donor_rows
    };
    let donors: Vec<(Vec<f64>, Vec<f64>)> = donor_rows
        .iter()
        .map(|&r| {
            let v = rows[r];
            (key(v), knn_features.iter().map(|&i| v[i]).collect())
        })
        .collect();
    drop(rows);

    let k = cfg.k.max(1).min(donors.len().max(1));
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(donors.len());
    for step in episodes.iter_mut().flat_map(|e| e.steps.iter_mut()) {
        let needs: Vec<usize> = knn_features
            .iter()
            .enumerate()
            .filter(|(_, &i)| !is_obs(step.state.values(), step.state.mask(), i))
            .map(|(j, _)| j)
            .collect();
        if needs.is_empty() {
            continue;
        }
        if complete.is_empty() || donors.is_empty() {
            for j in needs {
                let i = knn_features[j];
                step.state.fill(i, means[i]);
            }
            continue;
        }
        let q = key(step.state.values());
        dist.clear();
        dist.extend(donors.iter().enumerate().map(|(d, (dk, _))| {
            let s: f64 = dk.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
            (s, d)
        }));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < dist.len() {
            dist.select_nth_unstable_by(k - 1, cmp);
        }
        let nearest = &dist[..k];
        for j in needs {
            let i = knn_features[j];
            let v = nearest.iter().map(|&(_, d)| donors[d].1[j]).sum::<f64>() / k as f64;
            step.state.fill(i, v);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::action::ActionIndex;
    use crate::mdp::episode::{StateVector, Step};

    fn episode(id: u64, rows: Vec<Vec<f64>>) -> Episode {
        let n = rows.len();
        Episode {
            patient_id: id,
            steps: rows
                .into_iter()
                .enumerate()
                .map(|(t, v)| {
                    let mask = v.iter().map(|x| x.is_nan()).collect();
                    Step {
                        state: StateVector::with_mask(v, mask).unwrap(),
                        action: ActionIndex::new(0).unwrap(),
                        reward: if t + 1 == n { 1.0 } else { 0.0 },
                        done: t + 1 == n,
                    }
                })
                .collect(),
            survived_90d: true,
        }
    }

    fn base_row(seed: f64) -> Vec<f64> {
        (0..N_FEATURES).map(|i| seed + i as f64).collect()
    }

    #[test]
    fn complete_data_is_identity() {
        let eps: Vec<Episode> = (0..3)
            .map(|p| episode(p, (0..4).map(|t| base_row((p * 10 + t) as f64)).collect()))
            .collect();
        let (out, report) = impute(&eps, &ImputeConfig::default()).unwrap();
        assert_eq!(out, eps);
        assert!(report
            .features
            .iter()
            .all(|f| f.strategy == ImputeStrategy::Complete));
    }

    #[test]
    fn sample_and_hold_carries_previous_window() {
        // Feature 7 is missing in 6 of 10 windows (60%).
        let mut rows: Vec<Vec<f64>> = (0..10).map(|t| base_row(t as f64)).collect();
        for t in [2, 3, 5, 6, 8, 9] {
            rows[t][7] = f64::NAN;
        }
        let eps = vec![episode(1, rows.clone())];
        let (out, report) = impute(&eps, &ImputeConfig::default()).unwrap();
        assert_eq!(report.strategy(7), ImputeStrategy::SampleAndHold);
        let v = |t: usize| out[0].steps[t].state.values()[7];
        assert_eq!(v(3), rows[1][7]);
        assert_eq!(v(5), rows[4][7]);
        assert_eq!(v(6), rows[4][7]);
        assert_eq!(v(9), rows[7][7]);
        assert!(out[0].steps.iter().all(|s| s.state.is_complete()));
    }

    #[test]
    fn initial_gap_uses_dataset_mean() {
        // Feature 3: 40% missing; patient 2 never observes it early.
        let mut a: Vec<Vec<f64>> = (0..5).map(|t| base_row(t as f64)).collect();
        let mut b: Vec<Vec<f64>> = (0..5).map(|t| base_row(100.0 + t as f64)).collect();
        a[4][3] = f64::NAN;
        b[0][3] = f64::NAN;
        b[1][3] = f64::NAN;
        b[2][3] = f64::NAN;
        let observed: Vec<f64> = a[..4].iter().chain(&b[3..]).map(|r| r[3]).collect();
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        let eps = vec![episode(1, a.clone()), episode(2, b.clone())];
        let (out, report) = impute(&eps, &ImputeConfig::default()).unwrap();
        assert_eq!(report.strategy(3), ImputeStrategy::SampleAndHold);
        assert!((report.features[3].missing_fraction - 0.4).abs() < 1e-12);
        assert_eq!(out[1].steps[0].state.values()[3], mean);
        assert_eq!(out[1].steps[2].state.values()[3], mean);
        assert_eq!(out[0].steps[4].state.values()[3], a[3][3]);
    }

    #[test]
    fn knn_uses_nearest_complete_neighbours() {
        // Two clusters of windows; feature 5 missing in one window of the
        // high cluster must be filled from high-cluster donors.
        let mut rows = Vec::new();
        for t in 0..12 {
            let mut r = base_row(0.0);
            let high = t >= 6;
            for (i, x) in r.iter_mut().enumerate() {
                if i != 5 {
                    *x = if high { 50.0 } else { 0.0 } + (t as f64) * 0.01 + i as f64 * 0.001;
                }
            }
            r[5] = if high { 1000.0 } else { -1000.0 };
            rows.push(r);
        }
        rows[11][5] = f64::NAN;
        let eps = vec![episode(9, rows)];
        let (out, report) = impute(&eps, &ImputeConfig::default()).unwrap();
        assert_eq!(report.strategy(5), ImputeStrategy::Knn);
        assert_eq!(out[0].steps[11].state.values()[5], 1000.0);
    }

    #[test]
    fn nearly_empty_feature_removed() {
        let mut rows: Vec<Vec<f64>> = (0..40).map(|t| base_row(t as f64)).collect();
        for r in rows.iter_mut().skip(1) {
            r[20] = f64::NAN;
        }
        let eps = vec![episode(1, rows)];
        let (out, report) = impute(&eps, &ImputeConfig::default()).unwrap();
        assert_eq!(report.strategy(20), ImputeStrategy::Removed);
        assert_eq!(report.removed(), vec![20]);
        assert!(out[0].steps.iter().all(|s| s.state.values()[20] == 0.0 && s.state.is_complete()));
    }

    #[test]
    fn all_features_missing_is_unusable() {
        let rows: Vec<Vec<f64>> = (0..3).map(|_| vec![f64::NAN; N_FEATURES]).collect();
        let eps = vec![episode(1, rows)];
        assert!(matches!(
            impute(&eps, &ImputeConfig::default()),
            Err(Error::UnusableDataset)
        ));
    }
}
