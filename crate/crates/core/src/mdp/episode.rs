use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::action::ActionIndex;
use super::features::N_FEATURES;
use crate::error::{Error, Result};

pub const HORIZON: usize = 18;

/// Observed patient state for one 4-hour window.
///
/// Missing entries hold `NaN` and are flagged in `mask`; after imputation
/// every value is finite and the mask is all `false`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl StateVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let mask = vec![false; values.len()];
        Self::with_mask(values, mask)
    }

    pub fn with_mask(values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != N_FEATURES || mask.len() != N_FEATURES {
            return Err(Error::Shape(format!(
                "state vector needs {N_FEATURES} values and mask entries, got {} and {}",
                values.len(),
                mask.len()
            )));
        }
        Ok(Self { values, mask })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_missing(&self, i: usize) -> bool {
        self.mask[i]
    }

    pub fn set_missing(&mut self, i: usize) {
        self.values[i] = f64::NAN;
        self.mask[i] = true;
    }

    pub fn fill(&mut self, i: usize, value: f64) {
        self.values[i] = value;
        self.mask[i] = false;
    }

    pub fn is_complete(&self) -> bool {
        !self.mask.iter().any(|&m| m) && self.values.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, treating identical NaN payloads as equal.
    pub fn bit_eq(&self, other: &StateVector) -> bool {
        self.mask == other.mask
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// One logged window: the state observed, the setting applied and the
/// reward received for the resulting transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: StateVector,
    pub action: ActionIndex,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub patient_id: u64,
    pub steps: Vec<Step>,
    pub survived_90d: bool,
}

/// Borrowed view of one `(s, a, r, s', done)` tuple.
///
/// The terminal transition has no successor window; its `next_state` is the
/// terminal window itself and is never bootstrapped from.
#[derive(Debug, Clone, Copy)]
pub struct Transition<'a> {
    pub state: &'a StateVector,
    pub action: ActionIndex,
    pub reward: f64,
    pub next_state: &'a StateVector,
    pub next_action: ActionIndex,
    pub done: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn initial_state(&self) -> Option<&StateVector> {
        self.steps.first().map(|s| &s.state)
    }

    pub fn transitions(&self) -> impl Iterator<Item = Transition<'_>> {
        let n = self.steps.len();
        (0..n).map(move |t| {
            let next = if t + 1 < n { t + 1 } else { t };
            Transition {
                state: &self.steps[t].state,
                action: self.steps[t].action,
                reward: self.steps[t].reward,
                next_state: &self.steps[next].state,
                next_action: self.steps[next].action,
                done: self.steps[t].done,
            }
        })
    }

    /// Checks window count, terminal placement and reward ranges.
    pub fn validate(&self, intermediate_weight: f64) -> Result<()> {
        let id = self.patient_id;
        if self.steps.is_empty() || self.steps.len() > HORIZON {
            return Err(Error::Domain(format!(
                "patient {id}: {} windows, expected 1..={HORIZON}",
                self.steps.len()
            )));
        }
        let last = self.steps.len() - 1;
        for (t, step) in self.steps.iter().enumerate() {
            if step.done != (t == last) {
                return Err(Error::Domain(format!(
                    "patient {id}: done flag wrong at window {t}"
                )));
            }
            if step.done {
                let expected = if self.survived_90d { 1.0 } else { -1.0 };
                if step.reward != expected {
                    return Err(Error::Domain(format!(
                        "patient {id}: terminal reward {} disagrees with outcome",
                        step.reward
                    )));
                }
            } else if !(step.reward.abs() <= intermediate_weight) {
                return Err(Error::Domain(format!(
                    "patient {id}: intermediate reward {} exceeds ±{intermediate_weight}",
                    step.reward
                )));
            }
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &Episode) -> bool {
        self.patient_id == other.patient_id
            && self.survived_90d == other.survived_90d
            && self.steps.len() == other.steps.len()
            && self.steps.iter().zip(&other.steps).all(|(a, b)| {
                a.state.bit_eq(&b.state)
                    && a.action == b.action
                    && a.reward.to_bits() == b.reward.to_bits()
                    && a.done == b.done
            })
    }
}

/// Per-feature affine standardization fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fits over every window of `episodes`. Constant features get unit scale.
    pub fn fit(episodes: &[Episode]) -> Result<Self> {
        let rows: Vec<&[f64]> = episodes
            .iter()
            .flat_map(|e| e.steps.iter().map(|s| s.state.values()))
            .collect();
        if rows.is_empty() {
            return Err(Error::Empty("no windows to fit a standardizer on".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; N_FEATURES];
        for r in &rows {
            for (m, x) in mean.iter_mut().zip(r.iter()) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; N_FEATURES];
        for r in &rows {
            for ((v, x), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 && s.is_finite() {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Numeric("standardizer fitted on non-finite data".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn apply_row(&self, values: ArrayView1<f64>) -> Array1<f64> {
        Array1::from(self.apply(values.as_slice().expect("contiguous row")))
    }
}

/// Columnar transition table used for batched training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Transitions {
    pub states: Array2<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_states: Array2<f64>,
    pub next_actions: Vec<usize>,
    pub dones: Vec<bool>,
}

impl Transitions {
    pub fn new(
        states: Array2<f64>,
        actions: Vec<usize>,
        rewards: Vec<f64>,
        next_states: Array2<f64>,
        next_actions: Vec<usize>,
        dones: Vec<bool>,
    ) -> Result<Self> {
        let n = states.nrows();
        if next_states.dim() != states.dim()
            || actions.len() != n
            || rewards.len() != n
            || next_actions.len() != n
            || dones.len() != n
        {
            return Err(Error::Shape("transition columns have inconsistent lengths".into()));
        }
        Ok(Self {
            states,
            actions,
            rewards,
            next_states,
            next_actions,
            dones,
        })
    }

    /// Flattens every transition of `episodes`, optionally standardized.
    pub fn from_episodes(episodes: &[Episode], standardizer: Option<&Standardizer>) -> Result<Self> {
        let n: usize = episodes.iter().map(|e| e.len()).sum();
        let mut states = Array2::zeros((n, N_FEATURES));
        let mut next_states = Array2::zeros((n, N_FEATURES));
        let mut actions = Vec::with_capacity(n);
        let mut rewards = Vec::with_capacity(n);
        let mut next_actions = Vec::with_capacity(n);
        let mut dones = Vec::with_capacity(n);
        let map = |v: &[f64]| -> Vec<f64> {
            match standardizer {
                Some(s) => s.apply(v),
                None => v.to_vec(),
            }
        };
        let mut row = 0;
        for ep in episodes {
            for tr in ep.transitions() {
                if !tr.state.is_complete() {
                    return Err(Error::Domain(format!(
                        "patient {} has missing values; impute before building transitions",
                        ep.patient_id
                    )));
                }
                states.row_mut(row).assign(&Array1::from(map(tr.state.values())));
                next_states.row_mut(row).assign(&Array1::from(map(tr.next_state.values())));
                actions.push(tr.action.get());
                rewards.push(tr.reward);
                next_actions.push(tr.next_action.get());
                dones.push(tr.done);
                row += 1;
            }
        }
        Self::new(states, actions, rewards, next_states, next_actions, dones)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn max_action(&self) -> Option<usize> {
        self.actions.iter().chain(&self.next_actions).copied().max()
    }

    pub fn check_actions(&self, n_actions: usize) -> Result<()> {
        match self.max_action() {
            Some(a) if a >= n_actions => Err(Error::Domain(format!(
                "action {a} outside 0..{n_actions}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            states: self.states.select(Axis(0), idx),
            actions: idx.iter().map(|&i| self.actions[i]).collect(),
            rewards: idx.iter().map(|&i| self.rewards[i]).collect(),
            next_states: self.next_states.select(Axis(0), idx),
            next_actions: idx.iter().map(|&i| self.next_actions[i]).collect(),
            dones: idx.iter().map(|&i| self.dones[i]).collect(),
        }
    }

    /// Copy with intermediate rewards zeroed and terminal rewards kept.
    pub fn sparse(&self) -> Self {
        let mut out = self.clone();
        for (r, &d) in out.rewards.iter_mut().zip(&self.dones) {
            if !d {
                *r = 0.0;
            }
        }
        out
    }
}

/// Standardized initial states of `episodes`, one row per episode.
pub fn initial_states(episodes: &[Episode], standardizer: Option<&Standardizer>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((episodes.len(), N_FEATURES));
    for (i, ep) in episodes.iter().enumerate() {
        let s = ep
            .initial_state()
            .ok_or_else(|| Error::Empty(format!("patient {} has no windows", ep.patient_id)))?;
        let v = match standardizer {
            Some(st) => st.apply(s.values()),
            None => s.values().to_vec(),
        };
        out.row_mut(i).assign(&Array1::from(v));
    }
    Ok(out)
}

pub fn initial_actions(episodes: &[Episode]) -> Vec<usize> {
    episodes.iter().map(|e| e.steps[0].action.get()).collect()
}
