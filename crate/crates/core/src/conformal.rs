//! Split-conformal calibration of the behavior probability net and
//! uncertainty-aware action selection.
//!
//! Nonconformity of a logged pair is `1 − P_ω(a|s)`. With `n` calibration
//! scores sorted ascending and rank `k = ⌈(n+1)(1−α)⌉`, the threshold is the
//! `k`-th smallest score, or `1` when `k > n`. The confident set of a state is
//! every action whose score does not exceed the threshold, i.e.
//! `P_ω(a|s) ≥ 1 − τ`, boundary included.

use std::path::Path;

use ndarray::{ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::agents::PolicyNet;
use crate::error::{Error, Result};
use crate::io_util::{read_json, write_json};
use crate::mdp::action::ActionIndex;
use crate::nn::{argmax_row, DenseNetwork};

const FORMAT: &str = "confdqn-calibration";
const VERSION: u32 = 1;

pub fn nonconformity(pnet: &PolicyNet, state: &[f64], action: ActionIndex) -> Result<f64> {
    let probs = pnet.probabilities(state)?;
    let a = action.get();
    if a >= probs.len() {
        return Err(Error::Domain(format!("action {a} outside 0..{}", probs.len())));
    }
    Ok(score_of(probs[a]))
}

fn score_of(p: f64) -> f64 {
    (1.0 - p).clamp(0.0, 1.0)
}

/// `⌈(n+1)(1−α)⌉`, guarded against products that land a rounding error above
/// an integer.
pub fn quantile_rank(n: usize, alpha: f64) -> usize {
    let x = (n as f64 + 1.0) * (1.0 - alpha);
    let slack = 1e-9 * (n as f64 + 1.0);
    (x - slack).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub format: String,
    pub version: u32,
    pub alpha: f64,
    pub n: usize,
    pub tau: f64,
    /// Nonconformity scores, ascending.
    pub scores: Vec<f64>,
}

impl CalibrationResult {
    /// Threshold from raw scores (any order).
    pub fn from_scores(mut scores: Vec<f64>, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if scores.is_empty() {
            return Err(Error::EmptyCalibration);
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Domain(format!("nonconformity score {s} outside [0, 1]")));
        }
        scores.sort_by(f64::total_cmp);
        let tau = threshold(&scores, alpha);
        Ok(Self {
            format: FORMAT.into(),
            version: VERSION,
            alpha,
            n: scores.len(),
            tau,
            scores,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: Self = read_json(path)?;
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        if r.format != FORMAT || r.version != VERSION {
            return Err(bad(format!(
                "expected {FORMAT} v{VERSION}, found {} v{}",
                r.format, r.version
            )));
        }
        if r.n != r.scores.len() || r.scores.windows(2).any(|w| w[0] > w[1]) {
            return Err(bad("score list is not sorted or does not match n".into()));
        }
        if r.n == 0 {
            return Err(Error::EmptyCalibration);
        }
        if !(r.alpha > 0.0 && r.alpha < 1.0) || r.tau.to_bits() != threshold(&r.scores, r.alpha).to_bits() {
            return Err(bad("threshold does not match the stored scores".into()));
        }
        Ok(r)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("alpha {alpha} outside (0, 1)")))
    }
}

fn threshold(sorted: &[f64], alpha: f64) -> f64 {
    let k = quantile_rank(sorted.len(), alpha);
    if k > sorted.len() {
        1.0
    } else {
        // k ≥ 1 for α < 1
        sorted[k.max(1) - 1]
    }
}

/// Scores every calibration pair and computes the threshold.
pub fn calibrate(pnet: &PolicyNet, states: ArrayView2<f64>, actions: &[usize], alpha: f64) -> Result<CalibrationResult> {
    check_alpha(alpha)?;
    if states.nrows() == 0 {
        return Err(Error::EmptyCalibration);
    }
    if actions.len() != states.nrows() {
        return Err(Error::Shape(format!(
            "{} actions for {} calibration states",
            actions.len(),
            states.nrows()
        )));
    }
    let probs = pnet.probabilities_batch(states)?;
    let mut scores = Vec::with_capacity(actions.len());
    for (row, &a) in probs.axis_iter(Axis(0)).zip(actions) {
        if a >= row.len() {
            return Err(Error::Domain(format!("action {a} outside 0..{}", row.len())));
        }
        scores.push(score_of(row[a]));
    }
    CalibrationResult::from_scores(scores, alpha)
}

/// Recomputes the threshold for a new significance level from stored scores.
pub fn retune_threshold(result: &CalibrationResult, alpha: f64) -> Result<CalibrationResult> {
    check_alpha(alpha)?;
    if result.scores.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    Ok(CalibrationResult {
        format: FORMAT.into(),
        version: VERSION,
        alpha,
        n: result.scores.len(),
        tau: threshold(&result.scores, alpha),
        scores: result.scores.clone(),
    })
}

fn in_set(p: f64, tau: f64) -> bool {
    score_of(p) <= tau
}

/// Actions whose probability clears `1 − τ`, ascending.
pub fn confident_set(probs: &[f64], tau: f64) -> Vec<usize> {
    (0..probs.len()).filter(|&a| in_set(probs[a], tau)).collect()
}

pub fn prediction_set(pnet: &PolicyNet, state: &[f64], tau: f64) -> Result<Vec<ActionIndex>> {
    check_tau(tau)?;
    let probs = pnet.probabilities(state)?;
    confident_set(&probs, tau).into_iter().map(ActionIndex::new).collect()
}

fn check_tau(tau: f64) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(Error::Domain(format!("threshold {tau} outside [0, 1]")))
    }
}

/// Q-maximal action inside the confident set, or the global Q-maximum when
/// the set is empty. Ties go to the lowest index.
pub fn select_from(q: ArrayView1<f64>, probs: ArrayView1<f64>, tau: f64) -> usize {
    let mut best: Option<usize> = None;
    for a in 0..q.len() {
        if in_set(probs[a], tau) && best.is_none_or(|b| q[a] > q[b]) {
            best = Some(a);
        }
    }
    best.unwrap_or_else(|| argmax_row(q))
}

pub fn select_action(qnet: &DenseNetwork, pnet: &PolicyNet, state: &[f64], tau: f64) -> Result<ActionIndex> {
    check_tau(tau)?;
    let q = qnet.predict(state)?;
    let probs = pnet.probabilities(state)?;
    if q.len() != probs.len() {
        return Err(Error::Shape(format!(
            "Q-network has {} outputs, probability net {}",
            q.len(),
            probs.len()
        )));
    }
    ActionIndex::new(select_from(ArrayView1::from(&q), ArrayView1::from(&probs), tau))
}

/// Fraction of logged actions that fall inside their state's confident set.
pub fn empirical_coverage(pnet: &PolicyNet, tau: f64, states: ArrayView2<f64>, actions: &[usize]) -> Result<f64> {
    check_tau(tau)?;
    if states.nrows() == 0 {
        return Err(Error::Empty("coverage test set".into()));
    }
    if actions.len() != states.nrows() {
        return Err(Error::Shape(format!("{} actions for {} states", actions.len(), states.nrows())));
    }
    let probs = pnet.probabilities_batch(states)?;
    let hits = probs
        .axis_iter(Axis(0))
        .zip(actions)
        .filter(|(row, &a)| in_set(row[a], tau))
        .count();
    Ok(hits as f64 / actions.len() as f64)
}

/// Frozen Q-network, probability net and threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ConformalPolicy {
    pub qnet: DenseNetwork,
    pub pnet: PolicyNet,
    pub tau: f64,
}

impl ConformalPolicy {
    pub fn new(qnet: DenseNetwork, pnet: PolicyNet, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        if qnet.layer_sizes().first() != pnet.net.layer_sizes().first()
            || qnet.output_dim() != pnet.n_actions()
        {
            return Err(Error::Shape("Q-network and probability net disagree on dimensions".into()));
        }
        Ok(Self { qnet, pnet, tau })
    }

    pub fn act(&self, state: &[f64]) -> Result<ActionIndex> {
        select_action(&self.qnet, &self.pnet, state, self.tau)
    }

    pub fn act_batch(&self, states: ArrayView2<f64>) -> Result<Vec<usize>> {
        let q = self.qnet.predict_batch(states)?;
        let p = self.pnet.probabilities_batch(states)?;
        Ok(q.axis_iter(Axis(0))
            .zip(p.axis_iter(Axis(0)))
            .map(|(qr, pr)| select_from(qr, pr, self.tau))
            .collect())
    }

    /// `Q(s, π(s))` for every row, alongside the chosen actions.
    pub fn value_batch(&self, states: ArrayView2<f64>) -> Result<(Vec<usize>, Vec<f64>)> {
        let q = self.qnet.predict_batch(states)?;
        let p = self.pnet.probabilities_batch(states)?;
        let mut actions = Vec::with_capacity(states.nrows());
        let mut values = Vec::with_capacity(states.nrows());
        for (qr, pr) in q.axis_iter(Axis(0)).zip(p.axis_iter(Axis(0))) {
            let a = select_from(qr, pr, self.tau);
            actions.push(a);
            values.push(qr[a]);
        }
        Ok((actions, values))
    }

    pub fn confident_set(&self, state: &[f64]) -> Result<Vec<usize>> {
        Ok(confident_set(&self.pnet.probabilities(state)?, self.tau))
    }
}
