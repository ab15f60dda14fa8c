//! Fitted Q evaluation and the reported metrics.
//!
//! FQE regresses `Q(s, a) ← clip(r + γ·Q_prev(s', π(s')), −1, 1)` on logged
//! transitions, with `Q_prev` frozen for `steps_per_iteration` Adam steps at a
//! time. Terminal targets are `clip(r)`. Standard deviations reported here are
//! population standard deviations.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{PolicyNet, StepLosses, TrainingHistory, DIVERGENCE_THRESHOLD};
use crate::conformal::ConformalPolicy;
use crate::error::{Error, Result};
use crate::mdp::action::{decode_index, N_LEVELS};
use crate::mdp::episode::Transitions;
use crate::nn::{adam_step, argmax_row, AdamState, DenseNetwork};
use crate::rng::{derive_seed, seeded};

/// Mean return above this value is flagged as overestimation.
pub const OVERESTIMATION_THRESHOLD: f64 = 1.0;
pub const DEFAULT_SURVIVAL_BINS: usize = 10;

/// A deterministic map from states to actions.
pub trait Policy {
    fn act_batch(&self, states: ArrayView2<f64>) -> Result<Vec<usize>>;
}

/// Argmax of a Q-network.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyPolicy {
    pub qnet: DenseNetwork,
}

impl Policy for GreedyPolicy {
    fn act_batch(&self, states: ArrayView2<f64>) -> Result<Vec<usize>> {
        let q = self.qnet.predict_batch(states)?;
        Ok(q.axis_iter(Axis(0)).map(argmax_row).collect())
    }
}

/// Most probable action under a behavior-cloned probability net.
#[derive(Debug, Clone, PartialEq)]
pub struct ClonedPolicy {
    pub pnet: PolicyNet,
}

impl Policy for ClonedPolicy {
    fn act_batch(&self, states: ArrayView2<f64>) -> Result<Vec<usize>> {
        let logits = self.pnet.net.predict_batch(states)?;
        Ok(logits.axis_iter(Axis(0)).map(argmax_row).collect())
    }
}

impl Policy for ConformalPolicy {
    fn act_batch(&self, states: ArrayView2<f64>) -> Result<Vec<usize>> {
        ConformalPolicy::act_batch(self, states)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantPolicy(pub usize);

impl Policy for ConstantPolicy {
    fn act_batch(&self, states: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(vec![self.0; states.nrows()])
    }
}

/// Uniformly random actions from a fixed seed; repeated calls on the same
/// batch give the same actions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformPolicy {
    pub n_actions: usize,
    pub seed: u64,
}

impl Policy for UniformPolicy {
    fn act_batch(&self, states: ArrayView2<f64>) -> Result<Vec<usize>> {
        let mut rng = seeded(self.seed);
        Ok((0..states.nrows()).map(|_| rng.random_range(0..self.n_actions)).collect())
    }
}

/// Any closure over a single state row.
pub struct FnPolicy<F>(pub F);

impl<F> Policy for FnPolicy<F>
where
    F: Fn(&[f64]) -> usize,
{
    fn act_batch(&self, states: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(states
            .axis_iter(Axis(0))
            .map(|row| (self.0)(&row.to_vec()))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FqeConfig {
    pub gamma: f64,
    pub iterations: usize,
    pub steps_per_iteration: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    /// Zero intermediate rewards before fitting.
    pub sparse_rewards: bool,
    /// Clip regression targets to `[−1, 1]`.
    pub clip_targets: bool,
    pub seed: u64,
}

impl Default for FqeConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            iterations: 20,
            steps_per_iteration: 500,
            lr: 1e-3,
            batch_size: 256,
            hidden: vec![128, 128],
            sparse_rewards: true,
            clip_targets: true,
            seed: 0,
        }
    }
}

impl FqeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("FQE gamma {} outside [0, 1]", self.gamma)));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) || self.hidden.contains(&0) {
            return Err(Error::Config("FQE batch_size, lr and hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Fitted evaluator and its regression losses.
#[derive(Debug, Clone, PartialEq)]
pub struct FqeModel {
    pub net: DenseNetwork,
    pub history: TrainingHistory,
}

impl FqeModel {
    /// `Q(s_i, a_i)` for each row.
    pub fn values(&self, states: ArrayView2<f64>, actions: &[usize]) -> Result<Vec<f64>> {
        if actions.len() != states.nrows() {
            return Err(Error::Shape(format!("{} actions for {} states", actions.len(), states.nrows())));
        }
        let q = self.net.predict_batch(states)?;
        actions
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                if a < q.ncols() {
                    Ok(q[[i, a]])
                } else {
                    Err(Error::Domain(format!("action {a} outside 0..{}", q.ncols())))
                }
            })
            .collect()
    }
}

/// FQE of `policy`: next actions are `π(s')`.
pub fn fqe_train(policy: &dyn Policy, data: &Transitions, n_actions: usize, cfg: &FqeConfig) -> Result<FqeModel> {
    if data.is_empty() {
        return Err(Error::Empty("FQE dataset".into()));
    }
    let next = policy.act_batch(data.next_states.view())?;
    fqe_fit(data, &next, n_actions, cfg)
}

/// FQE of the logging policy: next actions are the logged ones.
pub fn fqe_train_logged(data: &Transitions, n_actions: usize, cfg: &FqeConfig) -> Result<FqeModel> {
    fqe_fit(data, &data.next_actions, n_actions, cfg)
}

fn fqe_fit(data: &Transitions, next_actions: &[usize], n_actions: usize, cfg: &FqeConfig) -> Result<FqeModel> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("FQE dataset".into()));
    }
    data.check_actions(n_actions)?;
    if let Some(&a) = next_actions.iter().find(|&&a| a >= n_actions) {
        return Err(Error::Domain(format!("policy action {a} outside 0..{n_actions}")));
    }
    let rewards: Vec<f64> = if cfg.sparse_rewards {
        data.sparse().rewards
    } else {
        data.rewards.clone()
    };
    let mut sizes = vec![data.state_dim()];
    sizes.extend(&cfg.hidden);
    sizes.push(n_actions);
    let mut net = DenseNetwork::new(&sizes, derive_seed(cfg.seed, 0))?;
    let mut opt = AdamState::new(&net);
    let mut rng = seeded(derive_seed(cfg.seed, 1));
    let n = data.len();
    let full_batch = cfg.batch_size >= n;
    let mut history = TrainingHistory::default();
    let clip = |y: f64| if cfg.clip_targets { y.clamp(-1.0, 1.0) } else { y };
    let mut idx: Vec<usize> = if full_batch { (0..n).collect() } else { vec![0; cfg.batch_size] };
    let mut step = 0;

    for _ in 0..cfg.iterations {
        let frozen = net.clone();
        for _ in 0..cfg.steps_per_iteration {
            if !full_batch {
                for slot in idx.iter_mut() {
                    *slot = rng.random_range(0..n);
                }
            }
            let states = data.states.select(Axis(0), &idx);
            let next_states = data.next_states.select(Axis(0), &idx);
            let q_next = if cfg.gamma > 0.0 {
                Some(frozen.predict_batch(next_states.view())?)
            } else {
                None
            };
            let (q, cache) = net.forward_batch(states.view())?;
            let b = idx.len() as f64;
            let mut grad = Array2::zeros(q.raw_dim());
            let mut loss = 0.0;
            for (row, &i) in idx.iter().enumerate() {
                let mut y = rewards[i];
                if !data.dones[i] {
                    if let Some(qn) = &q_next {
                        y += cfg.gamma * qn[[row, next_actions[i]]];
                    }
                }
                let a = data.actions[i];
                let res = q[[row, a]] - clip(y);
                loss += res * res;
                grad[[row, a]] = 2.0 * res / b;
            }
            loss /= b;
            let rec = StepLosses {
                step,
                total: loss,
                td: loss,
                ..StepLosses::default()
            };
            history.steps.push(rec);
            if !loss.is_finite() || loss > DIVERGENCE_THRESHOLD {
                return Err(Error::Divergence {
                    step,
                    loss,
                    history: Box::new(history),
                });
            }
            let grads = net.backward(&cache, grad.view())?;
            adam_step(&mut net, &grads, &mut opt, cfg.lr)?;
            step += 1;
        }
    }
    Ok(FqeModel { net, history })
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("no values to summarise".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Mean and standard deviation of `Q_fqe(s₀, π(s₀))` over initial states.
pub fn initial_value(fqe: &FqeModel, policy: &dyn Policy, initial_states: ArrayView2<f64>) -> Result<(f64, f64)> {
    if initial_states.nrows() == 0 {
        return Err(Error::Empty("initial states".into()));
    }
    let actions = policy.act_batch(initial_states)?;
    mean_std(&fqe.values(initial_states, &actions)?)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} values against {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two observations".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("a variable has zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation between values and a binary mortality indicator.
pub fn mortality_correlation(values: &[f64], died: &[bool]) -> Result<f64> {
    let m: Vec<f64> = died.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect();
    pearson(values, &m)
}

/// Per-bin survival rates over equal-width bins of the physician values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalBins {
    pub min: f64,
    pub max: f64,
    /// Survival rate per bin, empty bins interpolated.
    pub rates: Vec<f64>,
    pub counts: Vec<usize>,
}

impl SurvivalBins {
    pub fn fit(values: &[f64], survived: &[bool], n_bins: usize) -> Result<Self> {
        if values.len() != survived.len() {
            return Err(Error::Shape(format!("{} values for {} outcomes", values.len(), survived.len())));
        }
        if n_bins < 2 {
            return Err(Error::Domain("survival mapping needs at least two bins".into()));
        }
        if values.is_empty() {
            return Err(Error::Empty("physician values".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite physician value".into()));
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if min == max {
            return Err(Error::Domain("all physician values are identical; a single bin is degenerate".into()));
        }
        let mut bins = Self {
            min,
            max,
            rates: vec![f64::NAN; n_bins],
            counts: vec![0; n_bins],
        };
        let mut alive = vec![0usize; n_bins];
        for (&v, &s) in values.iter().zip(survived) {
            let b = bins.bin(v);
            bins.counts[b] += 1;
            alive[b] += s as usize;
        }
        let filled: Vec<usize> = (0..n_bins).filter(|&b| bins.counts[b] > 0).collect();
        for &b in &filled {
            bins.rates[b] = alive[b] as f64 / bins.counts[b] as f64;
        }
        for b in 0..n_bins {
            if bins.counts[b] > 0 {
                continue;
            }
            let lo = filled.iter().rev().find(|&&f| f < b);
            let hi = filled.iter().find(|&&f| f > b);
            bins.rates[b] = match (lo, hi) {
                (Some(&l), Some(&h)) => {
                    let t = (b - l) as f64 / (h - l) as f64;
                    bins.rates[l] + t * (bins.rates[h] - bins.rates[l])
                }
                (Some(&l), None) => bins.rates[l],
                (None, Some(&h)) => bins.rates[h],
                (None, None) => unreachable!("at least one value was binned"),
            };
        }
        Ok(bins)
    }

    pub fn n_bins(&self) -> usize {
        self.rates.len()
    }

    /// Bin of `v`; values outside the fitted range clamp to the edge bins.
    pub fn bin(&self, v: f64) -> usize {
        let n = self.rates.len();
        let width = (self.max - self.min) / n as f64;
        let raw = ((v - self.min) / width).floor();
        if raw.is_nan() || raw < 0.0 {
            0
        } else {
            (raw as usize).min(n - 1)
        }
    }

    pub fn center(&self, b: usize) -> f64 {
        let width = (self.max - self.min) / self.rates.len() as f64;
        self.min + (b as f64 + 0.5) * width
    }

    /// Survival percentage of the bin containing `v`.
    pub fn map(&self, v: f64) -> f64 {
        100.0 * self.rates[self.bin(v)]
    }
}

pub fn survival_mapping(physician_values: &[f64], survived: &[bool], policy_value: f64, n_bins: usize) -> Result<f64> {
    Ok(SurvivalBins::fit(physician_values, survived, n_bins)?.map(policy_value))
}

/// Level counts per ventilator setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ActionHistograms {
    pub vt: [u64; N_LEVELS],
    pub peep: [u64; N_LEVELS],
    pub fio2: [u64; N_LEVELS],
}

impl ActionHistograms {
    pub fn total(&self) -> u64 {
        self.vt.iter().sum()
    }

    pub fn add(&mut self, other: &ActionHistograms) {
        for l in 0..N_LEVELS {
            self.vt[l] += other.vt[l];
            self.peep[l] += other.peep[l];
            self.fio2[l] += other.fio2[l];
        }
    }

    pub fn dimensions(&self) -> [(&'static str, &[u64; N_LEVELS]); 3] {
        [("vt", &self.vt), ("peep", &self.peep), ("fio2", &self.fio2)]
    }
}

pub fn histogram_actions(actions: &[usize]) -> Result<ActionHistograms> {
    let mut h = ActionHistograms::default();
    for &a in actions {
        let t = decode_index(a)?;
        h.vt[t.vt as usize] += 1;
        h.peep[t.peep as usize] += 1;
        h.fio2[t.fio2 as usize] += 1;
    }
    Ok(h)
}

pub fn action_distribution(policy: &dyn Policy, states: ArrayView2<f64>) -> Result<ActionHistograms> {
    if states.nrows() == 0 {
        return Err(Error::Empty("states for the action distribution".into()));
    }
    histogram_actions(&policy.act_batch(states)?)
}

/// Mean over states of `max_a Q(s, a)`.
pub fn mean_max_q(qnet: &DenseNetwork, states: ArrayView2<f64>) -> Result<f64> {
    if states.nrows() == 0 {
        return Err(Error::Empty("states for the Q comparison".into()));
    }
    let q = qnet.predict_batch(states)?;
    let total: f64 = q
        .axis_iter(Axis(0))
        .map(|row| row[argmax_row(row)])
        .sum();
    Ok(total / states.nrows() as f64)
}

/// Mean over states of `Q(s, π(s))` for the conformally filtered choice.
pub fn mean_selected_q(policy: &ConformalPolicy, states: ArrayView2<f64>) -> Result<f64> {
    if states.nrows() == 0 {
        return Err(Error::Empty("states for the Q comparison".into()));
    }
    let (_, v) = policy.value_batch(states)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodRow {
    pub agent: String,
    /// `max_q` or `selected_q`.
    pub statistic: String,
    pub id_mean: f64,
    pub ood_mean: f64,
    pub id_flag: bool,
    pub ood_flag: bool,
}

impl OodRow {
    pub fn new(agent: &str, statistic: &str, id_mean: f64, ood_mean: f64) -> Self {
        Self {
            agent: agent.into(),
            statistic: statistic.into(),
            id_mean,
            ood_mean,
            id_flag: id_mean > OVERESTIMATION_THRESHOLD,
            ood_flag: ood_mean > OVERESTIMATION_THRESHOLD,
        }
    }
}

/// Mean initial max-Q per agent on in- and out-of-distribution states.
pub fn ood_q_comparison(
    agents: &[(&str, &DenseNetwork)],
    id_states: ArrayView2<f64>,
    ood_states: ArrayView2<f64>,
) -> Result<Vec<OodRow>> {
    if id_states.nrows() == 0 || ood_states.nrows() == 0 {
        return Err(Error::Empty("ID and OOD state sets must both be non-empty".into()));
    }
    agents
        .iter()
        .map(|(name, q)| Ok(OodRow::new(name, "max_q", mean_max_q(q, id_states)?, mean_max_q(q, ood_states)?)))
        .collect()
}
