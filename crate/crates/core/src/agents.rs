//! Offline trainers: Double DQN, ConformalDQN (Q-pair plus behavior
//! probability net), conservative Q-learning and behavior cloning.
//!
//! The Q-networks and the probability net never share parameters. Every loss
//! is written as a gradient with respect to network outputs, so a training
//! step is one forward and one backward pass per network.
//!
//! Loss conventions, for a batch of `B` transitions:
//!
//! ```text
//! td   = (1/B) Σ_i (Q(s_i, a_i) − y_i)²
//! y_i  = r_i                                         if done_i
//!      = r_i + γ·Q_target(s'_i, argmax_a Q(s'_i, a)) otherwise
//! cql  = ω·(1/B) Σ_i [logsumexp_a Q(s_i, a) − Q(s_i, a_i)]
//! nll  = −(1/B) Σ_i log softmax(ℓ(s_i))[a_i]
//! l2   = c·(1/B) Σ_i Σ_a ℓ(s_i)_a²
//! ```

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::action::{ActionIndex, N_ACTIONS};
use crate::mdp::episode::Transitions;
use crate::nn::{
    adam_step, argmax_row, logsumexp_unchecked, softmax_rows, softmax_unchecked, AdamState,
    DenseNetwork, Gradients,
};
use crate::rng::{derive_seed, seeded};

pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Ddqn,
    ConformalDqn,
    Cql,
    Bc,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Bc,
        Algorithm::ConformalDqn,
        Algorithm::Cql,
        Algorithm::Ddqn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Ddqn => "ddqn",
            Algorithm::ConformalDqn => "conformal_dqn",
            Algorithm::Cql => "cql",
            Algorithm::Bc => "bc",
        }
    }

    pub fn uses_q(self) -> bool {
        !matches!(self, Algorithm::Bc)
    }

    pub fn uses_policy_net(self) -> bool {
        matches!(self, Algorithm::ConformalDqn | Algorithm::Bc)
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddqn" => Ok(Algorithm::Ddqn),
            "conformal_dqn" | "conformal" => Ok(Algorithm::ConformalDqn),
            "cql" => Ok(Algorithm::Cql),
            "bc" => Ok(Algorithm::Bc),
            other => Err(Error::Config(format!(
                "unknown algorithm `{other}` (expected ddqn, conformal_dqn, cql or bc)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub sync_interval: usize,
    /// CQL penalty weight ω.
    pub cql_weight: f64,
    pub logit_l2_coeff: f64,
    /// Conformal significance level.
    pub alpha: f64,
    /// Hidden layer widths; empty means a linear model.
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl AgentConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        let lr = match algorithm {
            Algorithm::Cql => 1e-4,
            _ => 1e-3,
        };
        Self {
            algorithm,
            lr,
            gamma: 0.75,
            batch_size: 256,
            max_steps: 30_000,
            sync_interval: 5_000,
            cql_weight: if algorithm == Algorithm::Cql { 0.1 } else { 0.0 },
            logit_l2_coeff: 1e-3,
            alpha: 0.15,
            hidden: vec![256, 256],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} outside (0, 1)", self.alpha));
        }
        if !(self.cql_weight >= 0.0) || !self.cql_weight.is_finite() {
            return bad(format!("cql_weight {} must be non-negative", self.cql_weight));
        }
        if !(self.logit_l2_coeff >= 0.0) || !self.logit_l2_coeff.is_finite() {
            return bad(format!("logit_l2_coeff {} must be non-negative", self.logit_l2_coeff));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.sync_interval == 0 {
            return bad("sync_interval must be positive".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        Ok(())
    }

    pub fn layer_sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(input);
        sizes.extend(&self.hidden);
        sizes.push(output);
        sizes
    }
}

/// Prediction and target Q-networks.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetworkPair {
    pub prediction: DenseNetwork,
    pub target: DenseNetwork,
    pub sync_interval: usize,
}

impl QNetworkPair {
    /// Fresh prediction net with the target initialised as an exact copy.
    pub fn new(layer_sizes: &[usize], seed: u64, sync_interval: usize) -> Result<Self> {
        let prediction = DenseNetwork::new(layer_sizes, seed)?;
        let target = prediction.clone();
        Ok(Self {
            prediction,
            target,
            sync_interval,
        })
    }

    pub fn from_networks(prediction: DenseNetwork, target: DenseNetwork, sync_interval: usize) -> Result<Self> {
        if prediction.layer_sizes() != target.layer_sizes() {
            return Err(Error::Shape(format!(
                "prediction {:?} and target {:?} architectures differ",
                prediction.layer_sizes(),
                target.layer_sizes()
            )));
        }
        Ok(Self {
            prediction,
            target,
            sync_interval,
        })
    }

    pub fn sync(&mut self) -> Result<()> {
        self.target.copy_weights_from(&self.prediction)
    }
}

/// Behavior probability network `P_ω(a|s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub net: DenseNetwork,
}

impl PolicyNet {
    pub fn new(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        Ok(Self {
            net: DenseNetwork::new(layer_sizes, seed)?,
        })
    }

    pub fn from_network(net: DenseNetwork) -> Self {
        Self { net }
    }

    pub fn logits(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.net.predict(state)
    }

    pub fn probabilities(&self, state: &[f64]) -> Result<Vec<f64>> {
        let logits = self.logits(state)?;
        crate::nn::softmax(&logits)
    }

    pub fn probabilities_batch(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        softmax_rows(self.net.predict_batch(states)?.view())
    }

    pub fn n_actions(&self) -> usize {
        self.net.output_dim()
    }
}

/// Losses recorded at one optimisation step; components that do not apply to
/// the algorithm are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub total: f64,
    pub td: f64,
    pub cql: f64,
    pub nll: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub steps: Vec<StepLosses>,
}

impl TrainingHistory {
    pub const CSV_HEADER: &'static str = "step,total,td,cql,nll,l2";

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.steps.len() + 1));
        out.push_str(Self::CSV_HEADER);
        out.push('\n');
        for s in &self.steps {
            // `{:?}` prints the shortest representation that round-trips.
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:?},{:?}",
                s.step, s.total, s.td, s.cql, s.nll, s.l2
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let mut steps = Vec::new();
        for rec in reader.deserialize() {
            steps.push(rec?);
        }
        Ok(Self { steps })
    }
}

/// Output of [`train`]: the networks relevant to the algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedAgent {
    pub config: AgentConfig,
    pub q: Option<QNetworkPair>,
    pub policy: Option<PolicyNet>,
    pub history: TrainingHistory,
}

impl TrainedAgent {
    pub fn qnet(&self) -> Result<&DenseNetwork> {
        self.q
            .as_ref()
            .map(|p| &p.prediction)
            .ok_or_else(|| Error::Usage(format!("{} agent has no Q-network", self.config.algorithm)))
    }

    pub fn policy_net(&self) -> Result<&PolicyNet> {
        self.policy.as_ref().ok_or_else(|| {
            Error::Usage(format!("{} agent has no probability network", self.config.algorithm))
        })
    }
}

/// A loss value and its gradient with respect to one network's parameters.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Gradients,
}

#[derive(Debug, Clone)]
pub struct CompositeLoss {
    pub total: f64,
    pub td: f64,
    pub nll: f64,
    pub l2: f64,
    pub q_grads: Gradients,
    pub policy_grads: Gradients,
}

fn require_nonempty(batch: &Transitions) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("transition batch".into()));
    }
    Ok(())
}

/// Double-DQN regression targets: the prediction net picks the next action,
/// the target net scores it.
pub fn ddqn_target(batch: &Transitions, pair: &QNetworkPair, gamma: f64) -> Result<Vec<f64>> {
    require_nonempty(batch)?;
    let next_pred = pair.prediction.predict_batch(batch.next_states.view())?;
    let next_tgt = pair.target.predict_batch(batch.next_states.view())?;
    Ok(targets_from_outputs(batch, next_pred.view(), next_tgt.view(), gamma))
}

fn targets_from_outputs(
    batch: &Transitions,
    next_pred: ArrayView2<f64>,
    next_tgt: ArrayView2<f64>,
    gamma: f64,
) -> Vec<f64> {
    (0..batch.len())
        .map(|i| {
            let r = batch.rewards[i];
            if batch.dones[i] || gamma == 0.0 {
                r
            } else {
                let a = argmax_row(next_pred.row(i));
                r + gamma * next_tgt[[i, a]]
            }
        })
        .collect()
}

/// Mean squared error between `Q(s_i, a_i)` and `targets`, with the gradient
/// with respect to the output matrix.
fn td_output_grad(q: ArrayView2<f64>, actions: &[usize], targets: &[f64]) -> (f64, Array2<f64>) {
    let b = q.nrows() as f64;
    let mut grad = Array2::zeros(q.raw_dim());
    let mut loss = 0.0;
    for (i, (&a, &y)) in actions.iter().zip(targets).enumerate() {
        let res = q[[i, a]] - y;
        loss += res * res;
        grad[[i, a]] = 2.0 * res / b;
    }
    (loss / b, grad)
}

fn cql_output_grad(q: ArrayView2<f64>, actions: &[usize], omega: f64) -> (f64, Array2<f64>) {
    let b = q.nrows() as f64;
    let mut grad = Array2::zeros(q.raw_dim());
    if omega == 0.0 {
        return (0.0, grad);
    }
    let mut total = 0.0;
    for (i, &a) in actions.iter().enumerate() {
        let row = q.row(i);
        total += logsumexp_unchecked(row) - row[a];
        let mut g = softmax_unchecked(row);
        g[a] -= 1.0;
        grad.row_mut(i).assign(&(g * (omega / b)));
    }
    (omega * total / b, grad)
}

fn nll_output_grad(logits: ArrayView2<f64>, actions: &[usize]) -> (f64, Array2<f64>) {
    let b = logits.nrows() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, &a) in actions.iter().enumerate() {
        let row = logits.row(i);
        total += logsumexp_unchecked(row) - row[a];
        let mut g = softmax_unchecked(row);
        g[a] -= 1.0;
        g /= b;
        grad.row_mut(i).assign(&g);
    }
    (total / b, grad)
}

fn l2_output_grad(logits: ArrayView2<f64>, coeff: f64) -> (f64, Array2<f64>) {
    let b = logits.nrows() as f64;
    if coeff == 0.0 {
        return (0.0, Array2::zeros(logits.raw_dim()));
    }
    let sq: f64 = logits.iter().map(|x| x * x).sum();
    (coeff * sq / b, logits.mapv(|x| 2.0 * coeff * x / b))
}

fn check_loss(name: &str, loss: f64, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{name} loss is {loss} on a batch of {batch} transitions")))
    }
}

/// Mean squared TD error and its gradient for the prediction network.
pub fn td_loss(batch: &Transitions, pair: &QNetworkPair, gamma: f64) -> Result<LossGrad> {
    require_nonempty(batch)?;
    batch.check_actions(pair.prediction.output_dim())?;
    let targets = ddqn_target(batch, pair, gamma)?;
    let (q, cache) = pair.prediction.forward_batch(batch.states.view())?;
    let (loss, g) = td_output_grad(q.view(), &batch.actions, &targets);
    check_loss("td", loss, batch.len())?;
    Ok(LossGrad {
        loss,
        grads: pair.prediction.backward(&cache, g.view())?,
    })
}

/// Conservative penalty `ω·mean_i[logsumexp_a Q(s_i,a) − Q(s_i,a_i)]`.
pub fn cql_penalty(states: ArrayView2<f64>, actions: &[usize], qnet: &DenseNetwork, omega: f64) -> Result<f64> {
    Ok(cql_penalty_grad(states, actions, qnet, omega)?.loss)
}

pub fn cql_penalty_grad(
    states: ArrayView2<f64>,
    actions: &[usize],
    qnet: &DenseNetwork,
    omega: f64,
) -> Result<LossGrad> {
    if states.nrows() == 0 {
        return Err(Error::Empty("transition batch".into()));
    }
    if !(omega >= 0.0) {
        return Err(Error::Domain(format!("CQL weight {omega} must be non-negative")));
    }
    check_action_range(actions, qnet.output_dim(), states.nrows())?;
    let (q, cache) = qnet.forward_batch(states)?;
    let (loss, g) = cql_output_grad(q.view(), actions, omega);
    check_loss("cql", loss, actions.len())?;
    Ok(LossGrad {
        loss,
        grads: qnet.backward(&cache, g.view())?,
    })
}

/// Penalty on a precomputed Q-table, one row per state.
pub fn cql_penalty_from_table(q: ArrayView2<f64>, actions: &[usize], omega: f64) -> Result<f64> {
    if q.nrows() == 0 {
        return Err(Error::Empty("Q-table".into()));
    }
    check_action_range(actions, q.ncols(), q.nrows())?;
    Ok(cql_output_grad(q, actions, omega).0)
}

fn check_action_range(actions: &[usize], n_actions: usize, rows: usize) -> Result<()> {
    if actions.len() != rows {
        return Err(Error::Shape(format!("{} actions for {rows} states", actions.len())));
    }
    if let Some(&a) = actions.iter().find(|&&a| a >= n_actions) {
        return Err(Error::Domain(format!("action {a} outside 0..{n_actions}")));
    }
    Ok(())
}

/// Mean negative log-likelihood of the logged actions under `P_ω`.
pub fn nll_loss(states: ArrayView2<f64>, actions: &[usize], pnet: &PolicyNet) -> Result<LossGrad> {
    if states.nrows() == 0 {
        return Err(Error::Empty("transition batch".into()));
    }
    check_action_range(actions, pnet.n_actions(), states.nrows())?;
    let (logits, cache) = pnet.net.forward_batch(states)?;
    let (loss, g) = nll_output_grad(logits.view(), actions);
    check_loss("nll", loss, actions.len())?;
    Ok(LossGrad {
        loss,
        grads: pnet.net.backward(&cache, g.view())?,
    })
}

/// Logit penalty alone (mean over states of the summed squared logits).
pub fn logit_l2(states: ArrayView2<f64>, pnet: &PolicyNet, coeff: f64) -> Result<f64> {
    let logits = pnet.net.predict_batch(states)?;
    Ok(l2_output_grad(logits.view(), coeff).0)
}

/// `td + nll + l2`; each network receives only the gradient of its own terms.
pub fn composite_loss(
    batch: &Transitions,
    pair: &QNetworkPair,
    pnet: &PolicyNet,
    gamma: f64,
    logit_l2_coeff: f64,
) -> Result<CompositeLoss> {
    let td = td_loss(batch, pair, gamma)?;
    check_action_range(&batch.actions, pnet.n_actions(), batch.len())?;
    let (logits, cache) = pnet.net.forward_batch(batch.states.view())?;
    let (nll, mut g) = nll_output_grad(logits.view(), &batch.actions);
    let (l2, g2) = l2_output_grad(logits.view(), logit_l2_coeff);
    g += &g2;
    let total = td.loss + nll + l2;
    check_loss("composite", total, batch.len())?;
    Ok(CompositeLoss {
        total,
        td: td.loss,
        nll,
        l2,
        q_grads: td.grads,
        policy_grads: pnet.net.backward(&cache, g.view())?,
    })
}

/// Greedy action of a Q-network; ties go to the lowest index.
pub fn greedy_action(qnet: &DenseNetwork, state: &[f64]) -> Result<ActionIndex> {
    let q = qnet.predict(state)?;
    ActionIndex::new(crate::nn::argmax(&q))
}

/// Greedy actions for every row of `states`.
pub fn greedy_actions(qnet: &DenseNetwork, states: ArrayView2<f64>) -> Result<Vec<usize>> {
    let q = qnet.predict_batch(states)?;
    Ok(q.axis_iter(Axis(0)).map(argmax_row).collect())
}

/// Trains on the 343-action ventilation space.
pub fn train(data: &Transitions, cfg: &AgentConfig) -> Result<TrainedAgent> {
    train_sized(data, N_ACTIONS, cfg)
}

/// Trains with an arbitrary action count (used for small tabular problems).
///
/// Seeds: the Q-network from `derive_seed(seed, 0)`, the probability net from
/// `derive_seed(seed, 1)`, batch sampling from `derive_seed(seed, 2)`. Agents
/// sharing a seed therefore see identical batches and identical Q
/// initialisations.
pub fn train_sized(data: &Transitions, n_actions: usize, cfg: &AgentConfig) -> Result<TrainedAgent> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training split has no transitions".into()));
    }
    data.check_actions(n_actions)?;
    let dim = data.state_dim();
    if dim == 0 {
        return Err(Error::Shape("states have no features".into()));
    }
    let alg = cfg.algorithm;
    let sizes = cfg.layer_sizes(dim, n_actions);
    let mut q = if alg.uses_q() {
        Some(QNetworkPair::new(&sizes, derive_seed(cfg.seed, 0), cfg.sync_interval)?)
    } else {
        None
    };
    let mut policy = if alg.uses_policy_net() {
        Some(PolicyNet::new(&sizes, derive_seed(cfg.seed, 1))?)
    } else {
        None
    };
    let mut q_opt = q.as_ref().map(|p| AdamState::new(&p.prediction));
    let mut p_opt = policy.as_ref().map(|p| AdamState::new(&p.net));
    let mut rng = seeded(derive_seed(cfg.seed, 2));
    let mut history = TrainingHistory {
        steps: Vec::with_capacity(cfg.max_steps),
    };
    let n = data.len();
    let mut idx = vec![0usize; cfg.batch_size];

    for step in 0..cfg.max_steps {
        for slot in idx.iter_mut() {
            *slot = rng.random_range(0..n);
        }
        let batch = data.select(&idx);
        let mut rec = StepLosses {
            step,
            ..StepLosses::default()
        };

        if let (Some(pair), Some(opt)) = (q.as_mut(), q_opt.as_mut()) {
            let next_pred = pair.prediction.predict_batch(batch.next_states.view())?;
            let next_tgt = pair.target.predict_batch(batch.next_states.view())?;
            let targets = targets_from_outputs(&batch, next_pred.view(), next_tgt.view(), cfg.gamma);
            let (qs, cache) = pair.prediction.forward_batch(batch.states.view())?;
            let (td, mut g) = td_output_grad(qs.view(), &batch.actions, &targets);
            rec.td = td;
            if alg == Algorithm::Cql {
                let (pen, gc) = cql_output_grad(qs.view(), &batch.actions, cfg.cql_weight);
                rec.cql = pen;
                g += &gc;
            }
            let loss = rec.td + rec.cql;
            if !loss.is_finite() || loss > DIVERGENCE_THRESHOLD {
                history.steps.push(StepLosses { total: loss, ..rec });
                return Err(Error::Divergence {
                    step,
                    loss,
                    history: Box::new(history),
                });
            }
            let grads = pair.prediction.backward(&cache, g.view())?;
            adam_step(&mut pair.prediction, &grads, opt, cfg.lr)?;
        }

        if let (Some(pnet), Some(opt)) = (policy.as_mut(), p_opt.as_mut()) {
            let (logits, cache) = pnet.net.forward_batch(batch.states.view())?;
            let (nll, mut g) = nll_output_grad(logits.view(), &batch.actions);
            rec.nll = nll;
            if alg == Algorithm::ConformalDqn {
                let (l2, g2) = l2_output_grad(logits.view(), cfg.logit_l2_coeff);
                rec.l2 = l2;
                g += &g2;
            }
            let loss = rec.td + rec.cql + rec.nll + rec.l2;
            if !loss.is_finite() || loss > DIVERGENCE_THRESHOLD {
                history.steps.push(StepLosses { total: loss, ..rec });
                return Err(Error::Divergence {
                    step,
                    loss,
                    history: Box::new(history),
                });
            }
            let grads = pnet.net.backward(&cache, g.view())?;
            adam_step(&mut pnet.net, &grads, opt, cfg.lr)?;
        }

        if let Some(pair) = q.as_mut() {
            if (step + 1) % cfg.sync_interval == 0 {
                pair.sync()?;
            }
        }
        rec.total = rec.td + rec.cql + rec.nll + rec.l2;
        history.steps.push(rec);
    }

    Ok(TrainedAgent {
        config: cfg.clone(),
        q,
        policy,
        history,
    })
}
