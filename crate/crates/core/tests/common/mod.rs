#![allow(dead_code)]

use confdqn::agents::{AgentConfig, Algorithm};
use confdqn::eval::FqeConfig;
use confdqn::mdp::episode::Transitions;
use confdqn::rng::seeded;
use ndarray::Array2;
use rand::Rng;

pub const GAMMA: f64 = 0.75;
/// Transition probabilities are multiples of `1 / QUARTERS`, so a logged
/// dataset with `QUARTERS` copies per state-action pair is exact.
pub const QUARTERS: usize = 4;

/// Finite discounted MDP with deterministic rewards.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `next[s][a]` lists `QUARTERS` successor states (with repeats).
    pub next: Vec<Vec<Vec<usize>>>,
    pub reward: Vec<Vec<f64>>,
}

impl TabularMdp {
    pub fn random(seed: u64, max_states: usize, max_actions: usize) -> Self {
        let mut rng = seeded(seed);
        let n_states = rng.random_range(2..=max_states);
        let n_actions = rng.random_range(2..=max_actions);
        let next = (0..n_states)
            .map(|_| {
                (0..n_actions)
                    .map(|_| (0..QUARTERS).map(|_| rng.random_range(0..n_states)).collect())
                    .collect()
            })
            .collect();
        let reward = (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.random_range(-0.2..0.2)).collect())
            .collect();
        Self {
            n_states,
            n_actions,
            next,
            reward,
        }
    }

    pub fn prob(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.next[s][a].iter().filter(|&&x| x == s2).count() as f64 / QUARTERS as f64
    }

    /// Every `(s, a, s')` copy as a transition over one-hot states; the
    /// `next_actions` column is filled by `policy` when given.
    pub fn dataset(&self, policy: Option<&[usize]>) -> Transitions {
        let n = self.n_states * self.n_actions * QUARTERS;
        let mut states = Array2::zeros((n, self.n_states));
        let mut next_states = Array2::zeros((n, self.n_states));
        let (mut actions, mut rewards, mut next_actions) = (Vec::new(), Vec::new(), Vec::new());
        let mut row = 0;
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                for &s2 in &self.next[s][a] {
                    states[[row, s]] = 1.0;
                    next_states[[row, s2]] = 1.0;
                    actions.push(a);
                    rewards.push(self.reward[s][a]);
                    next_actions.push(policy.map(|p| p[s2]).unwrap_or(0));
                    row += 1;
                }
            }
        }
        Transitions::new(states, actions, rewards, next_states, next_actions, vec![false; n]).unwrap()
    }

    /// Optimal Q by value iteration to machine precision.
    pub fn value_iteration(&self) -> Vec<Vec<f64>> {
        let mut q = vec![vec![0.0; self.n_actions]; self.n_states];
        for _ in 0..500 {
            let v: Vec<f64> = q.iter().map(|r| r.iter().cloned().fold(f64::MIN, f64::max)).collect();
            q = self.backup(|s2| v[s2]);
        }
        q
    }

    /// Optimal Q by repeated sample-based Q-learning sweeps over the logged
    /// copies with a decaying step size.
    pub fn tabular_q_learning(&self) -> Vec<Vec<f64>> {
        let mut q = vec![vec![0.0; self.n_actions]; self.n_states];
        for sweep in 0..4000 {
            let lr = 1.0 / (1.0 + sweep as f64 / 20.0);
            for s in 0..self.n_states {
                for a in 0..self.n_actions {
                    for &s2 in &self.next[s][a] {
                        let max = q[s2].iter().cloned().fold(f64::MIN, f64::max);
                        let target = self.reward[s][a] + GAMMA * max;
                        q[s][a] += lr * (target - q[s][a]) / QUARTERS as f64;
                    }
                }
            }
        }
        q
    }

    fn backup(&self, v: impl Fn(usize) -> f64) -> Vec<Vec<f64>> {
        (0..self.n_states)
            .map(|s| {
                (0..self.n_actions)
                    .map(|a| {
                        let ev: f64 = self.next[s][a].iter().map(|&s2| v(s2)).sum::<f64>() / QUARTERS as f64;
                        self.reward[s][a] + GAMMA * ev
                    })
                    .collect()
            })
            .collect()
    }

    /// Exact `Q^π` from the linear system `(I − γ P_π) q = r`.
    pub fn policy_evaluation(&self, policy: &[usize]) -> Vec<Vec<f64>> {
        let (ns, na) = (self.n_states, self.n_actions);
        let m = ns * na;
        let idx = |s: usize, a: usize| s * na + a;
        let mut mat = vec![vec![0.0; m + 1]; m];
        for s in 0..ns {
            for a in 0..na {
                let i = idx(s, a);
                mat[i][i] += 1.0;
                for s2 in 0..ns {
                    mat[i][idx(s2, policy[s2])] -= GAMMA * self.prob(s, a, s2);
                }
                mat[i][m] = self.reward[s][a];
            }
        }
        let x = gauss_solve(mat);
        (0..ns).map(|s| (0..na).map(|a| x[idx(s, a)]).collect()).collect()
    }
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
pub fn gauss_solve(mut m: Vec<Vec<f64>>) -> Vec<f64> {
    let n = m.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap())
            .unwrap();
        m.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = m[r][col] / m[col][col];
                for c in col..=n {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    (0..n).map(|i| m[i][n] / m[i][i]).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Smallest gap between the best and second-best action over states.
pub fn min_action_gap(q: &[Vec<f64>]) -> f64 {
    q.iter()
        .map(|row| {
            let mut s = row.clone();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            s[0] - s[1]
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Draws MDPs until `count` have an optimal-action gap of at least `gap`.
pub fn separable_mdps(count: usize, gap: f64) -> Vec<TabularMdp> {
    let mut out = Vec::new();
    let mut seed = 0;
    while out.len() < count {
        let mdp = TabularMdp::random(seed, 6, 3);
        seed += 1;
        if min_action_gap(&mdp.value_iteration()) >= gap {
            out.push(mdp);
        }
    }
    out
}

/// Central finite-difference gradient of `f` at `params`.
pub fn numeric_gradient(params: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let plus = f(&p);
            p[i] = orig - h;
            let minus = f(&p);
            p[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Largest absolute difference divided by the largest numeric component,
/// which stays meaningful when individual components are near zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(1e-8f64, |m, x| m.max(x.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Linear Q-network on one-hot states: a table plus a per-action bias.
pub fn tabular_ddqn(seed: u64) -> AgentConfig {
    AgentConfig {
        lr: 3e-3,
        gamma: GAMMA,
        batch_size: 256,
        max_steps: 6000,
        sync_interval: 200,
        hidden: vec![],
        seed,
        ..AgentConfig::new(Algorithm::Ddqn)
    }
}

/// Full-batch FQE with intermediate rewards kept.
pub fn tabular_fqe(seed: u64) -> FqeConfig {
    FqeConfig {
        gamma: GAMMA,
        iterations: 40,
        steps_per_iteration: 200,
        lr: 1e-2,
        batch_size: usize::MAX,
        hidden: vec![],
        sparse_rewards: false,
        clip_targets: true,
        seed,
    }
}
