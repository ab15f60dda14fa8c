mod common;

use common::*;
use confdqn::agents::{greedy_action, train_sized};
use confdqn::eval::{fqe_train, FnPolicy};
use ndarray::Array2;

#[test]
fn value_iteration_q_learning_and_linear_solve_agree() {
    for seed in 0..10 {
        let mdp = TabularMdp::random(seed, 6, 3);
        let vi = mdp.value_iteration();
        let ql = mdp.tabular_q_learning();
        for (a, b) in vi.iter().flatten().zip(ql.iter().flatten()) {
            assert!((a - b).abs() < 1e-3, "seed {seed}: {a} vs {b}");
        }
        let greedy: Vec<usize> = vi.iter().map(|r| argmax(r)).collect();
        let pe = mdp.policy_evaluation(&greedy);
        for (a, b) in vi.iter().flatten().zip(pe.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn ddqn_recovers_optimal_policy_on_five_state_chain() {
    // 0 → 1 → … → 4 under action 1 with reward 0.1 on reaching 4; action 0 stays.
    let mdp = TabularMdp {
        n_states: 5,
        n_actions: 2,
        next: (0..5)
            .map(|s| vec![vec![s; QUARTERS], vec![(s + 1).min(4); QUARTERS]])
            .collect(),
        reward: (0..5)
            .map(|s| vec![0.0, if s >= 3 { 0.1 } else { 0.0 }])
            .collect(),
    };
    let vi = mdp.value_iteration();
    assert!(min_action_gap(&vi) > 0.01);
    let agent = train_sized(&mdp.dataset(None), 2, &tabular_ddqn(7)).unwrap();
    for s in 0..5 {
        let a = greedy_action(agent.qnet().unwrap(), &one_hot(5, s)).unwrap().get();
        assert_eq!(a, argmax(&vi[s]), "state {s}");
    }
}

#[test]
fn ddqn_recovers_optimal_policy_on_random_mdps() {
    for (i, mdp) in separable_mdps(8, 0.03).iter().enumerate() {
        let agent = train_sized(&mdp.dataset(None), mdp.n_actions, &tabular_ddqn(i as u64)).unwrap();
        let vi = mdp.value_iteration();
        for s in 0..mdp.n_states {
            let a = greedy_action(agent.qnet().unwrap(), &one_hot(mdp.n_states, s)).unwrap().get();
            assert_eq!(a, argmax(&vi[s]), "mdp {i} state {s}");
        }
    }
}

fn fqe_error(mdp: &TabularMdp, policy: &[usize], seed: u64) -> f64 {
    let p = policy.to_vec();
    let model = fqe_train(
        &FnPolicy(move |s: &[f64]| p[argmax(s)]),
        &mdp.dataset(Some(policy)),
        mdp.n_actions,
        &tabular_fqe(seed),
    )
    .unwrap();
    let exact = mdp.policy_evaluation(policy);
    let mut err: f64 = 0.0;
    for s in 0..mdp.n_states {
        let st = Array2::from_shape_vec((1, mdp.n_states), one_hot(mdp.n_states, s)).unwrap();
        for a in 0..mdp.n_actions {
            err = err.max((model.values(st.view(), &[a]).unwrap()[0] - exact[s][a]).abs());
        }
    }
    err
}

#[test]
fn fqe_matches_exact_evaluation_on_two_state_mdp() {
    let mdp = TabularMdp {
        n_states: 2,
        n_actions: 2,
        next: vec![vec![vec![0, 0, 1, 1], vec![1; 4]], vec![vec![0; 4], vec![0, 1, 1, 1]]],
        reward: vec![vec![0.1, -0.05], vec![0.2, 0.0]],
    };
    assert!(fqe_error(&mdp, &[1, 0], 3) < 1e-2);
}

#[test]
fn fqe_matches_exact_evaluation_on_random_mdps() {
    for (i, mdp) in separable_mdps(8, 0.0).iter().enumerate() {
        let policy: Vec<usize> = (0..mdp.n_states).map(|s| (s + i) % mdp.n_actions).collect();
        let err = fqe_error(mdp, &policy, i as u64);
        assert!(err < 1e-2, "mdp {i}: {err}");
    }
}
