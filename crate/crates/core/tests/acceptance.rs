//! Acceptance suite. Every check prints one `PASS`/`FAIL` line straight to
//! stdout (bypassing the harness capture) and then asserts.

mod common;

use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use common::*;
use confdqn::agents::{
    composite_loss, cql_penalty_from_table, cql_penalty_grad, greedy_action, nll_loss, td_loss, train,
    train_sized, AgentConfig, Algorithm, PolicyNet, QNetworkPair,
};
use confdqn::config::RunConfig;
use confdqn::conformal::{
    calibrate, confident_set, empirical_coverage, retune_threshold, select_from, CalibrationResult,
    ConformalPolicy,
};
use confdqn::eval::{fqe_train, mean_max_q, mean_selected_q, FnPolicy};
use confdqn::mdp::action::{decode_index, encode_action, N_ACTIONS};
use confdqn::mdp::episode::{initial_states, Transitions};
use confdqn::nn::DenseNetwork;
use confdqn::pipeline::{
    calibrate_runs, evaluate_runs, gen_data, load_agent, train_algorithm, write_report, Dataset, Layout,
};
use confdqn::rng::seeded;
use ndarray::{Array1, Array2};
use rand::Rng;

/// Pipeline checks run one at a time so their wall-clock budgets are not
/// shared with each other.
static HEAVY: Mutex<()> = Mutex::new(());

fn heavy() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, name: &str, ok: bool, detail: String, started: Instant) {
    let line = format!(
        "{} [{id:>2}] {name}: {detail} ({:.1} s)\n",
        if ok { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(ok, "{}", line.trim_end());
}

/// `α = m/1000`; the rank `⌈(n+1)(1−α)⌉` computed in integers.
fn rank_oracle(n: usize, milli_alpha: u64) -> usize {
    ((n as u64 + 1) * (1000 - milli_alpha)).div_ceil(1000) as usize
}

#[test]
fn a01_quantile_exactness() {
    let t = Instant::now();
    let mut rng = seeded(1);
    let mut checked = 0;
    let mut mismatches = Vec::new();
    for n in 1..=500usize {
        // Coarse grid so duplicate scores occur as well.
        let scores: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.3) { rng.random_range(0..20) as f64 / 20.0 } else { rng.random() })
            .collect();
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for m in [10u64, 50, 100, 150, 250, 500] {
            let k = rank_oracle(n, m);
            let expected = if k > n { 1.0 } else { sorted[k - 1] };
            let got = CalibrationResult::from_scores(scores.clone(), m as f64 / 1000.0).unwrap().tau;
            if got.to_bits() != expected.to_bits() {
                mismatches.push((n, m));
            }
            checked += 1;
        }
    }
    verdict(
        1,
        "quantile exactness",
        mismatches.is_empty() && t.elapsed().as_secs_f64() < 5.0,
        format!("{checked} (n, alpha) cases, {} mismatches {:?}", mismatches.len(), &mismatches[..mismatches.len().min(5)]),
        t,
    );
}

fn coverage_config(out: &Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        n_runs: 1,
        out_dir: out.to_path_buf(),
        algorithms: vec![Algorithm::ConformalDqn],
        ..RunConfig::default()
    };
    cfg.sim.seed = seed;
    cfg.agents.conformal_dqn.hidden = Some(vec![32, 32]);
    cfg.agents.conformal_dqn.max_steps = Some(1000);
    cfg.agents.conformal_dqn.sync_interval = Some(500);
    cfg
}

#[test]
fn a02_coverage_of_logged_actions() {
    let _guard = heavy();
    let t = Instant::now();
    let mut rows = Vec::new();
    let mut hits = 0;
    for seed in 0..20 {
        let dir = tempfile::tempdir().unwrap();
        let cfg = coverage_config(dir.path(), seed);
        assert_eq!(cfg.sim.n_patients, 10_000);
        assert_eq!(cfg.agent_config(Algorithm::ConformalDqn, 0).alpha, 0.15);
        gen_data(&cfg).unwrap();
        train_algorithm(&cfg, Algorithm::ConformalDqn).unwrap();
        calibrate_runs(&cfg).unwrap();
        let layout = Layout::new(&cfg);
        let agent = load_agent(&layout.run_dir(Algorithm::ConformalDqn, 0)).unwrap();
        let cal = CalibrationResult::load(&layout.calibration(0)).unwrap();
        let test = Dataset::open(&cfg).unwrap().transitions("test").unwrap();
        let cov = empirical_coverage(agent.policy_net().unwrap(), cal.tau, test.states.view(), &test.actions).unwrap();
        let ok = cov >= 0.85 - 0.025 && test.len() >= 2000;
        hits += ok as usize;
        rows.push(format!("{cov:.3}/{}", test.len()));
    }
    verdict(
        2,
        "coverage",
        hits >= 18 && t.elapsed().as_secs_f64() < 600.0,
        format!("{hits}/20 seeds with coverage >= 0.825 and n_test >= 2000 [{}]", rows.join(" ")),
        t,
    );
}

const SIZES: [usize; 4] = [5, 8, 6, 7];

fn small_net(seed: u64) -> DenseNetwork {
    let mut n = DenseNetwork::new(&SIZES, seed).unwrap();
    let mut rng = seeded(seed ^ 0xb1a5);
    let p: Vec<f64> = n.flat_params().iter().map(|_| rng.random_range(-0.6..0.6)).collect();
    n.set_flat_params(&p).unwrap();
    n
}

fn with_params(net: &DenseNetwork, p: &[f64]) -> DenseNetwork {
    let mut n = net.clone();
    n.set_flat_params(p).unwrap();
    n
}

fn small_batch(seed: u64, n: usize) -> Transitions {
    let mut rng = seeded(seed);
    let mut m = |r: usize| Array2::from_shape_simple_fn((r, SIZES[0]), || rng.random_range(-2.0..2.0));
    let (states, next) = (m(n), m(n));
    let mut rng = seeded(seed + 1000);
    Transitions::new(
        states,
        (0..n).map(|_| rng.random_range(0..SIZES[3])).collect(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        next,
        vec![0; n],
        (0..n).map(|i| i % 4 == 0).collect(),
    )
    .unwrap()
}

#[test]
fn a03_gradient_checks() {
    let t = Instant::now();
    let (h, gamma, coeff) = (1e-6, 0.75, 1e-3);
    let mut worst: [f64; 5] = [0.0; 5];
    for seed in 0..10 {
        let b = small_batch(seed, 16);
        let pair = QNetworkPair::from_networks(small_net(seed), small_net(seed + 77), 10).unwrap();
        let pnet = PolicyNet::from_network(small_net(seed + 5));
        let q_with = |p: &[f64]| {
            let mut q = pair.clone();
            q.prediction = with_params(&pair.prediction, p);
            q
        };
        let qp = pair.prediction.flat_params();
        let pp = pnet.net.flat_params();

        let td = td_loss(&b, &pair, gamma).unwrap().grads.flatten();
        let n = numeric_gradient(&qp, h, |p| td_loss(&b, &q_with(p), gamma).unwrap().loss);
        worst[0] = worst[0].max(relative_error(&td, &n));

        let nll = nll_loss(b.states.view(), &b.actions, &pnet).unwrap().grads.flatten();
        let n = numeric_gradient(&pp, h, |p| {
            nll_loss(b.states.view(), &b.actions, &PolicyNet::from_network(with_params(&pnet.net, p))).unwrap().loss
        });
        worst[1] = worst[1].max(relative_error(&nll, &n));

        let cql = cql_penalty_grad(b.states.view(), &b.actions, &pair.prediction, 0.1).unwrap().grads.flatten();
        let n = numeric_gradient(&qp, h, |p| {
            cql_penalty_grad(b.states.view(), &b.actions, &with_params(&pair.prediction, p), 0.1).unwrap().loss
        });
        worst[2] = worst[2].max(relative_error(&cql, &n));

        let c = composite_loss(&b, &pair, &pnet, gamma, coeff).unwrap();
        let nq = numeric_gradient(&qp, h, |p| composite_loss(&b, &q_with(p), &pnet, gamma, coeff).unwrap().total);
        let np = numeric_gradient(&pp, h, |p| {
            let pn = PolicyNet::from_network(with_params(&pnet.net, p));
            composite_loss(&b, &pair, &pn, gamma, coeff).unwrap().total
        });
        worst[3] = worst[3].max(relative_error(&c.q_grads.flatten(), &nq));
        worst[4] = worst[4].max(relative_error(&c.policy_grads.flatten(), &np));
    }
    verdict(
        3,
        "gradient checks",
        worst.iter().all(|&e| e < 1e-4) && t.elapsed().as_secs_f64() < 30.0,
        format!(
            "max relative error td {:.1e}, nll {:.1e}, cql {:.1e}, composite Q {:.1e}, composite P {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
        t,
    );
}

#[test]
fn a04_tabular_oracles() {
    let t = Instant::now();
    let mdps = separable_mdps(25, 0.03);
    let mut wrong_actions = 0;
    let mut fqe_err: f64 = 0.0;
    for (i, mdp) in mdps.iter().enumerate() {
        let vi = mdp.value_iteration();
        let optimal: Vec<usize> = vi.iter().map(|r| argmax(r)).collect();
        let agent = train_sized(&mdp.dataset(None), mdp.n_actions, &tabular_ddqn(i as u64)).unwrap();
        for s in 0..mdp.n_states {
            let a = greedy_action(agent.qnet().unwrap(), &one_hot(mdp.n_states, s)).unwrap().get();
            wrong_actions += (a != optimal[s]) as usize;
        }

        // A deliberately suboptimal policy so FQE is not just value iteration.
        let policy: Vec<usize> = (0..mdp.n_states).map(|s| (s + i) % mdp.n_actions).collect();
        let p = policy.clone();
        let model = fqe_train(
            &FnPolicy(move |s: &[f64]| p[argmax(s)]),
            &mdp.dataset(Some(&policy)),
            mdp.n_actions,
            &tabular_fqe(i as u64),
        )
        .unwrap();
        let exact = mdp.policy_evaluation(&policy);
        for s in 0..mdp.n_states {
            let st = Array2::from_shape_vec((1, mdp.n_states), one_hot(mdp.n_states, s)).unwrap();
            for a in 0..mdp.n_actions {
                fqe_err = fqe_err.max((model.values(st.view(), &[a]).unwrap()[0] - exact[s][a]).abs());
            }
        }
    }
    verdict(
        4,
        "tabular oracles",
        wrong_actions == 0 && fqe_err < 1e-2 && t.elapsed().as_secs_f64() < 120.0,
        format!("25 MDPs: {wrong_actions} non-optimal DDQN actions, max FQE error {fqe_err:.2e}"),
        t,
    );
}

#[test]
fn a05_cql_non_negativity_and_closed_form() {
    let t = Instant::now();
    let omega = 0.1;
    let mut rng = seeded(5);
    let mut min_penalty = f64::INFINITY;
    let mut max_dev: f64 = 0.0;
    for _ in 0..1000 {
        let rows = rng.random_range(1..6);
        let scale = rng.random_range(0.01..20.0);
        let mut q = Array2::from_shape_simple_fn((rows, N_ACTIONS), || rng.random_range(-scale..scale));
        let actions: Vec<usize> = (0..rows).map(|_| rng.random_range(0..N_ACTIONS)).collect();
        if rng.random_bool(0.3) {
            // Logged action dominates, pushing the penalty towards zero.
            for (i, &a) in actions.iter().enumerate() {
                q[[i, a]] += 40.0 * scale;
            }
        }
        min_penalty = min_penalty.min(cql_penalty_from_table(q.view(), &actions, omega).unwrap());

        let c = rng.random_range(-5.0..5.0);
        let flat = Array2::from_elem((rows, N_ACTIONS), c);
        let closed = omega * (N_ACTIONS as f64).ln();
        max_dev = max_dev.max((cql_penalty_from_table(flat.view(), &actions, omega).unwrap() - closed).abs());
    }
    verdict(
        5,
        "CQL non-negativity and closed form",
        min_penalty >= 0.0 && max_dev <= 1e-9 && t.elapsed().as_secs_f64() < 5.0,
        format!("min penalty {min_penalty:.3e}, max deviation from 0.1 ln 343 {max_dev:.1e}"),
        t,
    );
}

#[test]
fn a06_selection_semantics_and_codec() {
    let t = Instant::now();
    let mut rng = seeded(6);
    let (mut violations, mut filtered, mut fallback) = (0, 0, 0);
    for _ in 0..10_000 {
        let temp: f64 = rng.random_range(0.05..8.0);
        let w: Vec<f64> = (0..N_ACTIONS).map(|_| (rng.random_range(-1.0f64..1.0) * temp).exp()).collect();
        let total: f64 = w.iter().sum();
        let probs = Array1::from_iter(w.iter().map(|x| x / total));
        let q = Array1::from_shape_fn(N_ACTIONS, |_| rng.random_range(-1.0..1.0));
        // Half the thresholds are drawn so that the set is guaranteed non-empty.
        let max_p = probs.iter().cloned().fold(0.0, f64::max);
        let tau = if rng.random_bool(0.5) { rng.random_range(0.0..1.0) } else { 1.0 - max_p * rng.random::<f64>() };
        let chosen = select_from(q.view(), probs.view(), tau);

        let set: Vec<usize> = (0..N_ACTIONS).filter(|&a| 1.0 - probs[a] <= tau).collect();
        let pool = if set.is_empty() {
            fallback += 1;
            (0..N_ACTIONS).collect()
        } else {
            filtered += 1;
            set
        };
        let best = pool.iter().map(|&a| q[a]).fold(f64::NEG_INFINITY, f64::max);
        if !pool.contains(&chosen) || q[chosen] != best {
            violations += 1;
        }
        if confident_set(probs.as_slice().unwrap(), tau) != (0..N_ACTIONS).filter(|&a| 1.0 - probs[a] <= tau).collect::<Vec<_>>() {
            violations += 1;
        }
    }
    let codec_ok = (0..N_ACTIONS).all(|i| {
        let triple = decode_index(i).unwrap();
        let [vt, peep, fio2] = triple.components();
        encode_action(triple).unwrap().get() == i && i == vt as usize * 49 + peep as usize * 7 + fio2 as usize
    });
    verdict(
        6,
        "selection semantics and codec",
        violations == 0 && codec_ok && filtered > 0 && fallback > 0 && t.elapsed().as_secs_f64() < 5.0,
        format!(
            "10000 triples ({filtered} with a non-empty set, {fallback} empty): {violations} violations; codec bijective: {codec_ok}"
        ),
        t,
    );
}

fn desk_config(out: &Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.seed = seed;
    cfg.sim.seed = seed;
    cfg.out_dir = out.to_path_buf();
    cfg
}

#[test]
fn a07_ood_conservatism() {
    let _guard = heavy();
    let t = Instant::now();
    let (mut ddqn, mut conformal, mut cql) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..5 {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = desk_config(dir.path(), seed);
        cfg.n_runs = 1;
        cfg.sim.n_patients = 3000;
        cfg.sim.expert_noise = 0.05;
        cfg.algorithms = vec![Algorithm::Cql, Algorithm::ConformalDqn, Algorithm::Ddqn];
        gen_data(&cfg).unwrap();
        for alg in cfg.algorithms_sorted() {
            train_algorithm(&cfg, alg).unwrap();
        }
        calibrate_runs(&cfg).unwrap();
        let data = Dataset::open(&cfg).unwrap();
        let ood = initial_states(&data.episodes("ood").unwrap(), Some(&data.standardizer)).unwrap();
        let layout = Layout::new(&cfg);
        let agent = |alg| load_agent(&layout.run_dir(alg, 0)).unwrap();
        ddqn.push(mean_max_q(agent(Algorithm::Ddqn).qnet().unwrap(), ood.view()).unwrap());
        cql.push(mean_max_q(agent(Algorithm::Cql).qnet().unwrap(), ood.view()).unwrap());
        let c = agent(Algorithm::ConformalDqn);
        let tau = CalibrationResult::load(&layout.calibration(0)).unwrap().tau;
        let policy = ConformalPolicy::new(c.qnet().unwrap().clone(), c.policy_net().unwrap().clone(), tau).unwrap();
        conformal.push(mean_selected_q(&policy, ood.view()).unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (d, c, q) = (mean(&ddqn), mean(&conformal), mean(&cql));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    verdict(
        7,
        "OOD conservatism",
        d > c && c <= 1.05 && q <= 1.05 && t.elapsed().as_secs_f64() < 1800.0,
        format!(
            "5 seeds, mean OOD Q: ddqn max {d:.3} [{}], conformal selected {c:.3} [{}], cql max {q:.3} [{}]",
            fmt(&ddqn),
            fmt(&conformal),
            fmt(&cql)
        ),
        t,
    );
}

#[test]
fn a08_mortality_correlation_sign() {
    let _guard = heavy();
    let t = Instant::now();
    let mut rs = Vec::new();
    for seed in 0..5 {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = desk_config(dir.path(), seed);
        cfg.n_runs = 1;
        cfg.algorithms = vec![Algorithm::ConformalDqn];
        gen_data(&cfg).unwrap();
        train_algorithm(&cfg, Algorithm::ConformalDqn).unwrap();
        calibrate_runs(&cfg).unwrap();
        let (report, _) = evaluate_runs(&cfg).unwrap();
        let r = report.policy("conformal_dqn").unwrap().runs[0].mortality_correlation.unwrap();
        rs.push(r);
    }
    let negative = rs.iter().filter(|&&r| r < -0.1).count();
    verdict(
        8,
        "mortality correlation sign",
        negative >= 4 && t.elapsed().as_secs_f64() < 600.0,
        format!(
            "{negative}/5 seeds with r < -0.1 [{}]",
            rs.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(" ")
        ),
        t,
    );
}

#[test]
fn a09_nestedness_and_retuning() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = desk_config(dir.path(), 9);
    cfg.sim.n_patients = 600;
    gen_data(&cfg).unwrap();
    let data = Dataset::open(&cfg).unwrap();
    let train_set = data.transitions("train").unwrap();
    let bc = AgentConfig {
        hidden: vec![32],
        max_steps: 300,
        seed: 9,
        ..AgentConfig::new(Algorithm::Bc)
    };
    let pnet = train(&train_set, &bc).unwrap().policy.unwrap();
    let cal = data.transitions("calibration").unwrap();

    let alphas = [0.05, 0.15, 0.3];
    let fresh: Vec<CalibrationResult> = alphas
        .iter()
        .map(|&a| calibrate(&pnet, cal.states.view(), &cal.actions, a).unwrap())
        .collect();
    let mut retune_ok = true;
    for from in &fresh {
        for (j, &a) in alphas.iter().enumerate() {
            let r = retune_threshold(from, a).unwrap();
            retune_ok &= r == fresh[j] && r.tau.to_bits() == fresh[j].tau.to_bits();
        }
    }

    let test = data.transitions("test").unwrap();
    let mut rng = seeded(90);
    let mut nested_violations = 0;
    for _ in 0..1000 {
        let row = rng.random_range(0..test.len());
        let probs = pnet.probabilities(test.states.row(row).as_slice().unwrap()).unwrap();
        let sets: Vec<Vec<usize>> = fresh.iter().map(|c| confident_set(&probs, c.tau)).collect();
        // Larger α gives a smaller threshold and so a subset.
        for w in sets.windows(2) {
            if !w[1].iter().all(|a| w[0].contains(a)) {
                nested_violations += 1;
            }
        }
    }
    let taus: Vec<f64> = fresh.iter().map(|c| c.tau).collect();
    verdict(
        9,
        "nestedness and retuning",
        nested_violations == 0 && retune_ok && t.elapsed().as_secs_f64() < 10.0,
        format!(
            "tau {:.4}/{:.4}/{:.4} for alpha 0.05/0.15/0.3, {nested_violations} nesting violations over 1000 states, retune exact: {retune_ok}",
            taus[0], taus[1], taus[2]
        ),
        t,
    );
}

fn full_pipeline(out: &Path) {
    let cfg = desk_config(out, 10);
    gen_data(&cfg).unwrap();
    for alg in cfg.algorithms_sorted() {
        train_algorithm(&cfg, alg).unwrap();
    }
    calibrate_runs(&cfg).unwrap();
    evaluate_runs(&cfg).unwrap();
    write_report(out).unwrap();
}

#[test]
fn a10_end_to_end_determinism() {
    let _guard = heavy();
    let t = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    full_pipeline(a.path());
    full_pipeline(b.path());
    let files = [
        "report.md",
        "eval/report.json",
        "eval/correlations.csv",
        "eval/values.csv",
        "eval/actions.csv",
        "eval/ood.csv",
        "eval/coverage.csv",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.path().join(f)).unwrap() != std::fs::read(b.path().join(f)).unwrap())
        .collect();
    verdict(
        10,
        "end-to-end determinism",
        differing.is_empty() && t.elapsed().as_secs_f64() < 1200.0,
        format!("{} report files compared, differing: {differing:?}", files.len()),
        t,
    );
}
