use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use confdqn::agents::Algorithm;
use confdqn::config::RunConfig;
use confdqn::eval::FqeConfig;
use confdqn::mdp::io::write_episodes_binary;
use confdqn::pipeline::{EvalReport, Layout};

fn tiny(out: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        n_runs: 2,
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.sim.n_patients = 150;
    cfg.agents.set_all(|o| {
        o.hidden = Some(vec![16]);
        o.max_steps = Some(60);
        o.batch_size = Some(32);
        o.sync_interval = Some(20);
    });
    cfg.fqe = FqeConfig {
        iterations: 18,
        steps_per_iteration: 5,
        batch_size: 64,
        hidden: vec![8],
        ..FqeConfig::default()
    };
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn confdqn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_confdqn"))
        .args(args)
        .env_remove("CONFDQN_OUT")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = confdqn(args);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), &tiny(&out));
    let c = cfg.to_str().unwrap();

    let stdout = ok(&["gen-data", "-c", c]);
    assert!(stdout.contains("OOD:"), "{stdout}");
    let stdout = ok(&["train", "-c", c]);
    let order: Vec<usize> = ["bc", "conformal_dqn", "cql", "ddqn"]
        .iter()
        .map(|n| stdout.find(n).unwrap())
        .collect();
    assert!(order.windows(2).all(|w| w[0] < w[1]), "{stdout}");
    ok(&["calibrate", "-c", c]);
    ok(&["retune", "-c", c, "--alpha", "0.2"]);
    let stdout = ok(&["evaluate", "-c", c]);
    assert!(stdout.contains("physician") && stdout.contains("coverage"), "{stdout}");
    ok(&["report", "-c", c]);

    let report = EvalReport::load(&out.join("eval/report.json")).unwrap();
    assert_eq!(report.alpha, 0.2);
    assert_eq!(report.policies.len(), 5);
    assert!(out.join("report.md").exists());
    for f in ["correlations", "values", "actions", "ood", "coverage"] {
        assert!(out.join(format!("eval/{f}.csv")).exists(), "{f}");
    }
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.toml");
    assert_eq!(code(&confdqn(&["gen-data", "-c", missing.to_str().unwrap()])), 2);

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "version = 1\nn_runs = \"many\"\n").unwrap();
    assert_eq!(code(&confdqn(&["gen-data", "-c", bad.to_str().unwrap()])), 2);

    let unknown = dir.path().join("unknown.toml");
    fs::write(&unknown, "version = 1\nlearning_rate = 0.1\n").unwrap();
    assert_eq!(code(&confdqn(&["gen-data", "-c", unknown.to_str().unwrap()])), 2);

    let cfg = write_config(dir.path(), &tiny(&dir.path().join("out")));
    assert_eq!(code(&confdqn(&["calibrate", "-c", cfg.to_str().unwrap(), "--alpha", "1.5"])), 2);
}

#[test]
fn missing_artifacts_exit_with_six() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny(&dir.path().join("out")));
    let c = cfg.to_str().unwrap();
    for verb in ["train", "calibrate", "evaluate", "report"] {
        let o = confdqn(&[verb, "-c", c]);
        assert_eq!(code(&o), 6, "{verb}: {}", String::from_utf8_lossy(&o.stderr));
    }
    ok(&["gen-data", "-c", c]);
    assert_eq!(code(&confdqn(&["calibrate", "-c", c])), 6);
}

#[test]
fn corrupt_artifacts_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), &tiny(&out));
    let c = cfg.to_str().unwrap();
    ok(&["gen-data", "-c", c]);
    fs::write(out.join("data/manifest.json"), "{ not json").unwrap();
    assert_eq!(code(&confdqn(&["train", "-c", c])), 3);
}

#[test]
fn empty_calibration_split_exits_with_five() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let run = tiny(&out);
    let cfg = write_config(dir.path(), &run);
    let c = cfg.to_str().unwrap();
    ok(&["gen-data", "-c", c]);
    ok(&["train", "-c", c, "--algorithm", "conformal_dqn"]);
    write_episodes_binary(&Layout::new(&run).episodes("calibration"), &[]).unwrap();
    let o = confdqn(&["calibrate", "-c", c]);
    assert_eq!(code(&o), 5, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!Layout::new(&run).calibration(0).exists());
}

#[test]
fn divergence_exits_with_four_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut run = tiny(&out);
    run.agents.ddqn.lr = Some(1e6);
    run.agents.ddqn.max_steps = Some(400);
    let cfg = write_config(dir.path(), &run);
    let c = cfg.to_str().unwrap();
    ok(&["gen-data", "-c", c]);
    let o = confdqn(&["train", "-c", c, "--algorithm", "ddqn"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let runs = out.join("runs");
    let left: Vec<_> = fs::read_dir(&runs)
        .map(|d| d.map(|e| e.unwrap().file_name()).collect())
        .unwrap_or_default();
    assert!(left.is_empty(), "{left:?}");
    assert!(!Layout::new(&run).algorithm_dir(Algorithm::Ddqn).exists());
}

#[test]
fn out_flag_beats_environment_beats_config() {
    let dir = tempfile::tempdir().unwrap();
    let from_cfg = dir.path().join("cfg_out");
    let from_env = dir.path().join("env_out");
    let from_flag = dir.path().join("flag_out");
    let cfg = write_config(dir.path(), &tiny(&from_cfg));
    let c = cfg.to_str().unwrap();

    let run = |args: &[&str], env: Option<&Path>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_confdqn"));
        cmd.args(args).env_remove("CONFDQN_OUT");
        if let Some(e) = env {
            cmd.env("CONFDQN_OUT", e);
        }
        assert!(cmd.output().unwrap().status.success());
    };
    run(&["gen-data", "-c", c], None);
    assert!(from_cfg.join("data/manifest.json").exists());
    run(&["gen-data", "-c", c], Some(&from_env));
    assert!(from_env.join("data/manifest.json").exists());
    run(&["gen-data", "-c", c, "--out", from_flag.to_str().unwrap()], Some(&from_env));
    assert!(from_flag.join("data/manifest.json").exists());
}

#[test]
fn seed_flag_changes_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny(&dir.path().join("unused")));
    let c = cfg.to_str().unwrap();
    let data = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        ok(&["gen-data", "-c", c, "--seed", seed, "--out", out.to_str().unwrap()]);
        fs::read(out.join("data/train.cdqe")).unwrap()
    };
    let a = data("3", "a");
    assert_eq!(a, data("3", "b"));
    assert_ne!(a, data("4", "c"));
}
