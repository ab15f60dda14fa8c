//! File-driven pipeline behind the command line verbs.
//!
//! Output layout under the run directory:
//!
//! ```text
//! data/{train,validation,calibration,test,ood}.<cdqe|csv>
//! data/manifest.json         split membership, OOD ids, imputation report
//! data/standardizer.json     feature scaling fitted on in-distribution train
//! runs/<algorithm>/run<r>/   agent.json, q.json, q_target.json, policy.json,
//!                            history.csv, calibration.json
//! eval/report.json           aggregated metrics
//! eval/{correlations,values,actions,ood,coverage}.csv
//! report.md                  consolidated summary
//! ```
//!
//! Split files hold in-distribution patients only; OOD patients from every
//! split go to `ood`. Directories are assembled under a temporary name and
//! renamed into place, so a failed command leaves no partial output.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{train, Algorithm, AgentConfig, PolicyNet, QNetworkPair, TrainedAgent, TrainingHistory};
use crate::conformal::{calibrate, empirical_coverage, retune_threshold, CalibrationResult, ConformalPolicy};
use crate::config::{EpisodeFormat, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{
    fqe_train, fqe_train_logged, histogram_actions, mean_max_q, mean_selected_q, mean_std, mortality_correlation,
    ActionHistograms, ClonedPolicy, GreedyPolicy, OodRow, Policy, SurvivalBins,
};
use crate::io_util::{read_artifact, read_json, write_atomic, write_json};
use crate::mdp::action::N_ACTIONS;
use crate::mdp::episode::{initial_actions, initial_states, Episode, Standardizer, Transitions};
use crate::mdp::impute::{impute, ImputationReport};
use crate::mdp::io::{read_episodes_binary, read_episodes_csv, write_episodes_binary, write_episodes_csv};
use crate::mdp::ood::select_ood;
use crate::mdp::split::{split_patients, SplitCounts};
use crate::nn::DenseNetwork;
use crate::sim::generate_dataset;

pub const SPLITS: [&str; 4] = ["train", "validation", "calibration", "test"];
pub const PHYSICIAN: &str = "physician";
const MANIFEST_FORMAT: &str = "confdqn-manifest";
const AGENT_FORMAT: &str = "confdqn-agent";
const REPORT_FORMAT: &str = "confdqn-eval";
const FORMAT_VERSION: u32 = 1;

/// Paths of one run directory tree.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
    pub format: EpisodeFormat,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            root: cfg.out_dir.clone(),
            format: cfg.episode_format,
        }
    }

    pub fn at(root: impl Into<PathBuf>, format: EpisodeFormat) -> Self {
        Self {
            root: root.into(),
            format,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn episodes(&self, split: &str) -> PathBuf {
        self.data_dir().join(format!("{split}.{}", self.format.extension()))
    }

    pub fn manifest(&self) -> PathBuf {
        self.data_dir().join("manifest.json")
    }

    pub fn standardizer(&self) -> PathBuf {
        self.data_dir().join("standardizer.json")
    }

    pub fn algorithm_dir(&self, alg: Algorithm) -> PathBuf {
        self.root.join("runs").join(alg.name())
    }

    pub fn run_dir(&self, alg: Algorithm, run: usize) -> PathBuf {
        self.algorithm_dir(alg).join(format!("run{run}"))
    }

    pub fn calibration(&self, run: usize) -> PathBuf {
        self.run_dir(Algorithm::ConformalDqn, run).join("calibration.json")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn report_json(&self) -> PathBuf {
        self.eval_dir().join("report.json")
    }

    pub fn report_md(&self) -> PathBuf {
        self.root.join("report.md")
    }
}

fn temp_sibling(dir: &Path) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    dir.with_file_name(format!(".{name}.tmp{}", std::process::id()))
}

/// Builds a directory under a temporary name, then swaps it into place.
fn build_dir<T>(dir: &Path, fill: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    let tmp = temp_sibling(dir);
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    match fill(&tmp) {
        Ok(v) => {
            if dir.exists() {
                fs::remove_dir_all(dir)?;
            }
            fs::rename(&tmp, dir)?;
            Ok(v)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

fn write_episodes(path: &Path, format: EpisodeFormat, eps: &[Episode]) -> Result<()> {
    match format {
        EpisodeFormat::Binary => write_episodes_binary(path, eps),
        EpisodeFormat::Csv => write_episodes_csv(path, eps),
    }
}

fn read_episodes(path: &Path, format: EpisodeFormat) -> Result<Vec<Episode>> {
    match format {
        EpisodeFormat::Binary => read_episodes_binary(path),
        EpisodeFormat::Csv => read_episodes_csv(path),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<u64>,
    pub validation: Vec<u64>,
    pub calibration: Vec<u64>,
    pub test: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub format: String,
    pub version: u32,
    pub n_patients: usize,
    pub sim_seed: u64,
    pub episode_format: EpisodeFormat,
    /// Patients per split before OOD removal.
    pub split_counts: SplitCounts,
    /// In-distribution patients per split, as written to the split files.
    pub id_counts: SplitCounts,
    pub ood_count: usize,
    pub ood_fraction: f64,
    pub ood_percentile: f64,
    pub survival_rate: f64,
    pub splits: SplitIds,
    pub ood_ids: Vec<u64>,
    pub imputation: ImputationReport,
}

impl DataManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = read_json(path)?;
        if m.format != MANIFEST_FORMAT || m.version != FORMAT_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("expected {MANIFEST_FORMAT} v{FORMAT_VERSION}"),
            });
        }
        Ok(m)
    }
}

impl fmt::Display for DataManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.split_counts;
        let i = &self.id_counts;
        writeln!(f, "patients: {}  survival: {:.4}", self.n_patients, self.survival_rate)?;
        writeln!(
            f,
            "split (all):  train {}  validation {}  calibration {}  test {}",
            s.train, s.validation, s.calibration, s.test
        )?;
        writeln!(
            f,
            "split (ID):   train {}  validation {}  calibration {}  test {}",
            i.train, i.validation, i.calibration, i.test
        )?;
        write!(f, "OOD: {} patients ({:.4})", self.ood_count, self.ood_fraction)
    }
}

/// Simulates, imputes, flags OOD patients, splits and writes the dataset.
pub fn gen_data(cfg: &RunConfig) -> Result<DataManifest> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let raw = generate_dataset(&cfg.sim)?;
    let (episodes, imputation) = impute(&raw, &cfg.impute)?;
    drop(raw);
    let ood = select_ood(&episodes, cfg.ood_percentile)?;
    let split = split_patients(&episodes, cfg.split_ratios, cfg.split_seed())?;
    let survived = episodes.iter().filter(|e| e.survived_90d).count();

    let ids = |eps: &[Episode]| eps.iter().map(|e| e.patient_id).collect::<Vec<_>>();
    let keep_id = |eps: &[Episode]| eps.iter().filter(|e| !ood.is_ood(e.patient_id)).cloned().collect::<Vec<_>>();
    let parts: Vec<Vec<Episode>> = split.parts().iter().map(|(_, p)| keep_id(p)).collect();
    let ood_eps: Vec<Episode> = episodes.iter().filter(|e| ood.is_ood(e.patient_id)).cloned().collect();
    if parts[0].is_empty() {
        return Err(Error::UnderpopulatedSplit {
            split: "train",
            n_patients: episodes.len(),
        });
    }
    let standardizer = Standardizer::fit(&parts[0])?;

    let manifest = DataManifest {
        format: MANIFEST_FORMAT.into(),
        version: FORMAT_VERSION,
        n_patients: episodes.len(),
        sim_seed: cfg.sim.seed,
        episode_format: cfg.episode_format,
        split_counts: split.counts(),
        id_counts: SplitCounts {
            train: parts[0].len(),
            validation: parts[1].len(),
            calibration: parts[2].len(),
            test: parts[3].len(),
        },
        ood_count: ood.ood.len(),
        ood_fraction: ood.ood_fraction(),
        ood_percentile: cfg.ood_percentile,
        survival_rate: if episodes.is_empty() { 0.0 } else { survived as f64 / episodes.len() as f64 },
        splits: SplitIds {
            train: ids(&split.train),
            validation: ids(&split.validation),
            calibration: ids(&split.calibration),
            test: ids(&split.test),
        },
        ood_ids: ood.ood.clone(),
        imputation,
    };

    let data_dir = layout.data_dir();
    build_dir(&data_dir, |tmp| {
        let file = |split: &str| tmp.join(format!("{split}.{}", layout.format.extension()));
        for (name, eps) in SPLITS.iter().zip(&parts) {
            write_episodes(&file(name), layout.format, eps)?;
        }
        write_episodes(&file("ood"), layout.format, &ood_eps)?;
        write_json(&tmp.join("standardizer.json"), &standardizer)?;
        write_json(&tmp.join("manifest.json"), &manifest)?;
        Ok(())
    })?;
    Ok(manifest)
}

/// Loaded dataset with states already standardized.
pub struct Dataset {
    pub manifest: DataManifest,
    pub standardizer: Standardizer,
    pub layout: Layout,
}

impl Dataset {
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        let layout = Layout::new(cfg);
        let manifest = DataManifest::load(&layout.manifest())?;
        let standardizer: Standardizer = read_json(&layout.standardizer())?;
        let layout = Layout::at(layout.root, manifest.episode_format);
        Ok(Self {
            manifest,
            standardizer,
            layout,
        })
    }

    pub fn episodes(&self, split: &str) -> Result<Vec<Episode>> {
        read_episodes(&self.layout.episodes(split), self.layout.format)
    }

    pub fn transitions(&self, split: &str) -> Result<Transitions> {
        Transitions::from_episodes(&self.episodes(split)?, Some(&self.standardizer))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentManifest {
    pub format: String,
    pub version: u32,
    pub run: usize,
    pub config: AgentConfig,
    pub networks: Vec<String>,
    pub steps: usize,
    pub final_loss: Option<f64>,
}

/// Writes an agent's networks, config and loss history into `dir`.
pub fn save_agent(dir: &Path, agent: &TrainedAgent, run: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut networks = Vec::new();
    if let Some(q) = &agent.q {
        q.prediction.save(&dir.join("q.json"))?;
        q.target.save(&dir.join("q_target.json"))?;
        networks.extend(["q.json".to_string(), "q_target.json".to_string()]);
    }
    if let Some(p) = &agent.policy {
        p.net.save(&dir.join("policy.json"))?;
        networks.push("policy.json".into());
    }
    write_atomic(&dir.join("history.csv"), agent.history.to_csv().as_bytes())?;
    let manifest = AgentManifest {
        format: AGENT_FORMAT.into(),
        version: FORMAT_VERSION,
        run,
        config: agent.config.clone(),
        networks,
        steps: agent.history.len(),
        final_loss: agent.history.steps.last().map(|s| s.total),
    };
    write_json(&dir.join("agent.json"), &manifest)
}

pub fn load_agent(dir: &Path) -> Result<TrainedAgent> {
    let path = dir.join("agent.json");
    let m: AgentManifest = read_json(&path)?;
    if m.format != AGENT_FORMAT || m.version != FORMAT_VERSION {
        return Err(Error::Format {
            path,
            detail: format!("expected {AGENT_FORMAT} v{FORMAT_VERSION}"),
        });
    }
    let alg = m.config.algorithm;
    let q = if alg.uses_q() {
        Some(QNetworkPair::from_networks(
            DenseNetwork::load(&dir.join("q.json"))?,
            DenseNetwork::load(&dir.join("q_target.json"))?,
            m.config.sync_interval,
        )?)
    } else {
        None
    };
    let policy = if alg.uses_policy_net() {
        Some(PolicyNet::from_network(DenseNetwork::load(&dir.join("policy.json"))?))
    } else {
        None
    };
    let history = TrainingHistory::from_csv(&read_artifact(&dir.join("history.csv"))?)?;
    Ok(TrainedAgent {
        config: m.config,
        q,
        policy,
        history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub algorithm: Algorithm,
    pub runs: Vec<(usize, usize, Option<f64>)>,
}

impl fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (run, steps, loss)) in self.runs.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            match loss {
                Some(l) => write!(f, "{} run {run}: {steps} steps, final loss {l:.6}", self.algorithm)?,
                None => write!(f, "{} run {run}: {steps} steps", self.algorithm)?,
            }
        }
        Ok(())
    }
}

/// Trains `n_runs` seeds of one algorithm on the in-distribution train split.
pub fn train_algorithm(cfg: &RunConfig, alg: Algorithm) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = Dataset::open(cfg)?;
    let transitions = data.transitions("train")?;
    let layout = &data.layout;
    let alg_dir = layout.algorithm_dir(alg);
    build_dir(&alg_dir, |tmp| {
        let results: Vec<Result<(usize, usize, Option<f64>)>> = (0..cfg.n_runs)
            .into_par_iter()
            .map(|run| {
                let agent = train(&transitions, &cfg.agent_config(alg, run))?;
                save_agent(&tmp.join(format!("run{run}")), &agent, run)?;
                Ok((run, agent.history.len(), agent.history.steps.last().map(|s| s.total)))
            })
            .collect();
        let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(TrainSummary { algorithm: alg, runs })
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSummary {
    pub runs: Vec<(usize, usize, f64, f64)>,
}

impl fmt::Display for CalibrationSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (run, n, alpha, tau)) in self.runs.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "run {run}: n = {n}  alpha = {alpha}  tau = {tau:.6}")?;
        }
        Ok(())
    }
}

/// Calibrates every ConformalDQN run on the in-distribution calibration split.
pub fn calibrate_runs(cfg: &RunConfig) -> Result<CalibrationSummary> {
    cfg.validate()?;
    let data = Dataset::open(cfg)?;
    let cal = data.transitions("calibration")?;
    if cal.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let alpha = cfg.alpha();
    let mut runs = Vec::with_capacity(cfg.n_runs);
    for run in 0..cfg.n_runs {
        let path = data.layout.run_dir(Algorithm::ConformalDqn, run).join("policy.json");
        let pnet = PolicyNet::from_network(DenseNetwork::load(&path)?);
        let result = calibrate(&pnet, cal.states.view(), &cal.actions, alpha)?;
        result.save(&data.layout.calibration(run))?;
        runs.push((run, result.n, result.alpha, result.tau));
    }
    Ok(CalibrationSummary { runs })
}

/// Recomputes thresholds at a new significance level from stored scores.
pub fn retune_runs(cfg: &RunConfig, alpha: f64) -> Result<CalibrationSummary> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut runs = Vec::with_capacity(cfg.n_runs);
    for run in 0..cfg.n_runs {
        let path = layout.calibration(run);
        let result = retune_threshold(&CalibrationResult::load(&path)?, alpha)?;
        result.save(&path)?;
        runs.push((run, result.n, result.alpha, result.tau));
    }
    Ok(CalibrationSummary { runs })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        mean_std(values).ok().map(|(mean, std)| Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: usize,
    pub initial_value_mean: f64,
    pub initial_value_std: f64,
    pub mortality_correlation: Option<f64>,
    pub survival_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: String,
    pub initial_value: Stat,
    pub mortality_correlation: Option<Stat>,
    pub survival_pct: Stat,
    /// Level counts summed over runs.
    pub histograms: ActionHistograms,
    pub evaluated_states: u64,
    pub runs: Vec<RunMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodSummary {
    pub agent: String,
    pub statistic: String,
    pub id: Stat,
    pub ood: Stat,
    pub id_flag: bool,
    pub ood_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageAudit {
    pub run: usize,
    pub alpha: f64,
    pub tau: f64,
    /// Test transitions scored.
    pub n_test: usize,
    pub n_patients: usize,
    pub coverage: f64,
    pub target: f64,
    /// `3·√(α(1−α)/m)` with m test patients; transitions of one patient are
    /// correlated, so the patient count is the effective sample size.
    pub tolerance: f64,
    pub pass: bool,
}

impl CoverageAudit {
    pub fn new(run: usize, alpha: f64, tau: f64, n_test: usize, n_patients: usize, coverage: f64) -> Self {
        let target = 1.0 - alpha;
        let tolerance = 3.0 * (alpha * (1.0 - alpha) / n_patients.max(1) as f64).sqrt();
        Self {
            run,
            alpha,
            tau,
            n_test,
            n_patients,
            coverage,
            target,
            tolerance,
            pass: coverage >= target - tolerance,
        }
    }
}

impl fmt::Display for CoverageAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "coverage run {}: {:.4} vs 1 - alpha = {:.4} (tolerance {:.4}, {} transitions, {} patients) {}",
            self.run,
            self.coverage,
            self.target,
            self.tolerance,
            self.n_test,
            self.n_patients,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    pub n_runs: usize,
    pub alpha: f64,
    pub n_test_patients: usize,
    pub n_ood_patients: usize,
    pub observed_survival: f64,
    /// Sorted by policy name.
    pub policies: Vec<PolicySummary>,
    pub ood: Vec<OodSummary>,
    pub coverage: Vec<CoverageAudit>,
}

impl EvalReport {
    pub fn load(path: &Path) -> Result<Self> {
        let r: Self = read_json(path)?;
        if r.format != REPORT_FORMAT || r.version != FORMAT_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("expected {REPORT_FORMAT} v{FORMAT_VERSION}"),
            });
        }
        Ok(r)
    }

    pub fn policy(&self, name: &str) -> Option<&PolicySummary> {
        self.policies.iter().find(|p| p.policy == name)
    }
}

/// Test-time inputs shared by every policy of one evaluation.
struct EvalInputs {
    train: Transitions,
    test: Transitions,
    test_initial: Array2<f64>,
    test_initial_actions: Vec<usize>,
    test_died: Vec<bool>,
    test_survived: Vec<bool>,
    ood_initial: Array2<f64>,
}

enum Evaluated {
    Logged,
    Policy(Box<dyn Policy + Sync>),
}

struct PolicyRun {
    name: String,
    run: usize,
    initial_values: Vec<f64>,
    logged_initial_values: Vec<f64>,
    actions: Vec<usize>,
}

fn evaluate_policy(inputs: &EvalInputs, name: &str, run: usize, target: &Evaluated, cfg: &RunConfig) -> Result<PolicyRun> {
    let fqe_cfg = cfg.fqe_config(run);
    let (fqe, init_actions, actions) = match target {
        Evaluated::Logged => (
            fqe_train_logged(&inputs.train, N_ACTIONS, &fqe_cfg)?,
            inputs.test_initial_actions.clone(),
            inputs.test.actions.clone(),
        ),
        Evaluated::Policy(p) => (
            fqe_train(p.as_ref(), &inputs.train, N_ACTIONS, &fqe_cfg)?,
            p.act_batch(inputs.test_initial.view())?,
            p.act_batch(inputs.test.states.view())?,
        ),
    };
    let initial_values = fqe.values(inputs.test_initial.view(), &init_actions)?;
    let logged_initial_values = fqe.values(inputs.test_initial.view(), &inputs.test_initial_actions)?;
    Ok(PolicyRun {
        name: name.into(),
        run,
        initial_values,
        logged_initial_values,
        actions,
    })
}

fn loaded_algorithms(cfg: &RunConfig, layout: &Layout) -> Result<Vec<Algorithm>> {
    let algs: Vec<Algorithm> = cfg
        .algorithms_sorted()
        .into_iter()
        .filter(|a| layout.algorithm_dir(*a).is_dir())
        .collect();
    if algs.is_empty() {
        return Err(Error::MissingArtifact(layout.root.join("runs")));
    }
    Ok(algs)
}

/// Runs FQE for the logged policy and every trained agent, then aggregates
/// metrics over runs.
pub fn evaluate_runs(cfg: &RunConfig) -> Result<(EvalReport, Vec<String>)> {
    cfg.validate()?;
    let data = Dataset::open(cfg)?;
    let layout = data.layout.clone();
    let algs = loaded_algorithms(cfg, &layout)?;

    let test_eps = data.episodes("test")?;
    let ood_eps = data.episodes("ood")?;
    if test_eps.is_empty() {
        return Err(Error::Empty("in-distribution test split".into()));
    }
    let inputs = EvalInputs {
        train: data.transitions("train")?,
        test: Transitions::from_episodes(&test_eps, Some(&data.standardizer))?,
        test_initial: initial_states(&test_eps, Some(&data.standardizer))?,
        test_initial_actions: initial_actions(&test_eps),
        test_died: test_eps.iter().map(|e| !e.survived_90d).collect(),
        test_survived: test_eps.iter().map(|e| e.survived_90d).collect(),
        ood_initial: initial_states(&ood_eps, Some(&data.standardizer))?,
    };

    // Load every agent and calibration up front so missing artifacts fail fast.
    let mut jobs: Vec<(String, usize, Evaluated)> = Vec::new();
    let mut agents: Vec<(Algorithm, usize, TrainedAgent, Option<CalibrationResult>)> = Vec::new();
    for run in 0..cfg.n_runs {
        jobs.push((PHYSICIAN.into(), run, Evaluated::Logged));
        for &alg in &algs {
            let agent = load_agent(&layout.run_dir(alg, run))?;
            let cal = if alg == Algorithm::ConformalDqn {
                Some(CalibrationResult::load(&layout.calibration(run))?)
            } else {
                None
            };
            let policy: Box<dyn Policy + Sync> = match alg {
                Algorithm::Bc => Box::new(ClonedPolicy {
                    pnet: agent.policy_net()?.clone(),
                }),
                Algorithm::ConformalDqn => Box::new(ConformalPolicy::new(
                    agent.qnet()?.clone(),
                    agent.policy_net()?.clone(),
                    cal.as_ref().map(|c| c.tau).unwrap_or(1.0),
                )?),
                Algorithm::Ddqn | Algorithm::Cql => Box::new(GreedyPolicy {
                    qnet: agent.qnet()?.clone(),
                }),
            };
            jobs.push((alg.name().into(), run, Evaluated::Policy(policy)));
            agents.push((alg, run, agent, cal));
        }
    }

    let results: Vec<Result<PolicyRun>> = jobs
        .par_iter()
        .map(|(name, run, target)| evaluate_policy(&inputs, name, *run, target, cfg))
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    // Physician bins per run map policy values to observed survival.
    let mut bins = Vec::with_capacity(cfg.n_runs);
    for run in 0..cfg.n_runs {
        let phys = results
            .iter()
            .find(|r| r.name == PHYSICIAN && r.run == run)
            .expect("physician job per run");
        bins.push(SurvivalBins::fit(&phys.logged_initial_values, &inputs.test_survived, cfg.survival_bins)?);
    }

    let mut names: Vec<String> = results.iter().map(|r| r.name.clone()).collect();
    names.sort();
    names.dedup();
    let mut policies = Vec::with_capacity(names.len());
    for name in &names {
        let mut runs = Vec::new();
        let mut hist = ActionHistograms::default();
        for r in results.iter().filter(|r| &r.name == name) {
            let (mean, std) = mean_std(&r.initial_values)?;
            runs.push(RunMetrics {
                run: r.run,
                initial_value_mean: mean,
                initial_value_std: std,
                mortality_correlation: mortality_correlation(&r.logged_initial_values, &inputs.test_died).ok(),
                survival_pct: bins[r.run].map(mean),
            });
            hist.add(&histogram_actions(&r.actions)?);
        }
        runs.sort_by_key(|m| m.run);
        let col = |f: fn(&RunMetrics) -> f64| runs.iter().map(f).collect::<Vec<_>>();
        let corr: Vec<f64> = runs.iter().filter_map(|m| m.mortality_correlation).collect();
        policies.push(PolicySummary {
            policy: name.clone(),
            initial_value: Stat::of(&col(|m| m.initial_value_mean)).expect("at least one run"),
            mortality_correlation: Stat::of(&corr),
            survival_pct: Stat::of(&col(|m| m.survival_pct)).expect("at least one run"),
            evaluated_states: hist.total(),
            histograms: hist,
            runs,
        });
    }

    let mut ood_rows: Vec<(String, String, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut push_row = |agent: &str, stat: &str, id: f64, ood: f64| {
        match ood_rows.iter_mut().find(|r| r.0 == agent && r.1 == stat) {
            Some(r) => {
                r.2.push(id);
                r.3.push(ood);
            }
            None => ood_rows.push((agent.into(), stat.into(), vec![id], vec![ood])),
        }
    };
    let mut coverage = Vec::new();
    let mut lines = Vec::new();
    for (alg, run, agent, cal) in &agents {
        if let Ok(q) = agent.qnet() {
            if inputs.ood_initial.nrows() > 0 {
                push_row(
                    alg.name(),
                    "max_q",
                    mean_max_q(q, inputs.test_initial.view())?,
                    mean_max_q(q, inputs.ood_initial.view())?,
                );
            }
        }
        if let (Algorithm::ConformalDqn, Some(cal)) = (alg, cal) {
            let pol = ConformalPolicy::new(agent.qnet()?.clone(), agent.policy_net()?.clone(), cal.tau)?;
            if inputs.ood_initial.nrows() > 0 {
                push_row(
                    alg.name(),
                    "selected_q",
                    mean_selected_q(&pol, inputs.test_initial.view())?,
                    mean_selected_q(&pol, inputs.ood_initial.view())?,
                );
            }
            let cov = empirical_coverage(&pol.pnet, cal.tau, inputs.test.states.view(), &inputs.test.actions)?;
            let audit = CoverageAudit::new(*run, cal.alpha, cal.tau, inputs.test.len(), test_eps.len(), cov);
            lines.push(audit.to_string());
            coverage.push(audit);
        }
    }
    ood_rows.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
    let ood = ood_rows
        .into_iter()
        .map(|(agent, statistic, id, oo)| {
            let id = Stat::of(&id).expect("non-empty");
            let oo = Stat::of(&oo).expect("non-empty");
            let flags = OodRow::new(&agent, &statistic, id.mean, oo.mean);
            OodSummary {
                agent,
                statistic,
                id,
                ood: oo,
                id_flag: flags.id_flag,
                ood_flag: flags.ood_flag,
            }
        })
        .collect();

    // The stored calibrations win over the config once `retune` has run.
    let alpha = coverage.first().map_or(cfg.alpha(), |c| c.alpha);
    let report = EvalReport {
        format: REPORT_FORMAT.into(),
        version: FORMAT_VERSION,
        n_runs: cfg.n_runs,
        alpha,
        n_test_patients: test_eps.len(),
        n_ood_patients: ood_eps.len(),
        observed_survival: inputs.test_survived.iter().filter(|&&s| s).count() as f64 / test_eps.len() as f64,
        policies,
        ood,
        coverage,
    };
    build_dir(&layout.eval_dir(), |tmp| write_eval_files(tmp, &report))?;
    Ok((report, lines))
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_eval_files(dir: &Path, report: &EvalReport) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    let corr = report
        .policies
        .iter()
        .map(|p| {
            vec![
                p.policy.clone(),
                opt(p.mortality_correlation.map(|s| s.mean)),
                opt(p.mortality_correlation.map(|s| s.std)),
            ]
        })
        .collect();
    write_atomic(&dir.join("correlations.csv"), &csv_bytes(&["policy", "r_mean", "r_std"], corr)?)?;
    let values = report
        .policies
        .iter()
        .map(|p| {
            vec![
                p.policy.clone(),
                p.initial_value.mean.to_string(),
                p.initial_value.std.to_string(),
                p.survival_pct.mean.to_string(),
                p.survival_pct.std.to_string(),
            ]
        })
        .collect();
    write_atomic(
        &dir.join("values.csv"),
        &csv_bytes(&["policy", "value_mean", "value_std", "survival_pct_mean", "survival_pct_std"], values)?,
    )?;
    let mut actions = Vec::new();
    for p in &report.policies {
        for (dim, counts) in p.histograms.dimensions() {
            for (level, c) in counts.iter().enumerate() {
                actions.push(vec![p.policy.clone(), dim.to_string(), level.to_string(), c.to_string()]);
            }
        }
    }
    write_atomic(&dir.join("actions.csv"), &csv_bytes(&["policy", "dimension", "level", "count"], actions)?)?;
    let ood = report
        .ood
        .iter()
        .map(|o| {
            vec![
                o.agent.clone(),
                o.statistic.clone(),
                o.id.mean.to_string(),
                o.id.std.to_string(),
                o.ood.mean.to_string(),
                o.ood.std.to_string(),
                o.id_flag.to_string(),
                o.ood_flag.to_string(),
            ]
        })
        .collect();
    write_atomic(
        &dir.join("ood.csv"),
        &csv_bytes(
            &["agent", "statistic", "id_mean", "id_std", "ood_mean", "ood_std", "id_flag", "ood_flag"],
            ood,
        )?,
    )?;
    let cov = report
        .coverage
        .iter()
        .map(|c| {
            vec![
                c.run.to_string(),
                c.alpha.to_string(),
                c.tau.to_string(),
                c.n_test.to_string(),
                c.n_patients.to_string(),
                c.coverage.to_string(),
                c.target.to_string(),
                c.tolerance.to_string(),
                c.pass.to_string(),
            ]
        })
        .collect();
    write_atomic(
        &dir.join("coverage.csv"),
        &csv_bytes(&["run", "alpha", "tau", "n_test", "n_patients", "coverage", "target", "tolerance", "pass"], cov)?,
    )
}

fn pm(s: &Stat) -> String {
    format!("{:.3} ± {:.3}", s.mean, s.std)
}

/// Consolidated markdown summary of `eval/report.json`.
pub fn render_report(r: &EvalReport) -> String {
    let mut out = String::new();
    let mut line = |s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    line("# Evaluation summary".into());
    line(String::new());
    line(format!(
        "{} runs, alpha = {}, {} test patients (ID), {} OOD patients, observed survival {:.2}%.",
        r.n_runs,
        r.alpha,
        r.n_test_patients,
        r.n_ood_patients,
        100.0 * r.observed_survival
    ));
    line(String::new());
    line("## Mortality correlation of initial values".into());
    line(String::new());
    line("| policy | r |".into());
    line("|---|---|".into());
    for p in &r.policies {
        let v = p.mortality_correlation.as_ref().map(pm).unwrap_or_else(|| "undefined".into());
        line(format!("| {} | {v} |", p.policy));
    }
    line(String::new());
    line("## Initial-state values and mapped survival".into());
    line(String::new());
    line("| policy | mean initial value | survival % |".into());
    line("|---|---|---|".into());
    for p in &r.policies {
        line(format!(
            "| {} | {} | {:.2} ± {:.2} |",
            p.policy,
            pm(&p.initial_value),
            p.survival_pct.mean,
            p.survival_pct.std
        ));
    }
    line(String::new());
    line("## Action distribution (fraction per level 0..6)".into());
    line(String::new());
    line("| policy | setting | levels |".into());
    line("|---|---|---|".into());
    for p in &r.policies {
        let total = p.evaluated_states.max(1) as f64;
        for (dim, counts) in p.histograms.dimensions() {
            let cells: Vec<String> = counts.iter().map(|c| format!("{:.3}", *c as f64 / total)).collect();
            line(format!("| {} | {dim} | {} |", p.policy, cells.join(" ")));
        }
    }
    line(String::new());
    line("## Mean initial Q on in-distribution and OOD states".into());
    line(String::new());
    line("| agent | statistic | ID | OOD | above 1.0 |".into());
    line("|---|---|---|---|---|".into());
    for o in &r.ood {
        let flag = match (o.id_flag, o.ood_flag) {
            (false, false) => "no",
            (true, false) => "ID",
            (false, true) => "OOD",
            (true, true) => "ID, OOD",
        };
        line(format!("| {} | {} | {} | {} | {flag} |", o.agent, o.statistic, pm(&o.id), pm(&o.ood)));
    }
    if !r.coverage.is_empty() {
        line(String::new());
        line("## Coverage audit".into());
        line(String::new());
        for c in &r.coverage {
            line(format!("- {c}"));
        }
    }
    out
}

/// Writes `report.md` from the evaluation outputs.
pub fn write_report(out_dir: &Path) -> Result<PathBuf> {
    let layout = Layout::at(out_dir, EpisodeFormat::Binary);
    let report = EvalReport::load(&layout.report_json())?;
    for name in ["correlations.csv", "values.csv", "actions.csv", "ood.csv", "coverage.csv"] {
        let p = layout.eval_dir().join(name);
        if !p.is_file() {
            return Err(Error::MissingArtifact(p));
        }
    }
    let path = layout.report_md();
    write_atomic(&path, render_report(&report).as_bytes())?;
    Ok(path)
}

/// Number of rows per split file, for quick inspection.
pub fn split_sizes(data: &Dataset) -> Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    for s in SPLITS.iter().chain(&["ood"]) {
        out.push((s.to_string(), data.episodes(s)?.len()));
    }
    Ok(out)
}
