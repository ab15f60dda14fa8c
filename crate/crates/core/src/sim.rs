//! Synthetic ICU-ventilation episodes with known ground truth.
//!
//! # Latent patient model
//!
//! Each patient carries a severity `z ∈ [0, 1]`, a responsiveness
//! `r ∈ [r_min, 1]`, and `G` persistent traits. The initial severity is
//! heavy tailed in logit space:
//!
//! ```text
//! z₀ = logistic(μ + s·T₃),   T₃ ~ Student-t with 3 degrees of freedom
//! r  ~ U(r_min, 1)
//! trait_g ~ T₃ / √3
//! ```
//!
//! # Observation model
//!
//! With `σ` the observation noise and `ε ~ N(0, 1)` drawn per feature and
//! window:
//!
//! * severity feature `i` (see [`SEVERITY_TABLE`]):
//!   `x_i = ref_i + dir_i·scale_i·(BOUND·z + σ·ε)`
//! * `vent_hours`: `4·t` for window `t` (exact)
//! * every other feature `i`, assigned to trait group `g(i) = k mod G` where
//!   `k` is its position among the remaining features:
//!   `x_i = ref_i + scale_i·(±trait_g(i) + σ·ε)`, sign alternating with `k`
//!
//! At `σ = 0` the severity score is `AP = Σ w_i · BOUND · z`, strictly
//! increasing in `z`.
//!
//! # Dynamics
//!
//! With `d` the L1 distance between the applied and the ideal action and
//! `D` the tolerance:
//!
//! ```text
//! Δ = −help·r·(D + 1 − d)/(D + 1)        if d ≤ D
//! Δ = +harm·(d − D)/(18 − D)              otherwise
//! z' = clamp(z + Δ + η·ε, 0, 1)
//! ```
//!
//! The ideal action depends on the severity band `b = min(2, ⌊3z⌋)`:
//! `Vt = (2, 2, 1)[b]`, `PEEP = (0, 1, 3)[b]`, `FiO2 = (4, 5, 6)[b]`.
//!
//! # Outcome
//!
//! Death within 90 days is Bernoulli with probability
//! `logistic(k·(z_T − 0.5))` where `z_T` is the severity after the last window.
//!
//! # Seeding
//!
//! Patient `i` draws from `seeded(derive_seed(seed, i))`; its missingness mask
//! draws from `seeded(derive_seed(derive_seed(seed, i), 1))`, so the dynamics
//! do not depend on the missingness rates.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::action::{encode_action, ActionTriple, N_LEVELS};
use crate::mdp::episode::{Episode, StateVector, Step, HORIZON};
use crate::mdp::features::{
    feature_index, is_severity_feature, FEATURES, N_FEATURES, SEVERITY_BOUND, SEVERITY_TABLE,
    VENT_HOURS,
};
use crate::mdp::reward::{intermediate_reward, terminal_reward};
use crate::rng::{derive_seed, seeded, SeededRng};

pub const HOURS_PER_WINDOW: f64 = 4.0;
const MAX_DISTANCE: u32 = 3 * (N_LEVELS as u32 - 1);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_patients: usize,
    pub horizon: usize,
    /// Probability that the expert picks a uniformly random setting.
    pub expert_noise: f64,
    pub observation_noise: f64,
    pub dynamics_noise: f64,
    pub mortality_steepness: f64,
    pub intermediate_reward_weight: f64,
    /// Location `μ` of the initial severity in logit space.
    pub severity_location: f64,
    /// Scale `s` of the initial severity in logit space.
    pub severity_spread: f64,
    pub min_responsiveness: f64,
    pub trait_groups: usize,
    pub help: f64,
    pub harm: f64,
    pub tolerance: u32,
    /// Per-feature probability that a value is missing in a window.
    pub missing_rates: Vec<f64>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_patients: 10_000,
            horizon: HORIZON,
            expert_noise: 0.15,
            observation_noise: 0.15,
            dynamics_noise: 0.02,
            mortality_steepness: 8.0,
            intermediate_reward_weight: 0.5,
            severity_location: -0.40,
            severity_spread: 0.7,
            min_responsiveness: 0.2,
            trait_groups: 5,
            help: 0.03,
            harm: 0.08,
            tolerance: 2,
            missing_rates: default_missing_rates(),
            seed: 0,
        }
    }
}

/// Missingness per feature spanning every imputation regime: ten features
/// below 30%, seven between 30% and 95%, one above 95%, the rest complete.
pub fn default_missing_rates() -> Vec<f64> {
    let mut rates = vec![0.0; N_FEATURES];
    let set = |rates: &mut Vec<f64>, name: &str, r: f64| {
        rates[feature_index(name).expect("known feature")] = r;
    };
    for (name, r) in [
        ("urine_output", 0.10),
        ("iv_fluids", 0.08),
        ("potassium", 0.12),
        ("sodium", 0.10),
        ("chloride", 0.10),
        ("glucose", 0.15),
        ("bun", 0.12),
        ("hemoglobin", 0.10),
        ("wbc", 0.12),
        ("platelet", 0.10),
        ("magnesium", 0.45),
        ("calcium", 0.50),
        ("ionized_calcium", 0.70),
        ("bilirubin", 0.60),
        ("ptt", 0.40),
        ("pt", 0.40),
        ("inr", 0.40),
        ("carbon_dioxide", 0.97),
    ] {
        set(&mut rates, name, r);
    }
    rates
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.horizon != HORIZON {
            return bad(format!("horizon must be {HORIZON}, got {}", self.horizon));
        }
        if !(0.0..=1.0).contains(&self.expert_noise) {
            return bad(format!("expert_noise {} outside [0, 1]", self.expert_noise));
        }
        if !(self.observation_noise >= 0.0) || !(self.dynamics_noise >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if !(self.intermediate_reward_weight > 0.0) {
            return bad("intermediate_reward_weight must be positive".into());
        }
        if !(self.min_responsiveness > 0.0 && self.min_responsiveness <= 1.0) {
            return bad("min_responsiveness must lie in (0, 1]".into());
        }
        if self.trait_groups == 0 {
            return bad("trait_groups must be positive".into());
        }
        if self.tolerance >= MAX_DISTANCE {
            return bad(format!("tolerance must be below {MAX_DISTANCE}"));
        }
        if self.missing_rates.len() != N_FEATURES
            || self.missing_rates.iter().any(|r| !(0.0..=1.0).contains(r))
        {
            return bad(format!("missing_rates needs {N_FEATURES} entries in [0, 1]"));
        }
        if !self.mortality_steepness.is_finite() && self.mortality_steepness != f64::INFINITY {
            return bad("mortality_steepness must be a number".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientLatent {
    pub z: f64,
    pub responsiveness: f64,
    pub ideal_action: ActionTriple,
    pub traits: Vec<f64>,
    /// Index of the window this latent state describes.
    pub window: usize,
}

pub fn ideal_action_for(z: f64) -> ActionTriple {
    let band = ((3.0 * z).floor() as usize).min(2);
    ActionTriple {
        vt: [2, 2, 1][band],
        peep: [0, 1, 3][band],
        fio2: [4, 5, 6][band],
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Noise-free observation of a latent state plus Gaussian noise `σ·ε`.
pub fn observe(latent: &PatientLatent, sigma: f64, rng: &mut SeededRng) -> StateVector {
    let mut values = vec![0.0; N_FEATURES];
    for c in &SEVERITY_TABLE {
        let spec = FEATURES[c.feature];
        let eps: f64 = if sigma > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
        values[c.feature] =
            spec.reference + c.direction * spec.scale * (SEVERITY_BOUND * latent.z + sigma * eps);
    }
    values[VENT_HOURS] = HOURS_PER_WINDOW * latent.window as f64;
    let groups = latent.traits.len();
    let mut k = 0usize;
    for (i, spec) in FEATURES.iter().enumerate() {
        if i == VENT_HOURS || is_severity_feature(i) {
            continue;
        }
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let eps: f64 = if sigma > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
        values[i] = spec.reference + spec.scale * (sign * latent.traits[k % groups] + sigma * eps);
        k += 1;
    }
    StateVector::new(values).expect("44 features")
}

pub fn sample_patient(cfg: &SimConfig, rng: &mut SeededRng) -> (PatientLatent, StateVector) {
    let t3 = StudentT::new(3.0).expect("valid dof");
    let z = logistic(cfg.severity_location + cfg.severity_spread * t3.sample(rng)).clamp(0.0, 1.0);
    let responsiveness = if cfg.min_responsiveness >= 1.0 {
        1.0
    } else {
        rng.random_range(cfg.min_responsiveness..=1.0)
    };
    let traits = (0..cfg.trait_groups)
        .map(|_| t3.sample(rng) / 3f64.sqrt())
        .collect();
    let latent = PatientLatent {
        z,
        responsiveness,
        ideal_action: ideal_action_for(z),
        traits,
        window: 0,
    };
    let obs = observe(&latent, cfg.observation_noise, rng);
    (latent, obs)
}

/// Severity change before noise for `action` applied to `latent`.
pub fn severity_drift(latent: &PatientLatent, action: ActionTriple, cfg: &SimConfig) -> f64 {
    let d = action.distance(latent.ideal_action);
    let tol = cfg.tolerance;
    if d <= tol {
        -cfg.help * latent.responsiveness * (tol + 1 - d) as f64 / (tol + 1) as f64
    } else {
        cfg.harm * (d - tol) as f64 / (MAX_DISTANCE - tol) as f64
    }
}

pub fn step_dynamics(
    latent: &PatientLatent,
    action: ActionTriple,
    cfg: &SimConfig,
    rng: &mut SeededRng,
) -> (PatientLatent, StateVector) {
    let noise: f64 = if cfg.dynamics_noise > 0.0 {
        cfg.dynamics_noise * rng.sample::<f64, _>(StandardNormal)
    } else {
        0.0
    };
    let z = (latent.z + severity_drift(latent, action, cfg) + noise).clamp(0.0, 1.0);
    let next = PatientLatent {
        z,
        responsiveness: latent.responsiveness,
        ideal_action: ideal_action_for(z),
        traits: latent.traits.clone(),
        window: latent.window + 1,
    };
    let obs = observe(&next, cfg.observation_noise, rng);
    (next, obs)
}

/// Noisy expert: the ideal setting nudged by one level on one component, or
/// with probability `expert_noise` a uniformly random setting.
pub fn behavior_policy(latent: &PatientLatent, expert_noise: f64, rng: &mut SeededRng) -> ActionTriple {
    if rng.random::<f64>() < expert_noise {
        return ActionTriple {
            vt: rng.random_range(0..N_LEVELS as u8),
            peep: rng.random_range(0..N_LEVELS as u8),
            fio2: rng.random_range(0..N_LEVELS as u8),
        };
    }
    let mut c = latent.ideal_action.components();
    let which = rng.random_range(0..3usize);
    let up = rng.random::<bool>();
    let v = c[which] as i32 + if up { 1 } else { -1 };
    // reflect at the edges so the distance to the ideal stays exactly 1
    c[which] = if v < 0 {
        1
    } else if v >= N_LEVELS as i32 {
        N_LEVELS as u8 - 2
    } else {
        v as u8
    };
    ActionTriple::from_components(c).expect("in range")
}

pub fn death_probability(final_z: f64, steepness: f64) -> f64 {
    let x = final_z - 0.5;
    if x == 0.0 {
        return 0.5;
    }
    logistic(steepness * x)
}

/// Returns `true` when the patient dies within 90 days.
pub fn mortality_outcome(final_z: f64, steepness: f64, rng: &mut SeededRng) -> bool {
    rng.random::<f64>() < death_probability(final_z, steepness)
}

/// Full latent trajectory plus the complete observations; used by the
/// generator and by ground-truth policy comparisons.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub latents: Vec<PatientLatent>,
    pub observations: Vec<StateVector>,
    pub actions: Vec<ActionTriple>,
    pub died: bool,
}

/// Simulates one patient under `policy` (called with the current latent).
pub fn rollout<F>(cfg: &SimConfig, patient_seed: u64, mut policy: F) -> Rollout
where
    F: FnMut(&PatientLatent, &StateVector, &mut SeededRng) -> ActionTriple,
{
    let mut rng = seeded(patient_seed);
    let (mut latent, mut obs) = sample_patient(cfg, &mut rng);
    let mut latents = vec![latent.clone()];
    let mut observations = vec![obs.clone()];
    let mut actions = Vec::with_capacity(cfg.horizon);
    for _ in 0..cfg.horizon {
        let a = policy(&latent, &obs, &mut rng);
        let (next, next_obs) = step_dynamics(&latent, a, cfg, &mut rng);
        actions.push(a);
        latents.push(next.clone());
        observations.push(next_obs.clone());
        latent = next;
        obs = next_obs;
    }
    let died = mortality_outcome(latent.z, cfg.mortality_steepness, &mut rng);
    Rollout {
        latents,
        observations,
        actions,
        died,
    }
}

pub fn patient_seed(cfg: &SimConfig, index: usize) -> u64 {
    derive_seed(cfg.seed, index as u64)
}

pub fn generate_episode(cfg: &SimConfig, index: usize) -> Result<Episode> {
    let seed = patient_seed(cfg, index);
    let eps_b = cfg.expert_noise;
    let ro = rollout(cfg, seed, |latent, _, rng| behavior_policy(latent, eps_b, rng));
    let survived = !ro.died;
    let mut mask_rng = seeded(derive_seed(seed, 1));
    let mut steps = Vec::with_capacity(cfg.horizon);
    for t in 0..cfg.horizon {
        let done = t + 1 == cfg.horizon;
        let reward = if done {
            terminal_reward(survived)
        } else {
            intermediate_reward(
                ro.observations[t].values(),
                ro.observations[t + 1].values(),
                cfg.intermediate_reward_weight,
            )?
        };
        let mut state = ro.observations[t].clone();
        for (i, &rate) in cfg.missing_rates.iter().enumerate() {
            if rate > 0.0 && mask_rng.random::<f64>() < rate {
                state.set_missing(i);
            }
        }
        steps.push(Step {
            state,
            action: encode_action(ro.actions[t])?,
            reward,
            done,
        });
    }
    Ok(Episode {
        patient_id: index as u64,
        steps,
        survived_90d: survived,
    })
}

pub fn generate_dataset(cfg: &SimConfig) -> Result<Vec<Episode>> {
    cfg.validate()?;
    (0..cfg.n_patients).map(|i| generate_episode(cfg, i)).collect()
}
