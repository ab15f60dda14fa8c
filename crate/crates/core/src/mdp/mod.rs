//! Ventilation MDP: state layout, factored actions, rewards, and dataset
//! preparation (imputation, splitting, OOD selection, file formats).

pub mod action;
pub mod episode;
pub mod features;
pub mod impute;
pub mod io;
pub mod ood;
pub mod reward;
pub mod split;

pub use action::{
    decode_action, decode_index, discretize_setting, encode_action, ActionIndex, ActionTriple,
    BinSpec, VentParameter, N_ACTIONS, N_LEVELS,
};
pub use episode::{
    initial_actions, initial_states, Episode, Standardizer, StateVector, Step, Transition,
    Transitions, HORIZON,
};
pub use features::{severity_score, FeatureSpec, AP_MAX, AP_MIN, FEATURES, N_FEATURES};
pub use impute::{impute, ImputationReport, ImputeConfig, ImputeStrategy};
pub use ood::{select_ood, OodSelection, DEFAULT_OOD_PERCENTILE};
pub use reward::{intermediate_reward, terminal_reward, DEFAULT_INTERMEDIATE_REWARD_WEIGHT};
pub use split::{split_patients, SplitCounts, SplitDataset, DEFAULT_SPLIT_RATIOS};
