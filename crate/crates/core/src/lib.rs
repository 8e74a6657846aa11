//! Gridworld planning and Bayesian nonparametric subgoal inference.
//!
//! A warehouse agent pursues an ordered list of item subgoals before a
//! destination. This crate plans such paths, scores observed paths under
//! candidate subgoal sequences, infers the latent set of sequences from
//! multiple observations with a Dirichlet-process mixture (CRP Gibbs
//! sampling) alongside three baseline models, and simulates a
//! Worker-Helper collaboration task driven by the learned posteriors.

pub mod collab;
pub mod error;
pub mod experiments;
pub mod gridworld;
pub mod inference;
pub mod likelihood;
pub mod planner;

pub use collab::{
    Experiment2Config, HelperConfig, PosteriorSource, SubgoalStructure, TrialResult,
};
pub use error::{CoreError, Result};
pub use gridworld::{load_map, Action, Dest, GridMap, State};
pub use inference::{GibbsConfig, PosteriorTable};
pub use likelihood::{StateSequence, SubgoalSequence};
pub use planner::{PlannerConfig, PolicyMode, ValueCache};
