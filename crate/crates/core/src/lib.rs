//! Gaussian-process Bayesian optimization over mixed discrete/continuous
//! hyperparameter spaces, with the objectives, experiment harness and
//! evaluation statistics used to tune steering-angle networks.

pub mod acquisition;
pub mod bo;
pub mod gp;
pub mod metrics;
pub mod objectives;
pub mod search_space;

pub use acquisition::{Acquisition, AcquisitionKind, Incumbent};
pub use bo::{run_bo, run_experiment, ExperimentPlan, ExperimentSummary, RunLog, Strategy, Trial};
pub use gp::{GpModel, KernelParams, Posterior};
pub use objectives::{EvaluationResult, Objective, ObjectiveError, ObjectiveSpec};
pub use search_space::{build_stlstm_space, Configuration, ParamSpec, SearchSpace};
