//! Bayesian fault localization driven by expected information gain.

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blame;
pub mod domain;
pub mod error;
pub mod fpf;
pub mod harness;
pub mod mom;
pub mod planner;
pub mod report;
pub mod rng;
pub mod store;

pub use blame::{bayes_update, entropy, likelihood, Belief, UpdateRecord};
pub use domain::{
    canonicalize_length, validate_observation, ExperienceDb, Fingerprint, FunctionId, FunctionRegistry, Observation,
    SensorSeries, SkillId,
};
pub use error::{Error, Result};
pub use fpf::{deviation_mass, exec_weighted_mean, expected_weighted_stats, fit_fpf, BlameConfig, FpfModel};
pub use harness::{run_scenario, ScenarioConfig, BUILTIN_SCENARIOS};
pub use mom::{ErrorStats, MomConfig, MomDetector, MomModel};
pub use planner::{
    expected_information_gain, run_testing_loop, select_skill, Execution, LoopTrace, PlannerConfig, Skill,
    SkillExecutor,
};
pub use report::ReportBundle;
