//! Simulated skills, injected bugs and synthetic sensor streams, plus the
//! built-in scenarios that drive the whole pipeline end to end.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blame::Belief;
use crate::domain::{ExperienceDb, Fingerprint, FunctionId, FunctionRegistry, Observation, SensorSeries, SkillId};
use crate::error::{Error, Result};
use crate::fpf::{fit_fpf, BlameConfig};
use crate::mom::{MomConfig, MomDetector};
use crate::planner::{run_testing_loop, Execution, LoopTrace, PlannerConfig, Skill, SkillExecutor};
use crate::rng::{substream, StreamRng};

pub const DEFAULT_COUNT_MU: f64 = 2.0;
pub const DEFAULT_COUNT_SIGMA: f64 = 0.5;
pub const DEFAULT_TIMESTEPS: usize = 100;
pub const DEFAULT_DB_SIZE: usize = 70;
pub const DEFAULT_REGISTRY_SIZE: usize = 241;
pub const DEFAULT_DT: f64 = 0.1;

/// Count distribution of one function inside a simulated skill.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunctionProfile {
    pub function: FunctionId,
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSkillSpec {
    pub id: SkillId,
    pub name: String,
    pub functions: Vec<FunctionProfile>,
    pub timesteps: usize,
    pub dt: f64,
    /// Sensor synthesis; `None` gives a one-channel placeholder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensors: Option<SensorSynthSpec>,
}

impl SimSkillSpec {
    /// Skill using `used` with identical count statistics for every function.
    pub fn uniform(id: SkillId, name: &str, used: &[FunctionId], mu: f64, sigma: f64, timesteps: usize) -> Self {
        Self {
            id,
            name: name.to_string(),
            functions: used
                .iter()
                .map(|&function| FunctionProfile { function, mu, sigma })
                .collect(),
            timesteps,
            dt: DEFAULT_DT,
            sensors: None,
        }
    }

    pub fn validate(&self, registry: &FunctionRegistry) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("skill `{}`: {msg}", self.name)));
        if self.functions.is_empty() {
            return bad("uses no functions".into());
        }
        if self.timesteps == 0 || !(self.dt > 0.0) {
            return bad("needs at least one timestep and a positive dt".into());
        }
        let mut seen = BTreeSet::new();
        for p in &self.functions {
            if p.function.0 >= registry.len() {
                return Err(Error::OutOfRange {
                    what: "function id",
                    value: p.function.0,
                    len: registry.len(),
                });
            }
            if !seen.insert(p.function) {
                return bad(format!("lists {} twice", registry.name(p.function)));
            }
            if !(p.sigma >= 0.0) || !p.mu.is_finite() || !p.sigma.is_finite() {
                return bad(format!("invalid count distribution for {}", registry.name(p.function)));
            }
        }
        if let Some(s) = &self.sensors {
            s.validate()?;
            if s.timesteps != self.timesteps {
                return bad(format!(
                    "sensor timesteps {} differ from fingerprint timesteps {}",
                    s.timesteps, self.timesteps
                ));
            }
        }
        Ok(())
    }

    pub fn uses(&self, f: FunctionId) -> bool {
        self.functions.iter().any(|p| p.function == f)
    }
}

/// Ground truth of a simulation: which functions are buggy.
#[derive(Debug, Clone, PartialEq)]
pub struct SimWorld {
    pub registry: FunctionRegistry,
    pub buggy: BTreeSet<FunctionId>,
    pub seed: u64,
}

impl SimWorld {
    pub fn new(registry: FunctionRegistry, buggy: impl IntoIterator<Item = FunctionId>, seed: u64) -> Result<Self> {
        let buggy: BTreeSet<_> = buggy.into_iter().collect();
        if let Some(f) = buggy.iter().find(|f| f.0 >= registry.len()) {
            return Err(Error::OutOfRange {
                what: "buggy function",
                value: f.0,
                len: registry.len(),
            });
        }
        Ok(Self { registry, buggy, seed })
    }

    /// A skill fails exactly when it touches a buggy function.
    pub fn fails(&self, spec: &SimSkillSpec) -> bool {
        spec.functions.iter().any(|p| self.buggy.contains(&p.function))
    }
}

/// Draws i.i.d. Gaussian counts for the used functions, clamped at zero.
/// Unused rows are exactly zero.
pub fn gen_fingerprint<R: Rng + ?Sized>(
    spec: &SimSkillSpec,
    registry: &FunctionRegistry,
    rng: &mut R,
) -> Result<Fingerprint> {
    spec.validate(registry)?;
    let mut counts = Array2::zeros((registry.len(), spec.timesteps));
    for p in &spec.functions {
        for v in counts.row_mut(p.function.0) {
            let z: f64 = StandardNormal.sample(rng);
            *v = (p.mu + p.sigma * z).max(0.0);
        }
    }
    Fingerprint::new(counts, spec.dt)
}

/// Runs a simulated skill once. Failures happen at a time drawn uniformly
/// from the middle half of the run.
pub fn simulate_execution<R: Rng + ?Sized>(spec: &SimSkillSpec, world: &SimWorld, rng: &mut R) -> Result<Execution> {
    let fingerprint = gen_fingerprint(spec, &world.registry, rng)?;
    let success = !world.fails(spec);
    let t = spec.timesteps;
    let true_t_fail = if success {
        None
    } else {
        let lo = t / 4;
        let hi = (3 * t).div_ceil(4).max(lo + 1);
        Some(rng.random_range(lo..hi))
    };
    let sensors = match &spec.sensors {
        Some(s) => {
            let anomaly = true_t_fail.map(|onset| Anomaly { onset, ..s.anomaly });
            gen_sensor_series(s, anomaly.as_ref(), rng)?
        }
        None => SensorSeries::placeholder(t, spec.dt),
    };
    Ok(Execution {
        observation: Observation {
            skill: spec.id,
            sensors,
            fingerprint,
            success,
        },
        true_t_fail,
    })
}

/// Executes simulated skills against a fixed world, from one random stream.
#[derive(Debug, Clone)]
pub struct SimExecutor {
    pub world: SimWorld,
    pub specs: Vec<SimSkillSpec>,
    rng: StreamRng,
}

impl SimExecutor {
    pub fn new(world: SimWorld, specs: Vec<SimSkillSpec>) -> Self {
        let rng = substream(world.seed, "execution", 0);
        Self { world, specs, rng }
    }
}

impl SkillExecutor for SimExecutor {
    fn execute(&mut self, skill: SkillId) -> Result<Execution> {
        let spec = self
            .specs
            .get(skill.0)
            .ok_or_else(|| Error::Executor(format!("no simulated skill with id {skill}")))?;
        simulate_execution(spec, &self.world, &mut self.rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyKind {
    /// Adds the magnitude to every channel, with alternating sign.
    ConstantShift,
    /// Channel 0 reads zero.
    ChannelDropout,
    /// All channels hold their value at the onset.
    Freeze,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anomaly {
    pub kind: AnomalyKind,
    pub onset: usize,
    pub magnitude: f64,
}

/// Sinusoidal multi-channel signal with per-sequence phase jitter and
/// white noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSynthSpec {
    pub channels: usize,
    pub timesteps: usize,
    pub dt: f64,
    /// Hz, one per channel.
    pub frequency: Vec<f64>,
    /// Radians, one per channel.
    pub phase: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub noise_sigma: f64,
    /// Half-width (radians) of the uniform phase offset drawn per sequence.
    pub phase_jitter: f64,
    pub anomaly: Anomaly,
}

impl SensorSynthSpec {
    /// Eight channels over two seconds, shift of three noise sigmas at t = 120.
    pub fn default_suite() -> Self {
        Self::with_shape(8, 200, 0.01, 120)
    }

    pub fn with_shape(channels: usize, timesteps: usize, dt: f64, onset: usize) -> Self {
        // slow channels and a noise floor well above the model's residual keep the shift visible
        let noise_sigma = 0.1;
        Self {
            channels,
            timesteps,
            dt,
            frequency: (0..channels).map(|c| 0.25 + 0.125 * c as f64).collect(),
            phase: (0..channels).map(|c| c as f64 * PI / 4.0).collect(),
            amplitude: vec![1.0; channels],
            noise_sigma,
            phase_jitter: 0.2,
            anomaly: Anomaly {
                kind: AnomalyKind::ConstantShift,
                onset,
                magnitude: 3.0 * noise_sigma,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.channels;
        if d == 0 || self.timesteps == 0 || !(self.dt > 0.0) {
            return Err(Error::Config(
                "sensor synthesis needs channels, timesteps and dt > 0".into(),
            ));
        }
        for (what, v) in [
            ("frequency", &self.frequency),
            ("phase", &self.phase),
            ("amplitude", &self.amplitude),
        ] {
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    what: format!("sensor synthesis {what}"),
                    expected: d,
                    found: v.len(),
                });
            }
        }
        if self.anomaly.onset >= self.timesteps {
            return Err(Error::OutOfRange {
                what: "anomaly onset",
                value: self.anomaly.onset,
                len: self.timesteps,
            });
        }
        if !(self.noise_sigma >= 0.0) || !(self.phase_jitter >= 0.0) {
            return Err(Error::Config("noise_sigma and phase_jitter must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One synthetic sequence; `anomaly` is applied from its onset on.
pub fn gen_sensor_series<R: Rng + ?Sized>(
    spec: &SensorSynthSpec,
    anomaly: Option<&Anomaly>,
    rng: &mut R,
) -> Result<SensorSeries> {
    spec.validate()?;
    let jitter = if spec.phase_jitter > 0.0 {
        rng.random_range(-spec.phase_jitter..=spec.phase_jitter)
    } else {
        0.0
    };
    let mut data = Array2::zeros((spec.channels, spec.timesteps));
    for ((c, t), v) in data.indexed_iter_mut() {
        let time = t as f64 * spec.dt;
        let z: f64 = StandardNormal.sample(rng);
        *v = spec.amplitude[c] * (2.0 * PI * spec.frequency[c] * time + spec.phase[c] + jitter).sin()
            + spec.noise_sigma * z;
    }
    if let Some(a) = anomaly {
        let tau = a.onset.min(spec.timesteps - 1);
        match a.kind {
            AnomalyKind::ConstantShift => {
                for (c, mut row) in data.rows_mut().into_iter().enumerate() {
                    let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
                    row.slice_mut(ndarray::s![tau..])
                        .mapv_inplace(|v| v + sign * a.magnitude);
                }
            }
            AnomalyKind::ChannelDropout => data.row_mut(0).slice_mut(ndarray::s![tau..]).fill(0.0),
            AnomalyKind::Freeze => {
                let held = data.column(tau).to_owned();
                for t in tau..spec.timesteps {
                    data.column_mut(t).assign(&held);
                }
            }
        }
    }
    SensorSeries::new(data, spec.dt)
}

/// Training set plus labelled held-out sequences.
#[derive(Debug, Clone)]
pub struct SensorSuite {
    pub train: Vec<SensorSeries>,
    pub positive: Vec<SensorSeries>,
    pub negative: Vec<SensorSeries>,
}

pub fn gen_sensor_suite<R: Rng + ?Sized>(
    spec: &SensorSynthSpec,
    n_train: usize,
    n_pos: usize,
    n_neg: usize,
    rng: &mut R,
) -> Result<SensorSuite> {
    if n_train == 0 || n_pos == 0 || n_neg == 0 {
        return Err(Error::Config("sensor suite sizes must be positive".into()));
    }
    let mut draw = |n: usize, anomaly: Option<&Anomaly>| {
        (0..n)
            .map(|_| gen_sensor_series(spec, anomaly, &mut *rng))
            .collect::<Result<Vec<_>>>()
    };
    Ok(SensorSuite {
        train: draw(n_train, None)?,
        positive: draw(n_pos, None)?,
        negative: draw(n_neg, Some(&spec.anomaly))?,
    })
}

/// Function universe of a scenario: a count (named `f1..fN`) or explicit names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FunctionSet {
    Count(usize),
    Names(Vec<String>),
}

impl Default for FunctionSet {
    fn default() -> Self {
        FunctionSet::Count(DEFAULT_REGISTRY_SIZE)
    }
}

impl FunctionSet {
    pub fn registry(&self) -> Result<FunctionRegistry> {
        match self {
            FunctionSet::Count(n) => FunctionRegistry::numbered(*n),
            FunctionSet::Names(names) => FunctionRegistry::new(names.iter().cloned()),
        }
    }
}

fn default_mu() -> f64 {
    DEFAULT_COUNT_MU
}
fn default_sigma() -> f64 {
    DEFAULT_COUNT_SIGMA
}
fn default_db_size() -> usize {
    DEFAULT_DB_SIZE
}
fn default_timesteps() -> usize {
    DEFAULT_TIMESTEPS
}
fn default_dt() -> f64 {
    DEFAULT_DT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkillConfig {
    pub name: String,
    pub functions: Vec<String>,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Enables sensor synthesis and a trained detector for this skill. The
    /// anomaly onset is replaced by the simulated failure time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensors: Option<SensorSynthSpec>,
}

/// Everything needed to reproduce a simulated study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub functions: FunctionSet,
    pub skills: Vec<SkillConfig>,
    pub bugs: Vec<String>,
    #[serde(default = "default_db_size")]
    pub db_size: usize,
    #[serde(default = "default_timesteps")]
    pub timesteps: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub planner: PlannerConfig,
    /// Defaults to the two-second window for `dt`.
    #[serde(default)]
    pub blame: Option<BlameConfig>,
    #[serde(default)]
    pub mom: MomConfig,
    #[serde(default)]
    pub seed: u64,
}

pub const BUILTIN_SCENARIOS: [&str; 5] = ["fig3", "fig4", "fig5", "exoneration", "localizer-ambiguity"];

fn skill(name: &str, functions: &[&str]) -> SkillConfig {
    SkillConfig {
        name: name.into(),
        functions: functions.iter().map(|s| s.to_string()).collect(),
        mu: DEFAULT_COUNT_MU,
        sigma: DEFAULT_COUNT_SIGMA,
        sensors: None,
    }
}

fn numbered_skills(sets: &[&[usize]]) -> Vec<SkillConfig> {
    sets.iter()
        .enumerate()
        .map(|(i, set)| {
            let names: Vec<String> = set.iter().map(|f| format!("f{f}")).collect();
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            skill(&format!("a{}", i + 1), &refs)
        })
        .collect()
}

/// Robot-flavoured function universe for the exoneration and ambiguity analogs.
const ROBOT_FUNCTIONS: [&str; 12] = [
    "robot_id",
    "arm_ctrl",
    "db_store",
    "localise",
    "plan_cartesian",
    "cartesian_ptp",
    "compute_ik",
    "close_hand",
    "open_hand",
    "plan_joint",
    "joint_ptp",
    "wait_force",
];

fn robot_registry() -> FunctionSet {
    let mut names: Vec<String> = ROBOT_FUNCTIONS.iter().map(|s| s.to_string()).collect();
    names.extend((1..=28).map(|i| format!("aux_{i:02}")));
    FunctionSet::Names(names)
}

impl ScenarioConfig {
    fn fig(name: &str, sets: &[&[usize]], max_iterations: usize) -> Self {
        Self {
            name: name.into(),
            functions: FunctionSet::Count(DEFAULT_REGISTRY_SIZE),
            skills: numbered_skills(sets),
            bugs: vec!["f2".into()],
            db_size: DEFAULT_DB_SIZE,
            timesteps: DEFAULT_TIMESTEPS,
            dt: DEFAULT_DT,
            planner: PlannerConfig {
                // At a uniform prior over hundreds of functions every gain is a
                // few thousandths of a nat, so the default threshold would stop
                // the loop before it starts.
                convergence_epsilon: 1e-4,
                max_iterations,
                ..PlannerConfig::default()
            },
            blame: None,
            mom: MomConfig::default(),
            seed: 0,
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        let cfg = match name {
            "fig3" => Self::fig(name, &[&[1, 2], &[2, 4, 5], &[3, 4, 6], &[3, 4, 5, 6]], 60),
            "fig4" => Self::fig(name, &[&[1, 2], &[2, 4, 5], &[1, 3, 6], &[1, 3, 4, 6]], 60),
            "fig5" => Self::fig(name, &[&[1, 2], &[2, 4], &[1, 3, 6], &[1, 3, 4, 6]], 60),
            "exoneration" => {
                let grasp = [
                    "robot_id",
                    "arm_ctrl",
                    "db_store",
                    "localise",
                    "plan_cartesian",
                    "cartesian_ptp",
                    "compute_ik",
                    "close_hand",
                    "open_hand",
                ];
                let handover = [
                    "robot_id",
                    "arm_ctrl",
                    "db_store",
                    "plan_joint",
                    "joint_ptp",
                    "wait_force",
                    "close_hand",
                ];
                let mut button = skill(
                    "button",
                    &["robot_id", "arm_ctrl", "db_store", "plan_joint", "joint_ptp"],
                );
                // A fixed joint plan to a fixed target calls the same code at
                // the same rate every time.
                button.sigma = 0.0;
                Self {
                    name: name.into(),
                    functions: robot_registry(),
                    skills: vec![skill("grasp", &grasp), button, skill("handover", &handover)],
                    bugs: vec!["close_hand".into()],
                    planner: PlannerConfig {
                        convergence_epsilon: 1e-3,
                        max_iterations: 40,
                        ..PlannerConfig::default()
                    },
                    ..Self::fig(name, &[], 0)
                }
            }
            "localizer-ambiguity" => {
                let grasp = [
                    "robot_id",
                    "arm_ctrl",
                    "db_store",
                    "localise",
                    "plan_cartesian",
                    "cartesian_ptp",
                    "compute_ik",
                    "close_hand",
                ];
                let mut button = skill(
                    "button",
                    &["robot_id", "arm_ctrl", "db_store", "plan_joint", "joint_ptp"],
                );
                button.sigma = 0.0;
                let handover = [
                    "robot_id",
                    "arm_ctrl",
                    "db_store",
                    "plan_joint",
                    "joint_ptp",
                    "wait_force",
                    "close_hand",
                ];
                Self {
                    name: name.into(),
                    functions: robot_registry(),
                    skills: vec![skill("grasp", &grasp), button, skill("handover", &handover)],
                    bugs: vec!["localise".into()],
                    planner: PlannerConfig {
                        convergence_epsilon: 1e-3,
                        max_iterations: 30,
                        ..PlannerConfig::default()
                    },
                    ..Self::fig(name, &[], 0)
                }
            }
            _ => return None,
        };
        Some(cfg)
    }

    /// A built-in name or a path to a JSON scenario file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if let Some(cfg) = Self::builtin(name_or_path) {
            return Ok(cfg);
        }
        let path = Path::new(name_or_path);
        if !path.is_file() {
            return Err(Error::UnknownScenario {
                name: name_or_path.to_string(),
                builtins: BUILTIN_SCENARIOS.to_vec(),
            });
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn blame_config(&self) -> Result<BlameConfig> {
        match self.blame {
            Some(b) => {
                b.validate()?;
                Ok(b)
            }
            None => BlameConfig::for_dt(self.dt),
        }
    }

    /// Planner settings with the scenario seed applied.
    pub fn planner_config(&self) -> PlannerConfig {
        PlannerConfig {
            seed: self.seed,
            ..self.planner
        }
    }
}

/// A fully built simulated study, ready for the testing loop.
#[derive(Debug, Clone)]
pub struct SimStudy {
    pub config: ScenarioConfig,
    pub world: SimWorld,
    pub specs: Vec<SimSkillSpec>,
    pub skills: Vec<Skill>,
    pub blame: BlameConfig,
    pub planner: PlannerConfig,
}

impl SimStudy {
    pub fn registry(&self) -> &FunctionRegistry {
        &self.world.registry
    }

    pub fn executor(&self) -> SimExecutor {
        SimExecutor::new(self.world.clone(), self.specs.clone())
    }
}

/// Builds the registry, simulated skills, experience databases and models.
pub fn build_study(config: &ScenarioConfig) -> Result<SimStudy> {
    let registry = config.functions.registry()?;
    if config.skills.is_empty() {
        return Err(Error::Config(format!("scenario `{}` has no skills", config.name)));
    }
    if config.db_size < 2 {
        return Err(Error::Config("db_size must be at least 2".into()));
    }
    let blame = config.blame_config()?;
    let planner = config.planner_config();
    planner.validate()?;
    config.mom.validate()?;

    let buggy = config
        .bugs
        .iter()
        .map(|b| registry.resolve(b))
        .collect::<Result<Vec<_>>>()?;
    let world = SimWorld::new(registry.clone(), buggy, config.seed)?;

    let specs = config
        .skills
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let used = s
                .functions
                .iter()
                .map(|f| registry.resolve(f))
                .collect::<Result<Vec<_>>>()?;
            let mut spec = SimSkillSpec::uniform(SkillId(i), &s.name, &used, s.mu, s.sigma, config.timesteps);
            spec.dt = config.dt;
            spec.sensors = s.sensors.clone();
            spec.validate(&registry)?;
            Ok(spec)
        })
        .collect::<Result<Vec<_>>>()?;

    // Experience databases only hold successes, so they come from a bug-free
    // copy of the world.
    let clean = SimWorld::new(registry.clone(), [], config.seed)?;
    let skills = specs
        .par_iter()
        .map(|spec| {
            let mut rng = substream(config.seed, "experience", spec.id.0 as u64);
            let obs = (0..config.db_size)
                .map(|_| simulate_execution(spec, &clean, &mut rng).map(|e| e.observation))
                .collect::<Result<Vec<_>>>()?;
            let db = ExperienceDb::with_length(spec.id, spec.timesteps, obs, &registry)?;
            let fpf = fit_fpf(&db, &blame)?;
            let detector = match spec.sensors {
                Some(_) => {
                    let sensors: Vec<SensorSeries> = db.observations().iter().map(|o| o.sensors.clone()).collect();
                    let mom = MomConfig {
                        seed: config.mom.seed ^ config.seed.wrapping_add(spec.id.0 as u64),
                        ..config.mom
                    };
                    Some(MomDetector::fit(&sensors, &mom)?.0)
                }
                None => None,
            };
            Ok(Skill {
                name: spec.name.clone(),
                db,
                fpf,
                detector,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SimStudy {
        config: config.clone(),
        world,
        specs,
        skills,
        blame,
        planner,
    })
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub study: SimStudy,
    pub belief: Belief,
    pub trace: LoopTrace,
}

/// Builds the study and runs the testing loop against the simulator.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioRun> {
    let study = build_study(config)?;
    let mut executor = study.executor();
    let (belief, trace) = run_testing_loop(
        &mut executor,
        study.registry(),
        &study.skills,
        &study.blame,
        &study.planner,
    )?;
    Ok(ScenarioRun { study, belief, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::validate_observation;
    use proptest::prelude::*;

    fn ids(v: &[usize]) -> Vec<FunctionId> {
        v.iter().map(|&i| FunctionId(i)).collect()
    }

    #[test]
    fn zero_sigma_fingerprint() {
        let reg = FunctionRegistry::numbered(6).unwrap();
        let spec = SimSkillSpec::uniform(SkillId(0), "a", &ids(&[0, 1]), 1.0, 0.0, 4);
        let fp = gen_fingerprint(&spec, &reg, &mut substream(1, "t", 0)).unwrap();
        for f in 0..6 {
            let want = if f < 2 { 1.0 } else { 0.0 };
            assert!(fp.row(FunctionId(f)).iter().all(|&v| v == want));
        }
    }

    #[test]
    fn row_mean_converges() {
        let reg = FunctionRegistry::numbered(2).unwrap();
        let spec = SimSkillSpec::uniform(SkillId(0), "a", &ids(&[1]), 2.0, 0.5, 10_000);
        let fp = gen_fingerprint(&spec, &reg, &mut substream(3, "t", 0)).unwrap();
        let mean = fp.row(FunctionId(1)).mean().unwrap();
        assert!((mean - 2.0).abs() < 5.0 * 0.5 / 100.0, "{mean}");
    }

    #[test]
    fn success_follows_bug_set() {
        let reg = FunctionRegistry::numbered(6).unwrap();
        let world = SimWorld::new(reg.clone(), ids(&[1]), 0).unwrap();
        let mut rng = substream(0, "t", 0);
        let a1 = SimSkillSpec::uniform(SkillId(0), "a1", &ids(&[0, 1]), 2.0, 0.5, 40);
        let a3 = SimSkillSpec::uniform(SkillId(2), "a3", &ids(&[2, 3, 5]), 2.0, 0.5, 40);
        let e = simulate_execution(&a1, &world, &mut rng).unwrap();
        assert!(!e.observation.success);
        assert!((10..30).contains(&e.true_t_fail.unwrap()));
        let e = simulate_execution(&a3, &world, &mut rng).unwrap();
        assert!(e.observation.success && e.true_t_fail.is_none());
        let clean = SimWorld::new(reg, [], 0).unwrap();
        assert!(simulate_execution(&a1, &clean, &mut rng).unwrap().observation.success);
        assert!(SimWorld::new(FunctionRegistry::numbered(2).unwrap(), ids(&[2]), 0).is_err());
    }

    #[test]
    fn dropout_zeroes_channel() {
        let mut spec = SensorSynthSpec::with_shape(3, 50, 0.01, 20);
        spec.anomaly.kind = AnomalyKind::ChannelDropout;
        let suite = gen_sensor_suite(&spec, 2, 2, 3, &mut substream(0, "s", 0)).unwrap();
        for s in &suite.negative {
            assert!((20..50).all(|t| s.data()[[0, t]] == 0.0));
            assert!(s.data()[[0, 19]] != 0.0);
        }
    }

    #[test]
    fn freeze_and_shift() {
        let mut spec = SensorSynthSpec::with_shape(2, 30, 0.01, 10);
        spec.noise_sigma = 0.0;
        spec.phase_jitter = 0.0;
        let mut rng = substream(0, "s", 0);
        let base = gen_sensor_series(&spec, None, &mut rng).unwrap();
        let shifted = gen_sensor_series(&spec, Some(&spec.anomaly), &mut rng).unwrap();
        assert_eq!(shifted.data()[[0, 9]], base.data()[[0, 9]]);
        assert!((shifted.data()[[0, 10]] - base.data()[[0, 10]] - spec.anomaly.magnitude).abs() < 1e-12);
        assert!((shifted.data()[[1, 10]] - base.data()[[1, 10]] + spec.anomaly.magnitude).abs() < 1e-12);
        let frozen = Anomaly {
            kind: AnomalyKind::Freeze,
            ..spec.anomaly
        };
        let f = gen_sensor_series(&spec, Some(&frozen), &mut rng).unwrap();
        assert_eq!(f.column(29), base.column(10));
    }

    #[test]
    fn unknown_scenario_lists_builtins() {
        let err = ScenarioConfig::resolve("nosuch").unwrap_err();
        let msg = err.to_string();
        for b in BUILTIN_SCENARIOS {
            assert!(msg.contains(b), "{msg}");
            assert!(ScenarioConfig::builtin(b).is_some());
        }
    }

    #[test]
    fn builtins_round_trip_through_json() {
        for b in BUILTIN_SCENARIOS {
            let cfg = ScenarioConfig::builtin(b).unwrap();
            let back: ScenarioConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
            assert_eq!(cfg, back);
        }
    }

    #[test]
    fn small_scenario_runs_deterministically() {
        let mut cfg = ScenarioConfig::builtin("fig3").unwrap();
        cfg.functions = FunctionSet::Count(8);
        cfg.db_size = 10;
        cfg.timesteps = 20;
        cfg.planner.max_iterations = 5;
        cfg.seed = 4;
        let a = run_scenario(&cfg).unwrap();
        let b = run_scenario(&cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert!(!a.trace.steps.is_empty());
    }

    #[test]
    fn scenario_with_sensors_trains_detectors() {
        let mut cfg = ScenarioConfig::builtin("fig3").unwrap();
        cfg.functions = FunctionSet::Count(6);
        cfg.db_size = 6;
        cfg.timesteps = 30;
        cfg.skills.truncate(2);
        cfg.planner.max_iterations = 2;
        cfg.mom.epochs = 3;
        for s in &mut cfg.skills {
            s.sensors = Some(SensorSynthSpec::with_shape(3, 30, 0.01, 15));
        }
        let run = run_scenario(&cfg).unwrap();
        assert!(run.study.skills.iter().all(|s| s.detector.is_some()));
        assert!(run.trace.steps.iter().all(|s| s.success || s.mom_likelihood.is_some()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn generated_observations_validate(
            used in prop::collection::btree_set(0usize..10, 1..6),
            mu in 0.0f64..5.0,
            sigma in 0.0f64..3.0,
            t in 1usize..30,
            seed in any::<u64>(),
        ) {
            let reg = FunctionRegistry::numbered(10).unwrap();
            let used: Vec<usize> = used.into_iter().collect();
            let spec = SimSkillSpec::uniform(SkillId(0), "a", &ids(&used), mu, sigma, t);
            let world = SimWorld::new(reg.clone(), ids(&[0]), seed).unwrap();
            let e = simulate_execution(&spec, &world, &mut substream(seed, "p", 0)).unwrap();
            prop_assert_eq!(e.observation.success, !used.contains(&0));
            let obs = validate_observation(e.observation, &reg).unwrap();
            for f in 0..10 {
                if !used.contains(&f) {
                    prop_assert!(obs.fingerprint.row(FunctionId(f)).iter().all(|&v| v == 0.0));
                }
            }
        }
    }
}
