//! Shared domain types: the function registry, per-execution sensor and
//! profiling matrices, observations and the per-skill experience database.
//!
//! Matrices are stored row-major with shape `(rows, T)`: one row per sensor
//! channel or profiled function, one column per timestep.

use std::collections::HashMap;
use std::fmt;

use ndarray::{s, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts at or below this magnitude are treated as "function not active".
pub const ACTIVITY_TOLERANCE: f64 = 1e-9;

/// Index of a profiled function in the [`FunctionRegistry`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FunctionId(pub usize);

/// Index of a skill within a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SkillId(pub usize);

impl fmt::Display for SkillId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "skill#{}", self.0)
    }
}

/// Ordered, duplicate-free list of function identifiers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionRegistry {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl FunctionRegistry {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Empty("function registry has no functions".into()));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate function name `{name}`")));
            }
        }
        Ok(Self { names, index })
    }

    /// Registry `f1, f2, ..., fN`.
    pub fn numbered(n: usize) -> Result<Self> {
        Self::new((1..=n).map(|i| format!("f{i}")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: FunctionId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<FunctionId> {
        self.index.get(name).copied().map(FunctionId)
    }

    pub fn resolve(&self, name: &str) -> Result<FunctionId> {
        self.id(name)
            .ok_or_else(|| Error::Config(format!("function `{name}` is not in the registry")))
    }
}

fn check_finite(matrix: &'static str, data: &Array2<f64>) -> Result<()> {
    for ((row, col), v) in data.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite { matrix, row, col });
        }
    }
    Ok(())
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Config(format!("sampling interval must be positive, got {dt}")));
    }
    Ok(())
}

/// Sensor matrix of one execution, shape `(D, T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSeries {
    data: Array2<f64>,
    dt: f64,
}

impl SensorSeries {
    pub fn new(data: Array2<f64>, dt: f64) -> Result<Self> {
        let series = Self::new_unchecked(data, dt);
        series.validate()?;
        Ok(series)
    }

    /// Builds a series without checking its invariants. Data obtained this way
    /// must pass through [`validate_observation`] before use.
    pub fn new_unchecked(data: Array2<f64>, dt: f64) -> Self {
        Self { data, dt }
    }

    /// Single all-zero channel, used when an executor records no sensors.
    pub fn placeholder(t: usize, dt: f64) -> Self {
        Self::new_unchecked(Array2::zeros((1, t)), dt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.ncols() == 0 {
            return Err(Error::Empty("sensor series has no timesteps".into()));
        }
        if self.data.nrows() == 0 {
            return Err(Error::Empty("sensor series has no channels".into()));
        }
        check_dt(self.dt)?;
        check_finite("sensor series", &self.data)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn dims(&self) -> usize {
        self.data.nrows()
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn column(&self, t: usize) -> ArrayView1<'_, f64> {
        self.data.column(t)
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }
}

/// Profiling matrix of one execution: active-call counts, shape `(F, T)`.
#[derive(Debug, Clone)]
pub struct Fingerprint {
    counts: Array2<f64>,
    dt: f64,
    active: Vec<bool>,
}

impl PartialEq for Fingerprint {
    fn eq(&self, other: &Self) -> bool {
        self.counts == other.counts && self.dt == other.dt
    }
}

impl Fingerprint {
    pub fn new(counts: Array2<f64>, dt: f64) -> Result<Self> {
        let fp = Self::new_unchecked(counts, dt);
        fp.validate()?;
        Ok(fp)
    }

    /// Builds a fingerprint without checking its invariants; see
    /// [`SensorSeries::new_unchecked`].
    pub fn new_unchecked(counts: Array2<f64>, dt: f64) -> Self {
        let active = counts
            .rows()
            .into_iter()
            .map(|row| row.iter().any(|c| c.abs() > ACTIVITY_TOLERANCE))
            .collect();
        Self { counts, dt, active }
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.ncols() == 0 {
            return Err(Error::Empty("fingerprint has no timesteps".into()));
        }
        check_dt(self.dt)?;
        check_finite("fingerprint", &self.counts)?;
        for ((row, col), &value) in self.counts.indexed_iter() {
            if value < 0.0 {
                return Err(Error::NegativeCount { row, col, value });
            }
        }
        Ok(())
    }

    pub fn counts(&self) -> &Array2<f64> {
        &self.counts
    }

    pub fn functions(&self) -> usize {
        self.counts.nrows()
    }

    pub fn len(&self) -> usize {
        self.counts.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.ncols() == 0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn row(&self, f: FunctionId) -> ArrayView1<'_, f64> {
        self.counts.row(f.0)
    }

    /// Whether function `f` has any nonzero count in this execution.
    pub fn is_active(&self, f: FunctionId) -> bool {
        self.active[f.0]
    }

    /// Functions with at least one nonzero count.
    pub fn active_functions(&self) -> impl Iterator<Item = FunctionId> + '_ {
        self.active
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(i, _)| FunctionId(i))
    }
}

/// Anything with a time axis along its columns.
pub trait TimeSeries: Sized {
    fn matrix(&self) -> &Array2<f64>;
    fn with_matrix(&self, matrix: Array2<f64>) -> Self;
}

impl TimeSeries for SensorSeries {
    fn matrix(&self) -> &Array2<f64> {
        &self.data
    }

    fn with_matrix(&self, matrix: Array2<f64>) -> Self {
        Self::new_unchecked(matrix, self.dt)
    }
}

impl TimeSeries for Fingerprint {
    fn matrix(&self) -> &Array2<f64> {
        &self.counts
    }

    fn with_matrix(&self, matrix: Array2<f64>) -> Self {
        Self::new_unchecked(matrix, self.dt)
    }
}

/// Brings a series to exactly `target_t` timesteps: shorter inputs repeat
/// their last column, longer ones are truncated.
pub fn canonicalize_length<S: TimeSeries + Clone>(series: &S, target_t: usize) -> Result<S> {
    if target_t == 0 {
        return Err(Error::Config("target length must be at least 1".into()));
    }
    let m = series.matrix();
    let t = m.ncols();
    if t == 0 {
        return Err(Error::Empty("cannot canonicalize a series with no timesteps".into()));
    }
    if t == target_t {
        return Ok(series.clone());
    }
    if t > target_t {
        return Ok(series.with_matrix(m.slice(s![.., ..target_t]).to_owned()));
    }
    let mut out = Array2::zeros((m.nrows(), target_t));
    out.slice_mut(s![.., ..t]).assign(m);
    let last = m.column(t - 1);
    for mut col in out.slice_mut(s![.., t..]).axis_iter_mut(Axis(1)) {
        col.assign(&last);
    }
    Ok(series.with_matrix(out))
}

/// One execution of a skill: sensor data, profile, and its outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub skill: SkillId,
    pub sensors: SensorSeries,
    pub fingerprint: Fingerprint,
    pub success: bool,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.fingerprint.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fingerprint.is_empty()
    }

    pub fn canonicalize(&self, target_t: usize) -> Result<Self> {
        Ok(Self {
            skill: self.skill,
            sensors: canonicalize_length(&self.sensors, target_t)?,
            fingerprint: canonicalize_length(&self.fingerprint, target_t)?,
            success: self.success,
        })
    }
}

/// Checks every observation invariant against the registry.
pub fn validate_observation(obs: Observation, registry: &FunctionRegistry) -> Result<Observation> {
    obs.sensors.validate()?;
    obs.fingerprint.validate()?;
    if obs.fingerprint.functions() != registry.len() {
        return Err(Error::DimensionMismatch {
            what: "fingerprint rows vs registry functions".into(),
            expected: registry.len(),
            found: obs.fingerprint.functions(),
        });
    }
    if obs.sensors.len() != obs.fingerprint.len() {
        return Err(Error::DimensionMismatch {
            what: "sensor timesteps vs fingerprint timesteps".into(),
            expected: obs.fingerprint.len(),
            found: obs.sensors.len(),
        });
    }
    Ok(obs)
}

/// Successful executions of one skill, all at a common length.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceDb {
    skill: SkillId,
    observations: Vec<Observation>,
    canonical_t: usize,
}

impl ExperienceDb {
    /// Creates a database from its first batch. The canonical length is the
    /// (lower) median length of that batch; every observation is brought to it.
    pub fn from_batch(skill: SkillId, batch: Vec<Observation>, registry: &FunctionRegistry) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::Empty(format!("first batch for {skill} is empty")));
        }
        let mut lengths: Vec<usize> = batch.iter().map(Observation::len).collect();
        lengths.sort_unstable();
        let canonical_t = lengths[(lengths.len() - 1) / 2];
        let mut db = Self {
            skill,
            observations: Vec::with_capacity(batch.len()),
            canonical_t,
        };
        for obs in batch {
            db.push(obs, registry)?;
        }
        Ok(db)
    }

    /// Creates a database with an explicit canonical length.
    pub fn with_length(
        skill: SkillId,
        canonical_t: usize,
        observations: Vec<Observation>,
        registry: &FunctionRegistry,
    ) -> Result<Self> {
        if canonical_t == 0 {
            return Err(Error::Config("canonical length must be at least 1".into()));
        }
        let mut db = Self {
            skill,
            observations: Vec::with_capacity(observations.len()),
            canonical_t,
        };
        for obs in observations {
            db.push(obs, registry)?;
        }
        Ok(db)
    }

    /// Adds a successful execution, canonicalized to this database's length.
    pub fn push(&mut self, obs: Observation, registry: &FunctionRegistry) -> Result<()> {
        if !obs.success {
            return Err(Error::Config(format!(
                "experience database for {} only stores successful executions",
                self.skill
            )));
        }
        if obs.skill != self.skill {
            return Err(Error::Config(format!(
                "observation of {} pushed into the database of {}",
                obs.skill, self.skill
            )));
        }
        let obs = validate_observation(obs.canonicalize(self.canonical_t)?, registry)?;
        if let Some(first) = self.observations.first() {
            if first.sensors.dims() != obs.sensors.dims() {
                return Err(Error::DimensionMismatch {
                    what: "sensor channels within one database".into(),
                    expected: first.sensors.dims(),
                    found: obs.sensors.dims(),
                });
            }
        }
        self.observations.push(obs);
        Ok(())
    }

    pub fn skill(&self) -> SkillId {
        self.skill
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn canonical_t(&self) -> usize {
        self.canonical_t
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn obs(f: usize, t: usize) -> Observation {
        Observation {
            skill: SkillId(0),
            sensors: SensorSeries::new(Array2::from_elem((2, t), 0.5), 0.1).unwrap(),
            fingerprint: Fingerprint::new(Array2::from_elem((f, t), 1.0), 0.1).unwrap(),
            success: true,
        }
    }

    #[test]
    fn canonicalize_identity() {
        let m = Array2::from_shape_fn((3, 4), |(i, j)| (i * 10 + j) as f64);
        let s = SensorSeries::new(m.clone(), 1.0).unwrap();
        assert_eq!(canonicalize_length(&s, 4).unwrap().data(), &m);
    }

    #[test]
    fn canonicalize_pads_with_last_column() {
        let s = SensorSeries::new(array![[1.0, 2.0], [3.0, 4.0]], 1.0).unwrap();
        let out = canonicalize_length(&s, 4).unwrap();
        assert_eq!(out.data(), &array![[1.0, 2.0, 2.0, 2.0], [3.0, 4.0, 4.0, 4.0]]);
    }

    #[test]
    fn canonicalize_truncates() {
        let fp = Fingerprint::new(array![[1.0, 2.0, 3.0]], 1.0).unwrap();
        let out = canonicalize_length(&fp, 2).unwrap();
        assert_eq!(out.counts(), &array![[1.0, 2.0]]);
    }

    #[test]
    fn canonicalize_rejects_empty() {
        let s = SensorSeries::new_unchecked(Array2::zeros((2, 0)), 1.0);
        assert!(matches!(canonicalize_length(&s, 3), Err(Error::Empty(_))));
        let s = SensorSeries::new(Array2::zeros((2, 2)), 1.0).unwrap();
        assert!(matches!(canonicalize_length(&s, 0), Err(Error::Config(_))));
    }

    #[test]
    fn validate_accepts_well_formed() {
        let reg = FunctionRegistry::numbered(3).unwrap();
        let o = obs(3, 6);
        assert_eq!(validate_observation(o.clone(), &reg).unwrap(), o);
    }

    #[test]
    fn validate_names_negative_cell() {
        let reg = FunctionRegistry::numbered(3).unwrap();
        let mut counts = Array2::from_elem((3, 6), 1.0);
        counts[[2, 5]] = -1.0;
        let o = Observation {
            fingerprint: Fingerprint::new_unchecked(counts, 0.1),
            ..obs(3, 6)
        };
        match validate_observation(o, &reg) {
            Err(Error::NegativeCount { row: 2, col: 5, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validate_rejects_extra_rows() {
        let reg = FunctionRegistry::numbered(3).unwrap();
        assert!(matches!(
            validate_observation(obs(4, 6), &reg),
            Err(Error::DimensionMismatch {
                expected: 3,
                found: 4,
                ..
            })
        ));
    }

    #[test]
    fn registry_rejects_duplicates() {
        assert!(FunctionRegistry::new(["a", "b", "a"]).is_err());
        assert!(FunctionRegistry::new(Vec::<String>::new()).is_err());
        let reg = FunctionRegistry::numbered(3).unwrap();
        assert_eq!(reg.id("f2"), Some(FunctionId(1)));
    }

    #[test]
    fn db_uses_lower_median_length() {
        let reg = FunctionRegistry::numbered(2).unwrap();
        let batch = vec![obs(2, 5), obs(2, 9), obs(2, 7), obs(2, 8)];
        let db = ExperienceDb::from_batch(SkillId(0), batch, &reg).unwrap();
        assert_eq!(db.canonical_t(), 7);
        assert!(db.observations().iter().all(|o| o.len() == 7 && o.sensors.len() == 7));
    }

    #[test]
    fn db_rejects_failures() {
        let reg = FunctionRegistry::numbered(2).unwrap();
        let mut bad = obs(2, 5);
        bad.success = false;
        assert!(ExperienceDb::from_batch(SkillId(0), vec![bad], &reg).is_err());
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
        prop::collection::vec(0.0f64..5.0, rows * cols)
            .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
    }

    proptest! {
        #[test]
        fn canonicalize_is_idempotent(m in (1usize..4, 1usize..9).prop_flat_map(|(r, c)| matrix(r, c)), target in 1usize..12) {
            let s = SensorSeries::new(m, 0.5).unwrap();
            let once = canonicalize_length(&s, target).unwrap();
            let twice = canonicalize_length(&once, target).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn validate_matches_invariants(
            counts in matrix(3, 5),
            sensors in matrix(2, 5),
            mutation in 0usize..6,
            row in 0usize..3,
            col in 0usize..5,
        ) {
            let reg = FunctionRegistry::numbered(3).unwrap();
            let (mut counts, mut sensors) = (counts, sensors);
            let mut extra_row = false;
            let mut short_sensor = false;
            let expect_ok = match mutation {
                0 => true,
                1 => { counts[[row, col]] = -0.25 - counts[[row, col]]; false }
                2 => { counts[[row, col]] = f64::NAN; false }
                3 => { sensors[[row % 2, col]] = f64::INFINITY; false }
                4 => { extra_row = true; false }
                _ => { short_sensor = true; false }
            };
            if extra_row {
                counts = Array2::from_shape_fn((4, 5), |(i, j)| if i < 3 { counts[[i, j]] } else { 0.0 });
            }
            if short_sensor {
                sensors = sensors.slice(s![.., ..4]).to_owned();
            }
            let o = Observation {
                skill: SkillId(0),
                sensors: SensorSeries::new_unchecked(sensors, 0.1),
                fingerprint: Fingerprint::new_unchecked(counts, 0.1),
                success: true,
            };
            prop_assert_eq!(validate_observation(o, &reg).is_ok(), expect_ok);
        }
    }
}
