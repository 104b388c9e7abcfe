//! Functional profiling fingerprint: an independent Gaussian per
//! (function, timestep) cell, fitted on successful executions, and the
//! exponentially weighted window statistics compared at blame time.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::domain::{ExperienceDb, Fingerprint, FunctionId, ACTIVITY_TOLERANCE};
use crate::error::{Error, Result};

/// Largest value strictly below one half. Deviation mass never reaches it.
const BELOW_HALF: f64 = 0.499_999_999_999_999_94;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlameConfig {
    /// Decay per timestep of the weight given to counts before the failure.
    pub alpha: f64,
    /// Number of timesteps looked at, ending at the failure time.
    pub window_steps: usize,
    /// Lower bound on the success-case likelihood.
    pub epsilon_floor: f64,
    /// Lower bound on every fitted cell variance.
    pub var_floor: f64,
}

impl BlameConfig {
    pub const DEFAULT_WINDOW_SECONDS: f64 = 2.0;
    pub const DEFAULT_EPSILON_FLOOR: f64 = 1e-6;
    pub const DEFAULT_VAR_FLOOR: f64 = 1e-6;

    /// Two-second window at sampling interval `dt`, decaying to a tenth of
    /// its weight across the window.
    pub fn for_dt(dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Config(format!("sampling interval must be positive, got {dt}")));
        }
        let window_steps = ((Self::DEFAULT_WINDOW_SECONDS / dt) - 1e-9).ceil().max(1.0) as usize;
        Ok(Self {
            alpha: std::f64::consts::LN_10 / window_steps as f64,
            window_steps,
            epsilon_floor: Self::DEFAULT_EPSILON_FLOOR,
            var_floor: Self::DEFAULT_VAR_FLOOR,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.window_steps == 0 {
            return Err(Error::Config("window_steps must be at least 1".into()));
        }
        if !(self.epsilon_floor > 0.0 && self.epsilon_floor < 0.5) {
            return Err(Error::Config(format!(
                "epsilon_floor must lie in (0, 0.5), got {}",
                self.epsilon_floor
            )));
        }
        if !(self.var_floor.is_finite() && self.var_floor > 0.0) {
            return Err(Error::Config(format!("var_floor must be > 0, got {}", self.var_floor)));
        }
        Ok(())
    }

    /// First timestep of the window ending at `t_fail`.
    pub(crate) fn window_start(&self, t_fail: usize) -> usize {
        (t_fail + 1).saturating_sub(self.window_steps)
    }

    fn weights(&self, t_fail: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.window_start(t_fail)..=t_fail).map(move |t| (t, (-self.alpha * (t_fail - t) as f64).exp()))
    }
}

impl Default for BlameConfig {
    fn default() -> Self {
        Self::for_dt(0.1).expect("0.1 s is a valid sampling interval")
    }
}

/// Per-cell Gaussian statistics of a skill's fingerprints.
#[derive(Debug, Clone, PartialEq)]
pub struct FpfModel {
    mean: Array2<f64>,
    var: Array2<f64>,
    n_samples: usize,
    var_floor: f64,
    active: Vec<bool>,
}

impl FpfModel {
    pub fn from_parts(mean: Array2<f64>, var: Array2<f64>, n_samples: usize, var_floor: f64) -> Result<Self> {
        if mean.dim() != var.dim() {
            return Err(Error::DimensionMismatch {
                what: "fingerprint model variance columns".into(),
                expected: mean.ncols(),
                found: var.ncols(),
            });
        }
        if mean.ncols() == 0 || mean.nrows() == 0 {
            return Err(Error::Empty("fingerprint model has no cells".into()));
        }
        if !(var_floor > 0.0) {
            return Err(Error::Config(format!("var_floor must be > 0, got {var_floor}")));
        }
        for ((row, col), &v) in var.indexed_iter() {
            if !v.is_finite() || !mean[[row, col]].is_finite() {
                return Err(Error::NonFinite {
                    matrix: "fingerprint model",
                    row,
                    col,
                });
            }
            if v < var_floor {
                return Err(Error::Config(format!(
                    "variance {v} at ({row}, {col}) is below the floor {var_floor}"
                )));
            }
        }
        let active = mean
            .rows()
            .into_iter()
            .map(|r| r.iter().any(|m| m.abs() > ACTIVITY_TOLERANCE))
            .collect();
        Ok(Self {
            mean,
            var,
            n_samples,
            var_floor,
            active,
        })
    }

    pub fn mean(&self) -> &Array2<f64> {
        &self.mean
    }

    pub fn var(&self) -> &Array2<f64> {
        &self.var
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn var_floor(&self) -> f64 {
        self.var_floor
    }

    pub fn functions(&self) -> usize {
        self.mean.nrows()
    }

    pub fn len(&self) -> usize {
        self.mean.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.ncols() == 0
    }

    /// Whether the skill ever calls `f` on average.
    pub fn is_active(&self, f: FunctionId) -> bool {
        self.active[f.0]
    }

    fn check_t(&self, t_fail: usize) -> Result<()> {
        if t_fail >= self.len() {
            return Err(Error::OutOfRange {
                what: "t_fail",
                value: t_fail,
                len: self.len(),
            });
        }
        Ok(())
    }
}

/// Sample mean and maximum-likelihood variance of every cell across the
/// database, variance floored at `config.var_floor`.
pub fn fit_fpf(db: &ExperienceDb, config: &BlameConfig) -> Result<FpfModel> {
    config.validate()?;
    let observations = db.observations();
    let first = observations
        .first()
        .ok_or_else(|| Error::Empty(format!("experience database of {} is empty", db.skill())))?;
    let dim = first.fingerprint.counts().dim();
    let n = observations.len() as f64;

    let mut mean = Array2::<f64>::zeros(dim);
    for obs in observations {
        mean += obs.fingerprint.counts();
    }
    mean /= n;

    let mut var = Array2::<f64>::zeros(dim);
    for obs in observations {
        ndarray::Zip::from(&mut var)
            .and(obs.fingerprint.counts())
            .and(&mean)
            .for_each(|v, &c, &m| *v += (c - m) * (c - m));
    }
    var.mapv_inplace(|v| (v / n).max(config.var_floor));

    FpfModel::from_parts(mean, var, observations.len(), config.var_floor)
}

/// Window-weighted expectation of one function's counts and its variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedStats {
    pub mean: f64,
    pub var: f64,
}

/// Expected weighted count of `f` over the window ending at `t_fail`, with the
/// variance of that weighted average under independent timesteps.
pub fn expected_weighted_stats(
    model: &FpfModel,
    f: FunctionId,
    t_fail: usize,
    config: &BlameConfig,
) -> Result<WeightedStats> {
    model.check_t(t_fail)?;
    let n_w = (t_fail + 1 - config.window_start(t_fail)) as f64;
    let (mut mean, mut var) = (0.0, 0.0);
    for (t, w) in config.weights(t_fail) {
        mean += w * model.mean[[f.0, t]];
        var += w * w * model.var[[f.0, t]];
    }
    Ok(WeightedStats {
        mean: mean / n_w,
        var: var / (n_w * n_w),
    })
}

/// The same window average applied to an executed fingerprint.
pub fn exec_weighted_mean(
    fingerprint: &Fingerprint,
    f: FunctionId,
    t_fail: usize,
    config: &BlameConfig,
) -> Result<f64> {
    if t_fail >= fingerprint.len() {
        return Err(Error::OutOfRange {
            what: "t_fail",
            value: t_fail,
            len: fingerprint.len(),
        });
    }
    let counts = fingerprint.counts();
    let n_w = (t_fail + 1 - config.window_start(t_fail)) as f64;
    let sum: f64 = config.weights(t_fail).map(|(t, w)| w * counts[[f.0, t]]).sum();
    Ok(sum / n_w)
}

/// Probability mass of `N(mean, var)` between `x` and `mean`.
pub fn deviation_mass(x: f64, mean: f64, var: f64) -> Result<f64> {
    if !(var > 0.0) {
        return Err(Error::Config(format!("deviation variance must be > 0, got {var}")));
    }
    let z = (x - mean).abs() / var.sqrt();
    Ok((0.5 * erf(z / std::f64::consts::SQRT_2)).min(BELOW_HALF))
}
