//! Belief over which function holds the bug, and its Bayesian update from one
//! executed skill.

use serde::{Deserialize, Serialize};

use crate::domain::{Fingerprint, FunctionId, Observation, SkillId};
use crate::error::{Error, Result};
use crate::fpf::{deviation_mass, exec_weighted_mean, expected_weighted_stats, BlameConfig, FpfModel};

/// Likelihood given to functions the observation says nothing about.
pub const NEUTRAL_LIKELIHOOD: f64 = 0.5;

const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// Normalized probability vector over the registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Belief {
    probs: Vec<f64>,
}

impl Belief {
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("belief over zero functions".into()));
        }
        Ok(Self {
            probs: vec![1.0 / n as f64; n],
        })
    }

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("belief over zero functions".into()));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config(format!(
                "belief entry {i} is {} (must be finite and >= 0)",
                probs[i]
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::Config(format!("belief sums to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    /// Normalizes nonnegative weights into a belief.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Config(format!("cannot normalize weights with total {total}")));
        }
        Ok(Self {
            probs: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, f: FunctionId) -> f64 {
        self.probs[f.0]
    }

    /// Most blamed function; ties go to the lowest index.
    pub fn argmax(&self) -> FunctionId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        FunctionId(best)
    }

    /// The `k` most blamed functions, descending, ties by index.
    pub fn top_k(&self, k: usize) -> Vec<(FunctionId, f64)> {
        let mut order: Vec<usize> = (0..self.probs.len()).collect();
        order.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(a.cmp(&b)));
        order
            .into_iter()
            .take(k)
            .map(|i| (FunctionId(i), self.probs[i]))
            .collect()
    }
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(belief: &Belief) -> f64 {
    -belief
        .probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

fn unused_in_window(
    model: &FpfModel,
    fingerprint: &Fingerprint,
    f: FunctionId,
    t_fail: usize,
    config: &BlameConfig,
) -> bool {
    if !model.is_active(f) && !fingerprint.is_active(f) {
        return true;
    }
    let quiet = |row: ndarray::ArrayView1<'_, f64>| {
        (config.window_start(t_fail)..=t_fail).all(|t| row[t].abs() <= crate::domain::ACTIVITY_TOLERANCE)
    };
    quiet(model.mean().row(f.0)) && quiet(fingerprint.row(f))
}

fn effective_failure_time(len: usize, success: bool, t_fail: Option<usize>) -> Result<usize> {
    let last = len
        .checked_sub(1)
        .ok_or_else(|| Error::Empty("zero-length fingerprint".into()))?;
    match (success, t_fail) {
        (true, _) | (false, None) => Ok(last),
        (false, Some(t)) if t < len => Ok(t),
        (false, Some(t)) => Err(Error::OutOfRange {
            what: "t_fail",
            value: t,
            len,
        }),
    }
}

/// Probability of the observation given that `f` is the buggy function.
///
/// Failures give every function active in the window a likelihood of at least
/// one half, growing with how far its weighted count strays from experience.
/// Successes give `max(epsilon, p_dev)`: functions that behaved normally are
/// exonerated. Functions silent in both the model and the execution get the
/// neutral one half either way.
///
/// `t_fail` is ignored on success (the whole execution is the window) and
/// defaults to the last timestep on failure.
pub fn likelihood(
    model: &FpfModel,
    fingerprint: &Fingerprint,
    f: FunctionId,
    success: bool,
    t_fail: Option<usize>,
    config: &BlameConfig,
) -> Result<f64> {
    check_shapes(model, fingerprint)?;
    let t = effective_failure_time(model.len(), success, t_fail)?;
    likelihood_at(model, fingerprint, f, success, t, config)
}

fn likelihood_at(
    model: &FpfModel,
    fingerprint: &Fingerprint,
    f: FunctionId,
    success: bool,
    t_fail: usize,
    config: &BlameConfig,
) -> Result<f64> {
    if unused_in_window(model, fingerprint, f, t_fail, config) {
        return Ok(NEUTRAL_LIKELIHOOD);
    }
    let expected = expected_weighted_stats(model, f, t_fail, config)?;
    let observed = exec_weighted_mean(fingerprint, f, t_fail, config)?;
    let p_dev = deviation_mass(observed, expected.mean, expected.var)?;
    Ok(if success {
        p_dev.max(config.epsilon_floor)
    } else {
        (1.0 + p_dev) / 2.0
    })
}

fn check_shapes(model: &FpfModel, fingerprint: &Fingerprint) -> Result<()> {
    if model.functions() != fingerprint.functions() {
        return Err(Error::DimensionMismatch {
            what: "fingerprint rows vs model rows".into(),
            expected: model.functions(),
            found: fingerprint.functions(),
        });
    }
    if model.len() != fingerprint.len() {
        return Err(Error::DimensionMismatch {
            what: "fingerprint timesteps vs model timesteps".into(),
            expected: model.len(),
            found: fingerprint.len(),
        });
    }
    Ok(())
}

/// Likelihood of every function, in registry order.
pub fn likelihoods(
    model: &FpfModel,
    fingerprint: &Fingerprint,
    success: bool,
    t_fail: Option<usize>,
    config: &BlameConfig,
) -> Result<Vec<f64>> {
    check_shapes(model, fingerprint)?;
    let t = effective_failure_time(model.len(), success, t_fail)?;
    let mut out = vec![NEUTRAL_LIKELIHOOD; model.functions()];
    for (i, l) in out.iter_mut().enumerate() {
        let f = FunctionId(i);
        if model.is_active(f) || fingerprint.is_active(f) {
            *l = likelihood_at(model, fingerprint, f, success, t, config)?;
        }
    }
    Ok(out)
}

/// Posterior proportional to `likelihood * prior`.
pub fn posterior(prior: &Belief, likelihoods: &[f64]) -> Result<Belief> {
    if likelihoods.len() != prior.len() {
        return Err(Error::DimensionMismatch {
            what: "likelihood vector vs belief".into(),
            expected: prior.len(),
            found: likelihoods.len(),
        });
    }
    let weights: Vec<f64> = prior.probs.iter().zip(likelihoods).map(|(p, l)| p * l).collect();
    Belief::from_weights(weights)
}

/// Audit entry for one belief update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub skill: SkillId,
    pub success: bool,
    pub t_fail: usize,
    pub likelihoods: Vec<f64>,
    pub prior_entropy: f64,
    pub posterior_entropy: f64,
}

/// One Bayes step using the fingerprint model of the observation's skill.
pub fn bayes_update(
    belief: &Belief,
    fpf_by_skill: &[FpfModel],
    obs: &Observation,
    success: bool,
    t_fail: Option<usize>,
    config: &BlameConfig,
) -> Result<(Belief, UpdateRecord)> {
    let model = fpf_by_skill
        .get(obs.skill.0)
        .ok_or_else(|| Error::Config(format!("no fingerprint model for {}", obs.skill)))?;
    let t = effective_failure_time(model.len(), success, t_fail)?;
    let ls = likelihoods(model, &obs.fingerprint, success, Some(t), config)?;
    let post = posterior(belief, &ls)?;
    let record = UpdateRecord {
        skill: obs.skill,
        success,
        t_fail: t,
        prior_entropy: entropy(belief),
        posterior_entropy: entropy(&post),
        likelihoods: ls,
    };
    Ok((post, record))
}
