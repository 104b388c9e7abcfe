//! Measurement observation model.
//!
//! A recurrent autoencoder is trained on sensor sequences of successful
//! executions. Its per-timestep cosine reconstruction error, compared with
//! the error distribution of those successful runs at the same timestep,
//! gives a success likelihood and the earliest time the run looks abnormal.

mod adam;
mod network;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::SensorSeries;
use crate::error::{Error, Result};

pub use adam::{Adam, AdamConfig};
pub use network::{cos_sim, cosine_objective, init_model, random_model, MomModel, Tensor, NORM_GUARD};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MomConfig {
    pub bottleneck: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Width of the centered moving average over z-scores, in timesteps.
    pub smoothing_window: usize,
    /// Smoothed z-score above which a timestep counts as failed.
    pub z_threshold: f64,
    pub sigma_floor: f64,
    pub seed: u64,
}

impl Default for MomConfig {
    fn default() -> Self {
        Self {
            bottleneck: 32,
            epochs: 500,
            adam: AdamConfig::default(),
            smoothing_window: 25,
            z_threshold: 3.0,
            sigma_floor: 1e-6,
            seed: 0,
        }
    }
}

impl MomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.smoothing_window == 0 {
            return Err(Error::Config("smoothing_window must be at least 1".into()));
        }
        if !(self.z_threshold > 0.0) {
            return Err(Error::Config("z_threshold must be positive".into()));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Config("sigma_floor must be positive".into()));
        }
        Ok(())
    }

    /// Bottleneck actually used for `d` input channels: the configured width,
    /// capped below `d`.
    pub fn bottleneck_for(&self, d: usize) -> usize {
        self.bottleneck.min(d.saturating_sub(1))
    }
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct Training {
    pub model: MomModel,
    /// Objective before each epoch's update, then once more after the last.
    pub losses: Vec<f64>,
}

fn check_batch(sequences: &[SensorSeries], min: usize) -> Result<(usize, usize)> {
    let first = sequences
        .first()
        .ok_or_else(|| Error::Empty("no training sequences".into()))?;
    if sequences.len() < min {
        return Err(Error::Config(format!(
            "need at least {min} sequences, got {}",
            sequences.len()
        )));
    }
    let (d, t) = (first.dims(), first.len());
    for s in sequences {
        if s.dims() != d || s.len() != t {
            return Err(Error::DimensionMismatch {
                what: "training sequence shape".into(),
                expected: d * t,
                found: s.dims() * s.len(),
            });
        }
    }
    Ok((d, t))
}

/// Full-batch ADAM on the cosine objective. Inputs are expected to be
/// normalized already (see [`Normalizer`]).
pub fn train(sequences: &[SensorSeries], config: &MomConfig) -> Result<Training> {
    config.validate()?;
    let (d, _) = check_batch(sequences, 2)?;
    let mut model = init_model(d, config.bottleneck, config.seed)?;
    let mut adam = Adam::new(model.params().len(), config.adam);
    let mut losses = Vec::with_capacity(config.epochs + 1);
    for _ in 0..config.epochs {
        let (loss, grad) = model.loss_and_gradient(sequences)?;
        losses.push(loss);
        adam.step(model.params_mut(), &grad);
    }
    losses.push(model.loss(sequences)?);
    Ok(Training { model, losses })
}

/// `1 - cos(x_t, xhat_t)` per timestep, in `[0, 2]`.
pub fn error_series(model: &MomModel, seq: &SensorSeries) -> Result<Vec<f64>> {
    let recon = model.reconstruct(seq)?;
    Ok(reconstruction_errors(seq, &recon))
}

fn reconstruction_errors(seq: &SensorSeries, recon: &SensorSeries) -> Vec<f64> {
    let mut x = vec![0.0; seq.dims()];
    let mut y = vec![0.0; seq.dims()];
    (0..seq.len())
        .map(|t| {
            x.iter_mut().zip(seq.column(t)).for_each(|(a, b)| *a = *b);
            y.iter_mut().zip(recon.column(t)).for_each(|(a, b)| *a = *b);
            (1.0 - cos_sim(&x, &y)).clamp(0.0, 2.0)
        })
        .collect()
}

/// Per-timestep Gaussian of reconstruction errors on successful runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ErrorStats {
    /// Mean and maximum-likelihood standard deviation at each timestep,
    /// standard deviation floored at `sigma_floor`.
    pub fn from_errors(errors: &[Vec<f64>], sigma_floor: f64) -> Result<Self> {
        let first = errors.first().ok_or_else(|| Error::Empty("no error series".into()))?;
        let t = first.len();
        if let Some(bad) = errors.iter().find(|e| e.len() != t) {
            return Err(Error::DimensionMismatch {
                what: "error series length".into(),
                expected: t,
                found: bad.len(),
            });
        }
        let n = errors.len() as f64;
        let mu: Vec<f64> = (0..t).map(|i| errors.iter().map(|e| e[i]).sum::<f64>() / n).collect();
        let sigma = (0..t)
            .map(|i| {
                let var = errors.iter().map(|e| (e[i] - mu[i]).powi(2)).sum::<f64>() / n;
                var.sqrt().max(sigma_floor)
            })
            .collect();
        Ok(Self { mu, sigma })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// Error statistics of `model` over successful training sequences.
pub fn fit_error_stats(model: &MomModel, sequences: &[SensorSeries], sigma_floor: f64) -> Result<ErrorStats> {
    check_batch(sequences, 2)?;
    let errors = sequences
        .par_iter()
        .map(|s| error_series(model, s))
        .collect::<Result<Vec<_>>>()?;
    ErrorStats::from_errors(&errors, sigma_floor)
}

fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Centered moving average of width `w`, shrunk at the boundaries.
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    let left = (w.max(1) - 1) / 2;
    let right = w.max(1) / 2;
    let mut prefix = Vec::with_capacity(values.len() + 1);
    prefix.push(0.0);
    for v in values {
        prefix.push(prefix.last().unwrap() + v);
    }
    (0..values.len())
        .map(|t| {
            let lo = t.saturating_sub(left);
            let hi = (t + right).min(values.len() - 1);
            (prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Density of each timestep's error under that timestep's success Gaussian.
    pub likelihood: Vec<f64>,
    /// Moving average of the one-sided z-scores.
    pub smoothed_z: Vec<f64>,
    pub t_fail: Option<usize>,
}

/// Earliest timestep whose smoothed one-sided z-score exceeds the threshold.
pub fn detect_failure_time(stats: &ErrorStats, errors: &[f64], config: &MomConfig) -> Result<Detection> {
    if errors.len() != stats.len() {
        return Err(Error::DimensionMismatch {
            what: "error series vs error statistics".into(),
            expected: stats.len(),
            found: errors.len(),
        });
    }
    let likelihood = errors
        .iter()
        .enumerate()
        .map(|(t, &e)| normal_pdf(e, stats.mu[t], stats.sigma[t]))
        .collect();
    let z: Vec<f64> = errors
        .iter()
        .enumerate()
        .map(|(t, &e)| ((e - stats.mu[t]) / stats.sigma[t]).max(0.0))
        .collect();
    let smoothed_z = if z.is_empty() {
        Vec::new()
    } else {
        moving_average(&z, config.smoothing_window)
    };
    let t_fail = smoothed_z.iter().position(|&v| v > config.z_threshold);
    Ok(Detection {
        likelihood,
        smoothed_z,
        t_fail,
    })
}

/// Per-channel min-max scaling fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    pub fn fit(sequences: &[SensorSeries]) -> Result<Self> {
        let first = sequences
            .first()
            .ok_or_else(|| Error::Empty("no sequences to normalize".into()))?;
        let d = first.dims();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for s in sequences {
            if s.dims() != d {
                return Err(Error::DimensionMismatch {
                    what: "sensor channels".into(),
                    expected: d,
                    found: s.dims(),
                });
            }
            for (c, row) in s.data().rows().into_iter().enumerate() {
                for &v in row {
                    min[c] = min[c].min(v);
                    max[c] = max[c].max(v);
                }
            }
        }
        Ok(Self { min, max })
    }

    pub fn dims(&self) -> usize {
        self.min.len()
    }

    /// Maps the training range of each channel onto `[0, 1]`; values outside
    /// that range are not clipped. Constant channels are only shifted.
    pub fn apply(&self, seq: &SensorSeries) -> Result<SensorSeries> {
        if seq.dims() != self.dims() {
            return Err(Error::DimensionMismatch {
                what: "sensor channels vs normalizer".into(),
                expected: self.dims(),
                found: seq.dims(),
            });
        }
        let mut out: Array2<f64> = seq.data().clone();
        for (c, mut row) in out.rows_mut().into_iter().enumerate() {
            let range = self.max[c] - self.min[c];
            let scale = if range > 1e-12 { range } else { 1.0 };
            row.mapv_inplace(|v| (v - self.min[c]) / scale);
        }
        SensorSeries::new(out, seq.dt())
    }
}

/// A trained model bundled with what is needed to score raw sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct MomDetector {
    pub normalizer: Normalizer,
    pub model: MomModel,
    pub stats: ErrorStats,
    pub config: MomConfig,
}

impl MomDetector {
    /// Normalizes, trains and fits error statistics on raw successful sequences.
    /// Returns the per-epoch training losses alongside the detector.
    pub fn fit(raw: &[SensorSeries], config: &MomConfig) -> Result<(Self, Vec<f64>)> {
        config.validate()?;
        let (d, _) = check_batch(raw, 2)?;
        let normalizer = Normalizer::fit(raw)?;
        let sequences = raw.iter().map(|s| normalizer.apply(s)).collect::<Result<Vec<_>>>()?;
        let config = MomConfig {
            bottleneck: config.bottleneck_for(d),
            ..*config
        };
        let Training { model, losses } = train(&sequences, &config)?;
        let stats = fit_error_stats(&model, &sequences, config.sigma_floor)?;
        Ok((
            Self {
                normalizer,
                model,
                stats,
                config,
            },
            losses,
        ))
    }

    /// Reconstruction errors of a raw sequence.
    pub fn errors(&self, raw: &SensorSeries) -> Result<Vec<f64>> {
        error_series(&self.model, &self.normalizer.apply(raw)?)
    }

    pub fn detect(&self, raw: &SensorSeries) -> Result<Detection> {
        detect_failure_time(&self.stats, &self.errors(raw)?, &self.config)
    }
}
