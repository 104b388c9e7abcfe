//! Shared fixtures for the benchmarks.

use blamebox_core::harness::{build_study, gen_sensor_series, ScenarioConfig, SensorSynthSpec, SimStudy};
use blamebox_core::rng::substream;
use blamebox_core::SensorSeries;

/// The fig3 study with databases and fingerprint models already fitted.
pub fn fig3_study(seed: u64) -> SimStudy {
    let mut cfg = ScenarioConfig::builtin("fig3").expect("fig3 is built in");
    cfg.seed = seed;
    build_study(&cfg).expect("fig3 builds")
}

/// `n` anomaly-free sensor sequences of shape `channels x timesteps`.
pub fn sensor_sequences(channels: usize, timesteps: usize, n: usize, seed: u64) -> Vec<SensorSeries> {
    let spec = SensorSynthSpec::with_shape(channels, timesteps, 0.01, timesteps / 2);
    let mut rng = substream(seed, "bench-sensors", 0);
    (0..n)
        .map(|_| gen_sensor_series(&spec, None, &mut rng).expect("valid sensor spec"))
        .collect()
}
