//! Single-thread real-time-factor measurement.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};
use crate::features::{AudioBuffer, Fbank, FbankConfig};
use crate::model::Model;

/// Source of timestamps in seconds.
pub trait Clock {
    fn now(&mut self) -> f64;
}

/// Monotonic wall clock.
pub struct WallClock(Instant);

impl WallClock {
    pub fn new() -> Self {
        WallClock(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now(&mut self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Advances by a fixed `tick` on every reading, so each timed region lasts
/// exactly `tick` seconds.
pub struct FakeClock {
    pub t: f64,
    pub tick: f64,
}

impl Clock for FakeClock {
    fn now(&mut self) -> f64 {
        let t = self.t;
        self.t += self.tick;
        t
    }
}

#[derive(Clone, Debug)]
pub struct RtfConfig {
    pub audio_seconds: f64,
    pub repeats: usize,
    /// Time feature extraction together with the network.
    pub include_features: bool,
    pub seed: u64,
}

impl RtfConfig {
    pub fn new(audio_seconds: f64, repeats: usize) -> Self {
        RtfConfig { audio_seconds, repeats, include_features: false, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct RtfReport {
    pub audio_seconds: f64,
    pub frames: usize,
    pub repeats: usize,
    /// Wall time of each timed run, in seconds.
    pub times: Vec<f64>,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    /// `median / audio_seconds`.
    pub rtf: f64,
    pub threads: usize,
    pub include_features: bool,
}

impl RtfReport {
    pub fn summary(&self) -> String {
        format!(
            "threads={} audio={:.2}s frames={} repeats={} median={:.6}s min={:.6}s max={:.6}s rtf={:.6} features={}",
            self.threads,
            self.audio_seconds,
            self.frames,
            self.repeats,
            self.median,
            self.min,
            self.max,
            self.rtf,
            if self.include_features { "timed" } else { "excluded" }
        )
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `repeats` embedding extractions of synthetic noise on the calling
/// thread (one untimed warm-up run first). Audio decoding and weight loading
/// are never timed.
pub fn benchmark_rtf(model: &Model, cfg: &RtfConfig, clock: &mut dyn Clock) -> Result<RtfReport> {
    if cfg.repeats < 3 {
        return Err(config_err!("repeats must be at least 3, got {}", cfg.repeats));
    }
    if !(cfg.audio_seconds > 0.0) {
        return Err(config_err!("audio duration must be positive"));
    }
    let fbank = Fbank::new(FbankConfig::default())?;
    let n = (cfg.audio_seconds * fbank.config().sample_rate as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let audio = AudioBuffer::new((0..n).map(|_| rng.gen_range(-0.1f32..0.1)).collect(), fbank.config().sample_rate)?;
    let features = fbank.compute(&audio)?;
    let frames = features.dim(1);

    let run = |timed_features: bool| -> Result<()> {
        if timed_features {
            let f = fbank.compute(&audio)?;
            model.extract_embedding(&f)?;
        } else {
            model.extract_embedding(&features)?;
        }
        Ok(())
    };
    run(cfg.include_features)?;
    let mut times = Vec::with_capacity(cfg.repeats);
    for _ in 0..cfg.repeats {
        let start = clock.now();
        run(cfg.include_features)?;
        times.push(clock.now() - start);
    }
    let med = median(&times);
    Ok(RtfReport {
        audio_seconds: cfg.audio_seconds,
        frames,
        repeats: cfg.repeats,
        min: times.iter().cloned().fold(f64::INFINITY, f64::min),
        max: times.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        median: med,
        rtf: med / cfg.audio_seconds,
        times,
        threads: 1,
        include_features: cfg.include_features,
    })
}
