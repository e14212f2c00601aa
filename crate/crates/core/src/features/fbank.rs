//! Log-mel filterbank features.
//!
//! Pipeline per frame: Hamming window → power spectrum → triangular mel
//! filters → natural log with a floor. Frames are taken without dither, DC
//! removal, pre-emphasis or end padding.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::wav::AudioBuffer;
use crate::error::{config_err, input_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FbankConfig {
    pub sample_rate: u32,
    pub num_mels: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub mel_low_hz: f64,
    pub mel_high_hz: f64,
    pub log_floor: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        FbankConfig {
            sample_rate: 16_000,
            num_mels: 80,
            window_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 512,
            mel_low_hz: 20.0,
            mel_high_hz: 7600.0,
            log_floor: 1e-10,
        }
    }
}

impl FbankConfig {
    pub fn window_samples(&self) -> usize {
        (self.sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    /// `1 + floor((n − window) / hop)`, or `None` when fewer than one window is available.
    pub fn num_frames(&self, num_samples: usize) -> Option<usize> {
        let win = self.window_samples();
        (num_samples >= win).then(|| 1 + (num_samples - win) / self.hop_samples())
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.num_mels == 0 {
            return Err(config_err!("sample_rate and num_mels must be positive"));
        }
        let win = self.window_samples();
        if win == 0 || self.hop_samples() == 0 {
            return Err(config_err!("window and hop must cover at least one sample"));
        }
        if win > self.fft_size {
            return Err(config_err!("window of {win} samples exceeds fft_size {}", self.fft_size));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(0.0 <= self.mel_low_hz && self.mel_low_hz < self.mel_high_hz && self.mel_high_hz <= nyquist) {
            return Err(config_err!(
                "mel range must satisfy 0 ≤ low < high ≤ {nyquist} Hz (got {}..{})",
                self.mel_low_hz,
                self.mel_high_hz
            ));
        }
        if !(self.log_floor > 0.0) {
            return Err(config_err!("log_floor must be positive"));
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// Center frequency (Hz) of every mel filter, lowest first.
pub fn mel_center_frequencies(config: &FbankConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(config.mel_low_hz), hz_to_mel(config.mel_high_hz));
    let delta = (hi - lo) / (config.num_mels + 1) as f64;
    (1..=config.num_mels).map(|j| mel_to_hz(lo + j as f64 * delta)).collect()
}

/// Reusable extractor holding the window, filter weights and FFT plan.
pub struct Fbank {
    config: FbankConfig,
    window: Vec<f32>,
    /// Per filter: first FFT bin and the weights from that bin on.
    filters: Vec<(usize, Vec<f32>)>,
    fft: Arc<dyn Fft<f32>>,
}

impl Fbank {
    pub fn new(config: FbankConfig) -> Result<Self> {
        config.validate()?;
        let win = config.window_samples();
        let window = (0..win)
            .map(|n| (0.54 - 0.46 * (2.0 * PI * n as f64 / (win - 1).max(1) as f64).cos()) as f32)
            .collect();

        let num_bins = config.fft_size / 2 + 1;
        let bin_hz = config.sample_rate as f64 / config.fft_size as f64;
        let (lo, hi) = (hz_to_mel(config.mel_low_hz), hz_to_mel(config.mel_high_hz));
        let delta = (hi - lo) / (config.num_mels + 1) as f64;
        let filters = (0..config.num_mels)
            .map(|j| {
                let left = lo + j as f64 * delta;
                let center = left + delta;
                let right = center + delta;
                let weights: Vec<(usize, f32)> = (0..num_bins)
                    .filter_map(|b| {
                        let m = hz_to_mel(b as f64 * bin_hz);
                        let w = if m > left && m <= center {
                            (m - left) / (center - left)
                        } else if m > center && m < right {
                            (right - m) / (right - center)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((b, w as f32))
                    })
                    .collect();
                let start = weights.first().map_or(0, |w| w.0);
                (start, weights.into_iter().map(|w| w.1).collect())
            })
            .collect();

        let fft = FftPlanner::new().plan_fft_forward(config.fft_size);
        Ok(Fbank { config, window, filters, fft })
    }

    pub fn config(&self) -> &FbankConfig {
        &self.config
    }

    /// `num_mels × T` log-mel energies.
    pub fn compute(&self, audio: &AudioBuffer) -> Result<Tensor> {
        let cfg = &self.config;
        if audio.sample_rate() != cfg.sample_rate {
            return Err(input_err!(
                "audio is {} Hz but the extractor expects {} Hz",
                audio.sample_rate(),
                cfg.sample_rate
            ));
        }
        let samples = audio.samples();
        let frames = cfg.num_frames(samples.len()).ok_or_else(|| {
            input_err!(
                "audio has {} samples, fewer than one {}-sample window",
                samples.len(),
                cfg.window_samples()
            )
        })?;
        let (win, hop) = (cfg.window_samples(), cfg.hop_samples());
        let num_bins = cfg.fft_size / 2 + 1;
        let floor = cfg.log_floor;

        let mut out = vec![0.0f32; cfg.num_mels * frames];
        let mut buf = vec![Complex::new(0.0f32, 0.0); cfg.fft_size];
        let mut scratch = vec![Complex::new(0.0f32, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0f32; num_bins];
        for t in 0..frames {
            let frame = &samples[t * hop..t * hop + win];
            for (i, slot) in buf.iter_mut().enumerate() {
                let v = if i < win { frame[i] * self.window[i] } else { 0.0 };
                *slot = Complex::new(v, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (j, (start, weights)) in self.filters.iter().enumerate() {
                let energy: f64 = weights.iter().zip(&power[*start..]).map(|(w, p)| (*w as f64) * (*p as f64)).sum();
                out[j * frames + t] = energy.max(floor).ln() as f32;
            }
        }
        Ok(Tensor::from_parts(vec![cfg.num_mels, frames], out))
    }
}

/// One-shot convenience around [`Fbank`].
pub fn fbank(audio: &AudioBuffer, config: &FbankConfig) -> Result<Tensor> {
    Fbank::new(config.clone())?.compute(audio)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, seconds: f64, amp: f64) -> AudioBuffer {
        let n = (16_000.0 * seconds) as usize;
        let s = (0..n).map(|i| (amp * (2.0 * PI * freq * i as f64 / 16_000.0).sin()) as f32).collect();
        AudioBuffer::new(s, 16_000).unwrap()
    }

    #[test]
    fn frame_count_one_second() {
        let cfg = FbankConfig::default();
        assert_eq!((cfg.window_samples(), cfg.hop_samples()), (400, 160));
        let f = fbank(&tone(300.0, 1.0, 0.1), &cfg).unwrap();
        assert_eq!(f.shape(), &[80, 98]);
    }

    #[test]
    fn silence_hits_the_floor() {
        let cfg = FbankConfig::default();
        let f = fbank(&AudioBuffer::new(vec![0.0; 1600], 16_000).unwrap(), &cfg).unwrap();
        let expected = (1e-10f64).ln() as f32;
        assert!(f.data().iter().all(|&v| v == expected));
    }

    #[test]
    fn tone_peaks_at_nearest_center() {
        let cfg = FbankConfig::default();
        let centers = mel_center_frequencies(&cfg);
        // oracle: analytic nearest center frequency
        let nearest = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
            .unwrap()
            .0;
        let f = fbank(&tone(1000.0, 0.5, 0.5), &cfg).unwrap();
        let t = f.dim(1);
        for frame in 0..t {
            let argmax = (0..80).max_by(|&a, &b| f.data()[a * t + frame].total_cmp(&f.data()[b * t + frame])).unwrap();
            assert_eq!(argmax, nearest);
        }
    }

    #[test]
    fn too_short_is_input_error() {
        let r = fbank(&AudioBuffer::new(vec![0.1; 399], 16_000).unwrap(), &FbankConfig::default());
        assert!(matches!(r, Err(crate::Error::Input(_))));
    }

    #[test]
    fn invalid_config() {
        let mut cfg = FbankConfig { fft_size: 256, ..FbankConfig::default() };
        assert!(cfg.validate().is_err());
        cfg.fft_size = 512;
        cfg.mel_high_hz = 9000.0;
        assert!(cfg.validate().is_err());
    }
}
