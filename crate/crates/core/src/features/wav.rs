use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{input_err, Error, Result};

pub const EXPECTED_SAMPLE_RATE: u32 = 16_000;

/// Mono PCM audio in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(input_err!("audio buffer is empty"));
        }
        if sample_rate == 0 {
            return Err(input_err!("sample rate must be positive"));
        }
        Ok(AudioBuffer { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

/// Reads a 16-bit little-endian mono 16 kHz PCM WAV file. Other encodings,
/// channel counts and rates are rejected; nothing is resampled.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => format_err(path, other),
    })?;
    let spec = reader.spec();
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(format_err(
            path,
            format_args!("expected 16-bit integer PCM, found {:?} with {} bits", spec.sample_format, spec.bits_per_sample),
        ));
    }
    if spec.channels != 1 {
        return Err(format_err(path, format_args!("expected mono audio, found {} channels", spec.channels)));
    }
    if spec.sample_rate != EXPECTED_SAMPLE_RATE {
        return Err(format_err(
            path,
            format_args!("expected {EXPECTED_SAMPLE_RATE} Hz, found {} Hz", spec.sample_rate),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| format_err(path, e))?;
    AudioBuffer::new(samples, spec.sample_rate).map_err(|_| format_err(path, "no samples"))
}

/// Writes 16-bit mono PCM, clipping to the representable range.
pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let path = path.as_ref();
    let mut w = WavWriter::create(path, spec).map_err(|e| format_err(path, e))?;
    for &s in &audio.samples {
        let v = (s * 32768.0).round().clamp(i16::MIN as f32, i16::MAX as f32) as i16;
        w.write_sample(v).map_err(|e| format_err(path, e))?;
    }
    w.finalize().map_err(|e| format_err(path, e))
}
