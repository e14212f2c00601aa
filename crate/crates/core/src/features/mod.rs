//! Audio input and log-mel filterbank extraction.

mod fbank;
mod wav;

pub use fbank::{fbank, hz_to_mel, mel_center_frequencies, mel_to_hz, Fbank, FbankConfig};
pub use wav::{read_wav, write_wav, AudioBuffer, EXPECTED_SAMPLE_RATE};
