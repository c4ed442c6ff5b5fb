//! Two-stage audio bandwidth extension: degradation simulation, latent
//! diffusion over log-mel spectrograms, replacement post-processing and
//! log-spectral-distance evaluation.

pub mod bandwidth;
mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod latent_codec;
mod nn;
pub mod pipeline;
pub mod signal_io;
pub mod spectral;
pub mod synth;

pub use error::{Error, Result};
pub use latent_codec::{LatentCodec, LatentTensor, ReferenceCodec, VariationalCodec};
pub use nn::Adam;
pub use signal_io::{read_wav, resample_cubic, write_wav, AudioBuffer, WavEncoding};
pub use spectral::{
    istft, mel_to_wav_reference, stft, wav_to_logmel, ComplexSpectrogram, LogMelSpectrogram,
    SpectralConfig,
};
