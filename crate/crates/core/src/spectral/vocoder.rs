use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mel_bank, ComplexSpectrogram, LogMelSpectrogram, Stft};
use crate::error::Result;
use crate::signal_io::AudioBuffer;

/// Mel-to-waveform slot of the pipeline.
pub trait Vocoder: Send + Sync {
    fn mel_to_wav(&self, mel: &LogMelSpectrogram) -> Result<AudioBuffer>;
}

/// Reference inverter: transpose-normalized mel lift followed by
/// alternating-projection phase reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GriffinLim {
    pub iters: usize,
    /// Seed for the initial random phase.
    pub seed: u64,
}

impl Default for GriffinLim {
    fn default() -> Self {
        Self { iters: 32, seed: 0 }
    }
}

impl GriffinLim {
    pub fn new(iters: usize) -> Self {
        Self {
            iters: iters.max(1),
            ..Self::default()
        }
    }

    /// Bin magnitudes implied by a log-mel spectrogram.
    pub fn lift_magnitude(mel: &LogMelSpectrogram) -> Result<Array2<f64>> {
        let cfg = mel.config();
        let bank = mel_bank(cfg)?;
        let mut mags = Array2::zeros((mel.n_frames(), cfg.n_bins()));
        let mut bands = vec![0.0; cfg.n_mels];
        let mut out = vec![0.0; cfg.n_bins()];
        for (t, row) in mel.data().rows().into_iter().enumerate() {
            for (b, v) in bands.iter_mut().zip(row.iter()) {
                *b = 10f64.powf(*v);
            }
            bank.lift(&bands, &mut out);
            for (m, o) in mags.row_mut(t).iter_mut().zip(&out) {
                *m = *o;
            }
        }
        Ok(mags)
    }
}

impl Vocoder for GriffinLim {
    fn mel_to_wav(&self, mel: &LogMelSpectrogram) -> Result<AudioBuffer> {
        let cfg = *mel.config();
        let engine = Stft::new(cfg)?;
        let mags = Self::lift_magnitude(mel)?;
        let length = mel.n_frames().saturating_sub(1) * cfg.hop;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut spec = ComplexSpectrogram {
            data: mags.mapv(|m| Complex64::from_polar(m, rng.random_range(-PI..PI))),
            cfg,
            length,
        };
        for _ in 0..self.iters.max(1) {
            let x = engine.inverse(&spec)?;
            let rebuilt = engine.forward_samples(x.samples());
            let frames = rebuilt.n_frames().min(spec.n_frames());
            for t in 0..frames {
                for b in 0..cfg.n_bins() {
                    let c = rebuilt.data[[t, b]];
                    let n = c.norm();
                    let m = mags[[t, b]];
                    spec.data[[t, b]] = if n > 0.0 { c * (m / n) } else { Complex64::new(m, 0.0) };
                }
            }
        }
        engine.inverse(&spec)
    }
}

/// Reference mel inversion with `iters` phase-reconstruction rounds.
pub fn mel_to_wav_reference(mel: &LogMelSpectrogram, iters: usize) -> Result<AudioBuffer> {
    GriffinLim::new(iters).mel_to_wav(mel)
}
