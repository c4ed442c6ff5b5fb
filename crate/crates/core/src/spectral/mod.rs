//! Short-time Fourier analysis, mel filterbanks and the reference mel inverter.

mod mel;
mod vocoder;

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::AudioBuffer;

pub use mel::{mel_bank, wav_to_logmel, hz_to_mel, mel_to_hz, LogMelSpectrogram, MelBank};
pub use vocoder::{mel_to_wav_reference, GriffinLim, Vocoder};

/// Analysis parameters shared by the STFT and mel front end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub n_mels: usize,
    pub mel_fmin: f64,
    pub mel_fmax: f64,
    /// Amplitude floor applied before `log10`.
    pub log_floor: f64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            n_fft: 2048,
            hop: 480,
            sample_rate: 48_000,
            n_mels: 256,
            mel_fmin: 0.0,
            mel_fmax: 24_000.0,
            log_floor: 1e-5,
        }
    }
}

impl SpectralConfig {
    /// Default analysis geometry at an arbitrary rate; the mel range spans the full band.
    pub fn for_rate(sample_rate: u32) -> Self {
        Self {
            sample_rate,
            mel_fmax: sample_rate as f64 / 2.0,
            ..Self::default()
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn bin_hz(&self) -> f64 {
        self.sample_rate as f64 / self.n_fft as f64
    }

    pub fn floor_db(&self) -> f64 {
        self.log_floor.log10()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 4 || self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::InvalidArgument(format!(
                "need 0 < hop <= n_fft (hop {}, n_fft {})",
                self.hop, self.n_fft
            )));
        }
        if self.n_mels == 0 || self.n_mels >= self.n_bins() {
            return Err(Error::InvalidArgument(format!(
                "n_mels {} must be in 1..{}",
                self.n_mels,
                self.n_bins()
            )));
        }
        if !(self.mel_fmin >= 0.0
            && self.mel_fmin < self.mel_fmax
            && self.mel_fmax <= self.sample_rate as f64 / 2.0)
        {
            return Err(Error::InvalidArgument("mel range must lie in [0, nyquist]".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::InvalidArgument("log floor must be positive".into()));
        }
        Ok(())
    }

    /// Frame count for a signal of `len` samples with centered framing.
    pub fn n_frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }
}

/// Frames × bins complex STFT.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub data: Array2<Complex64>,
    pub cfg: SpectralConfig,
    /// Length in samples of the signal the frames describe.
    pub length: usize,
}

impl ComplexSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.data.ncols()
    }

    pub fn bin_frequency(&self, bin: usize) -> f64 {
        bin as f64 * self.cfg.bin_hz()
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.data.mapv(|c| c.norm())
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reflect index into `0..len` (edge sample not repeated), bouncing as needed.
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Reusable forward/inverse transform with cached FFT plans.
pub struct Stft {
    cfg: SpectralConfig,
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: SpectralConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: hann(cfg.n_fft),
            fwd: planner.plan_fft_forward(cfg.n_fft),
            inv: planner.plan_fft_inverse(cfg.n_fft),
            cfg,
        })
    }

    pub fn config(&self) -> &SpectralConfig {
        &self.cfg
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn forward(&self, buf: &AudioBuffer) -> Result<ComplexSpectrogram> {
        if buf.sample_rate() != self.cfg.sample_rate {
            return Err(Error::RateMismatch {
                expected: self.cfg.sample_rate,
                actual: buf.sample_rate(),
            });
        }
        Ok(self.forward_samples(buf.samples()))
    }

    pub(crate) fn forward_samples(&self, x: &[f64]) -> ComplexSpectrogram {
        let n_fft = self.cfg.n_fft;
        let hop = self.cfg.hop;
        let n_bins = self.cfg.n_bins();
        let frames = self.cfg.n_frames(x.len());
        let half = (n_fft / 2) as isize;
        let mut data = Array2::<Complex64>::zeros((frames, n_bins));
        let mut scratch = vec![Complex64::new(0.0, 0.0); n_fft];
        for t in 0..frames {
            let start = (t * hop) as isize - half;
            for (k, slot) in scratch.iter_mut().enumerate() {
                let v = if x.is_empty() {
                    0.0
                } else {
                    x[reflect(start + k as isize, x.len())]
                };
                *slot = Complex64::new(v * self.window[k], 0.0);
            }
            self.fwd.process(&mut scratch);
            for (b, v) in data.row_mut(t).iter_mut().enumerate() {
                *v = scratch[b];
            }
        }
        ComplexSpectrogram {
            data,
            cfg: self.cfg,
            length: x.len(),
        }
    }

    /// Weighted overlap-add inverse (window-sum-square normalized).
    pub fn inverse(&self, spec: &ComplexSpectrogram) -> Result<AudioBuffer> {
        let cfg = &spec.cfg;
        if cfg.n_fft != self.cfg.n_fft || cfg.hop != self.cfg.hop {
            return Err(Error::ShapeMismatch("spectrogram geometry differs from engine".into()));
        }
        if spec.n_bins() != cfg.n_bins() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} bins, got {}",
                cfg.n_bins(),
                spec.n_bins()
            )));
        }
        if cfg.hop > cfg.n_fft / 2 {
            return Err(Error::NonInvertibleConfig(format!(
                "hop {} exceeds n_fft/2 for a Hann window",
                cfg.hop
            )));
        }
        let n_fft = cfg.n_fft;
        let hop = cfg.hop;
        let frames = spec.n_frames();
        let padded_len = (frames.max(1) - 1) * hop + n_fft;
        let mut acc = vec![0.0; padded_len];
        let mut wss = vec![0.0; padded_len];
        let mut scratch = vec![Complex64::new(0.0, 0.0); n_fft];
        let scale = 1.0 / n_fft as f64;
        for t in 0..frames {
            let row = spec.data.row(t);
            for b in 0..=n_fft / 2 {
                scratch[b] = row[b];
            }
            // DC and Nyquist must be real for a real signal.
            scratch[0].im = 0.0;
            scratch[n_fft / 2].im = 0.0;
            for b in 1..n_fft / 2 {
                scratch[n_fft - b] = row[b].conj();
            }
            self.inv.process(&mut scratch);
            let off = t * hop;
            for k in 0..n_fft {
                let w = self.window[k];
                acc[off + k] += scratch[k].re * scale * w;
                wss[off + k] += w * w;
            }
        }
        let half = n_fft / 2;
        let out = (0..spec.length)
            .map(|i| {
                let j = i + half;
                if j < padded_len && wss[j] > 1e-10 {
                    acc[j] / wss[j]
                } else {
                    0.0
                }
            })
            .collect();
        AudioBuffer::new(out, cfg.sample_rate)
    }
}

/// Centered STFT with reflect padding of `n_fft / 2` and a periodic Hann window.
pub fn stft(buf: &AudioBuffer, cfg: &SpectralConfig) -> Result<ComplexSpectrogram> {
    Stft::new(*cfg)?.forward(buf)
}

pub fn istft(spec: &ComplexSpectrogram) -> Result<AudioBuffer> {
    Stft::new(spec.cfg)?.inverse(spec)
}
