//! Lowpass design, degradation simulation and roll-off estimation.

mod design;
mod elliptic;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::{resample_cubic, AudioBuffer};
use crate::spectral::{mel_bank, wav_to_logmel, ComplexSpectrogram, LogMelSpectrogram, SpectralConfig};

pub use design::{
    apply_filter, design_lowpass, Biquad, FilterFamily, FilterKernel, FilterSpec, MAX_ORDER,
    MIN_ORDER,
};

/// Range of simulated cutoffs in Hz.
pub const CUTOFF_RANGE: (f64, f64) = (2000.0, 16_000.0);
/// Energy fraction used for roll-off detection.
pub const ROLLOFF_FRACTION: f64 = 0.99;
const MAX_DESIGN_RETRIES: usize = 8;

/// A drawn degradation, recorded for reproducible dataset builds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSample {
    pub spec: FilterSpec,
    pub cutoff_hz: f64,
    pub seed: u64,
}

/// Draws family, order and cutoff uniformly over the degradation space.
pub fn draw_filter_spec<R: Rng + ?Sized>(rng: &mut R) -> FilterSpec {
    let family = FilterFamily::ALL[rng.random_range(0..FilterFamily::ALL.len())];
    let order = rng.random_range(MIN_ORDER..=MAX_ORDER);
    let cutoff = rng.random_range(CUTOFF_RANGE.0..=CUTOFF_RANGE.1);
    FilterSpec::new(family, order, cutoff)
}

/// Draws a spec that designs successfully at `sample_rate`, redrawing on instability.
pub fn draw_stable_kernel<R: Rng + ?Sized>(
    rng: &mut R,
    sample_rate: u32,
) -> Result<(FilterSpec, FilterKernel)> {
    let mut last = Error::UnstableDesign(f64::NAN);
    for _ in 0..MAX_DESIGN_RETRIES {
        let spec = draw_filter_spec(rng);
        match design_lowpass(&spec, sample_rate) {
            Ok(k) => return Ok((spec, k)),
            Err(e @ Error::UnstableDesign(_)) => last = e,
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

/// A simulated low/high resolution training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPair {
    pub lo_mel: LogMelSpectrogram,
    pub hi_mel: LogMelSpectrogram,
    pub spec: FilterSpec,
}

impl SimulatedPair {
    pub fn cutoff_hz(&self) -> f64 {
        self.spec.cutoff_hz
    }
}

/// Lowpasses `hi` with a randomly drawn filter and returns both log-mels.
pub fn simulate_pair<R: Rng + ?Sized>(hi: &AudioBuffer, rng: &mut R) -> Result<SimulatedPair> {
    let cfg = SpectralConfig::default();
    if hi.sample_rate() != cfg.sample_rate {
        return Err(Error::RateMismatch {
            expected: cfg.sample_rate,
            actual: hi.sample_rate(),
        });
    }
    let (spec, kernel) = draw_stable_kernel(rng, hi.sample_rate())?;
    let lo = apply_filter(hi, &kernel);
    Ok(SimulatedPair {
        lo_mel: wav_to_logmel(&lo, &cfg)?,
        hi_mel: wav_to_logmel(hi, &cfg)?,
        spec,
    })
}

/// Sample rate whose Nyquist frequency equals `cutoff_hz`.
pub fn low_rate_for_cutoff(cutoff_hz: f64) -> u32 {
    (2.0 * cutoff_hz).round().max(1.0) as u32
}

/// Produces the low-resolution observation of `hi`: lowpass, then cubic
/// resampling down to twice the cutoff.
pub fn degrade(hi: &AudioBuffer, spec: &FilterSpec) -> Result<AudioBuffer> {
    let kernel = design_lowpass(spec, hi.sample_rate())?;
    let lo = apply_filter(hi, &kernel);
    resample_cubic(&lo, low_rate_for_cutoff(spec.cutoff_hz))
}

/// Something with a per-frequency energy profile over a whole clip.
pub trait SpectralEnergy {
    /// `(frequency_hz, energy)` per bin or band in ascending frequency.
    fn energy_profile(&self) -> Result<Vec<(f64, f64)>>;
}

impl SpectralEnergy for ComplexSpectrogram {
    fn energy_profile(&self) -> Result<Vec<(f64, f64)>> {
        let mut e = vec![0.0; self.n_bins()];
        for row in self.data.rows() {
            for (acc, c) in e.iter_mut().zip(row.iter()) {
                *acc += c.norm_sqr();
            }
        }
        Ok(e.into_iter()
            .enumerate()
            .map(|(b, v)| (self.bin_frequency(b), v))
            .collect())
    }
}

impl SpectralEnergy for LogMelSpectrogram {
    /// Floored entries count as zero energy.
    fn energy_profile(&self) -> Result<Vec<(f64, f64)>> {
        let cfg = self.config();
        let bank = mel_bank(cfg)?;
        let floor = cfg.floor_db();
        let mut e = vec![0.0; self.n_mels()];
        for row in self.data().rows() {
            for (acc, &v) in e.iter_mut().zip(row.iter()) {
                if v > floor {
                    *acc += 10f64.powf(2.0 * v);
                }
            }
        }
        Ok(e.into_iter()
            .enumerate()
            .map(|(j, v)| (bank.center_hz(j), v))
            .collect())
    }
}

/// Smallest frequency below which `fraction` of the clip's spectral energy lies.
pub fn estimate_rolloff<S: SpectralEnergy + ?Sized>(input: &S, fraction: f64) -> Result<f64> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} not in (0, 1]")));
    }
    let profile = input.energy_profile()?;
    let total: f64 = profile.iter().map(|(_, e)| e).sum();
    if !(total > 0.0) {
        return Err(Error::SilentInput);
    }
    let target = fraction * total;
    let mut acc = 0.0;
    for &(f, e) in &profile {
        acc += e;
        if acc >= target {
            return Ok(f);
        }
    }
    Ok(profile.last().map(|p| p.0).unwrap_or(0.0))
}
