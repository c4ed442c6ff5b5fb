//! End-to-end super-resolution: pre-processing, latent diffusion mel
//! estimation, vocoding and replacement of the observed low band.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bandwidth::{apply_filter, design_lowpass, estimate_rolloff, FilterFamily, FilterSpec, ROLLOFF_FRACTION};
use crate::diffusion::{LatentDiffusion, SamplerConfig};
use crate::error::{Error, Result};
use crate::latent_codec::LatentCodec;
use crate::signal_io::{resample_cubic, AudioBuffer, TARGET_RATE};
use crate::spectral::{mel_bank, wav_to_logmel, LogMelSpectrogram, SpectralConfig, Stft, Vocoder};

pub const MIN_DURATION_S: f64 = 0.3;
pub const PREPROCESS_ORDER: usize = 8;
/// Roll-offs at or above this fraction of Nyquist are treated as full band
/// and skip the pre-processing lowpass.
pub const FULL_BAND_FRACTION: f64 = 0.97;

/// Detects the input bandwidth, lowpasses at it and resamples to 48 kHz.
/// Returns the resampled signal and the detected roll-off in Hz.
pub fn preprocess(input: &AudioBuffer) -> Result<(AudioBuffer, f64)> {
    let rate = input.sample_rate();
    let cfg = SpectralConfig::for_rate(rate);
    let spec = Stft::new(cfg)?.forward(input)?;
    let c = estimate_rolloff(&spec, ROLLOFF_FRACTION)?;
    if c <= 0.0 {
        return Err(Error::SilentInput);
    }
    let nyquist = rate as f64 / 2.0;
    let filtered = if replacement_cutoff(c, rate) < nyquist {
        let kernel = design_lowpass(&FilterSpec::new(FilterFamily::Chebyshev1, PREPROCESS_ORDER, c), rate)?;
        apply_filter(input, &kernel)
    } else {
        input.clone()
    };
    Ok((resample_cubic(&filtered, TARGET_RATE)?, c))
}

/// What the pipeline sees for a clean clip under `spec`: the degraded
/// observation after pre-processing, with its detected roll-off.
pub fn observe(clean: &AudioBuffer, spec: &FilterSpec) -> Result<(AudioBuffer, f64)> {
    preprocess(&crate::bandwidth::degrade(clean, spec)?)
}

/// Cutoff used for replacement: the detected roll-off, or the input's
/// Nyquist frequency when the input already counts as full band.
pub fn replacement_cutoff(rolloff_hz: f64, input_rate: u32) -> f64 {
    let nyquist = input_rate as f64 / 2.0;
    if rolloff_hz >= FULL_BAND_FRACTION * nyquist {
        nyquist
    } else {
        rolloff_hz
    }
}

/// Copies mel bands whose upper edge lies at or below `cutoff_hz` from `obs`.
pub fn replace_low_mel(est: &LogMelSpectrogram, obs: &LogMelSpectrogram, cutoff_hz: f64) -> Result<LogMelSpectrogram> {
    if est.data().dim() != obs.data().dim() || est.config() != obs.config() {
        return Err(Error::ShapeMismatch(format!(
            "mel shapes {:?} and {:?} differ",
            est.data().dim(),
            obs.data().dim()
        )));
    }
    let bank = mel_bank(obs.config())?;
    let mut out = est.data().clone();
    for j in 0..bank.n_mels() {
        if bank.band_edges(j).2 <= cutoff_hz {
            out.column_mut(j).assign(&obs.data().column(j));
        }
    }
    LogMelSpectrogram::new(out, *obs.config())
}

/// STFT splice: bins below `cutoff_hz` from `obs`, the rest from `est`.
pub fn replace_low_wave(est: &AudioBuffer, obs: &AudioBuffer, cutoff_hz: f64) -> Result<AudioBuffer> {
    if est.sample_rate() != obs.sample_rate() || est.len() != obs.len() {
        return Err(Error::ShapeMismatch(format!(
            "signals differ: {} samples @ {} Hz vs {} samples @ {} Hz",
            est.len(),
            est.sample_rate(),
            obs.len(),
            obs.sample_rate()
        )));
    }
    let stft = Stft::new(SpectralConfig::for_rate(obs.sample_rate()))?;
    let mut spliced = stft.forward(est)?;
    let low = stft.forward(obs)?;
    let n_low = (0..spliced.n_bins())
        .take_while(|&b| spliced.bin_frequency(b) < cutoff_hz)
        .count();
    spliced
        .data
        .slice_mut(ndarray::s![.., ..n_low])
        .assign(&low.data.slice(ndarray::s![.., ..n_low]));
    stft.inverse(&spliced)
}

/// Models used by [`upsample`].
pub struct Models<'a> {
    pub codec: &'a dyn LatentCodec,
    pub ldm: &'a LatentDiffusion,
    pub vocoder: &'a dyn Vocoder,
}

/// Output of one super-resolution run.
#[derive(Debug, Clone, Serialize)]
pub struct SrResult {
    #[serde(skip)]
    pub audio: AudioBuffer,
    pub detected_rolloff: f64,
    #[serde(skip)]
    pub mel_estimate: LogMelSpectrogram,
    /// Wall-clock milliseconds per stage.
    pub timing: BTreeMap<String, f64>,
}

struct Stopwatch {
    t: Instant,
    timing: BTreeMap<String, f64>,
}

impl Stopwatch {
    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timing
            .insert(stage.to_string(), (now - self.t).as_secs_f64() * 1e3);
        self.t = now;
    }
}

/// Runs the full pipeline; the result depends only on the input, the models and `cfg.seed`.
pub fn upsample(input: &AudioBuffer, models: &Models, cfg: &SamplerConfig) -> Result<SrResult> {
    if input.duration() < MIN_DURATION_S {
        return Err(Error::InvalidArgument(format!(
            "input lasts {:.3} s, at least {MIN_DURATION_S} s required",
            input.duration()
        )));
    }
    let mel_cfg = *models.codec.mel_config();
    if mel_cfg.sample_rate != TARGET_RATE {
        return Err(Error::RateMismatch {
            expected: TARGET_RATE,
            actual: mel_cfg.sample_rate,
        });
    }
    let mut sw = Stopwatch {
        t: Instant::now(),
        timing: BTreeMap::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let (x_h, c) = preprocess(input)?;
    let keep = replacement_cutoff(c, input.sample_rate());
    sw.lap("preprocess");
    let obs = wav_to_logmel(&x_h, &mel_cfg)?;
    let cond = models.codec.encode(&obs, false, &mut rng)?;
    sw.lap("encode");
    let z = models.ldm.sample(&cond, cfg, &mut rng)?;
    sw.lap("sample");
    let est = models.codec.decode(&z)?;
    let mel = replace_low_mel(&est, &obs, keep)?;
    sw.lap("decode");
    let wav = models.vocoder.mel_to_wav(&mel)?.fit_to_len(x_h.len());
    sw.lap("vocoder");
    let audio = replace_low_wave(&wav, &x_h, keep)?;
    sw.lap("replace");
    Ok(SrResult {
        audio,
        detected_rolloff: c,
        mel_estimate: mel,
        timing: sw.timing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bandwidth::degrade;
    use crate::diffusion::DenoiserArch;
    use crate::latent_codec::ReferenceCodec;
    use crate::spectral::{stft, GriffinLim};
    use ndarray::Array2;
    use rand::Rng;

    fn noise(len: usize, rate: u32, seed: u64) -> AudioBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioBuffer::new((0..len).map(|_| rng.random_range(-0.5..0.5)).collect(), rate).unwrap()
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn band_energy(buf: &AudioBuffer, lo: f64, hi: f64) -> f64 {
        let s = stft(buf, &SpectralConfig::for_rate(buf.sample_rate())).unwrap();
        let mut e = 0.0;
        for row in s.data.rows() {
            for (b, v) in row.iter().enumerate() {
                let f = s.bin_frequency(b);
                if f >= lo && f < hi {
                    e += v.norm_sqr();
                }
            }
        }
        e
    }

    #[test]
    fn full_band_preprocess_is_near_identity() {
        let x = noise(48_000, 48_000, 1);
        let (y, c) = preprocess(&x).unwrap();
        assert!(c >= 23_000.0, "{c}");
        assert!(correlation(x.samples(), y.samples()) > 0.999);
    }

    #[test]
    fn narrow_band_input_bounds_rolloff() {
        let x = degrade(&noise(48_000, 48_000, 2), &FilterSpec::new(FilterFamily::Elliptic, 6, 4000.0)).unwrap();
        assert_eq!(x.sample_rate(), 8000);
        let (y, c) = preprocess(&x).unwrap();
        assert!(c <= 4000.0 + 2.0 * 8000.0 / 2048.0, "{c}");
        assert_eq!(y.sample_rate(), 48_000);
        assert_eq!(y.len(), 48_000);
        let (y2, c2) = preprocess(&x).unwrap();
        assert_eq!((y, c), (y2, c2));
    }

    #[test]
    fn silent_input_is_rejected() {
        assert!(matches!(preprocess(&AudioBuffer::zeros(8000, 8000)), Err(Error::SilentInput)));
    }

    fn mel_pair(frames: usize) -> (LogMelSpectrogram, LogMelSpectrogram) {
        let cfg = SpectralConfig::default();
        let est = Array2::from_shape_fn((frames, 256), |(t, j)| -1.0 - ((t + j) % 7) as f64 * 0.1);
        let obs = Array2::from_shape_fn((frames, 256), |(t, j)| -2.0 - ((t * j) % 5) as f64 * 0.1);
        (
            LogMelSpectrogram::new(est, cfg).unwrap(),
            LogMelSpectrogram::new(obs, cfg).unwrap(),
        )
    }

    #[test]
    fn mel_replacement_partitions_bands() {
        let (est, obs) = mel_pair(9);
        assert_eq!(replace_low_mel(&est, &obs, 24_000.0).unwrap(), obs);
        assert_eq!(replace_low_mel(&est, &obs, f64::MIN_POSITIVE).unwrap(), est);
        let out = replace_low_mel(&est, &obs, 8000.0).unwrap();
        let bank = mel_bank(&SpectralConfig::default()).unwrap();
        for j in 0..256 {
            let src = if bank.band_edges(j).2 <= 8000.0 { &obs } else { &est };
            for t in 0..9 {
                assert_eq!(out.data()[[t, j]].to_bits(), src.data()[[t, j]].to_bits());
            }
        }
        let (short, _) = mel_pair(8);
        assert!(matches!(replace_low_mel(&short, &obs, 1.0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn wave_replacement_of_identical_signals() {
        let x = noise(24_000, 48_000, 3);
        for c in [6000.0, 24_000.0] {
            let y = replace_low_wave(&x, &x, c).unwrap();
            assert_eq!(y.len(), x.len());
            let err = y.samples()[2048..22_000]
                .iter()
                .zip(&x.samples()[2048..22_000])
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn wave_replacement_band_energies() {
        let obs = noise(48_000, 48_000, 4);
        let est = noise(48_000, 48_000, 5);
        let out = replace_low_wave(&est, &obs, 6000.0).unwrap();
        let lo = band_energy(&out, 0.0, 6000.0) / band_energy(&obs, 0.0, 6000.0);
        let hi = band_energy(&out, 6000.0, 24_001.0) / band_energy(&est, 6000.0, 24_001.0);
        assert!((lo - 1.0).abs() < 0.01, "{lo}");
        assert!((hi - 1.0).abs() < 0.01, "{hi}");
        assert!(replace_low_wave(&est, &noise(100, 48_000, 1), 1.0).is_err());
    }

    fn toy_models() -> (ReferenceCodec, LatentDiffusion, GriffinLim) {
        let arch = DenoiserArch {
            channels: 16,
            freq: 64,
            hidden: 8,
            blocks: 1,
            emb_dim: 4,
        };
        (ReferenceCodec::default(), LatentDiffusion::new(arch, 100, 0).unwrap(), GriffinLim::new(4))
    }

    #[test]
    fn untrained_models_preserve_full_band_input() {
        let (codec, ldm, voc) = toy_models();
        let models = Models {
            codec: &codec,
            ldm: &ldm,
            vocoder: &voc,
        };
        let cfg = SamplerConfig {
            ddim_steps: 5,
            ..SamplerConfig::default()
        };
        let x = noise(24_000, 48_000, 6);
        let r = upsample(&x, &models, &cfg).unwrap();
        assert!(r.detected_rolloff > 23_000.0 && r.detected_rolloff <= 24_000.0);
        assert_eq!(r.audio.sample_rate(), 48_000);
        assert_eq!(r.audio.len(), x.len());
        assert!(correlation(r.audio.samples(), x.samples()) > 0.999);
        let again = upsample(&x, &models, &cfg).unwrap();
        assert_eq!(r.audio, again.audio);
        assert!(["preprocess", "sample", "vocoder"].iter().all(|k| r.timing.contains_key(*k)));
    }

    #[test]
    fn upsample_keeps_low_band() {
        let (codec, ldm, voc) = toy_models();
        let models = Models {
            codec: &codec,
            ldm: &ldm,
            vocoder: &voc,
        };
        let cfg = SamplerConfig {
            ddim_steps: 3,
            ..SamplerConfig::default()
        };
        let x = degrade(&noise(24_000, 48_000, 7), &FilterSpec::new(FilterFamily::Chebyshev1, 8, 4000.0)).unwrap();
        let r = upsample(&x, &models, &cfg).unwrap();
        assert_eq!(r.audio.sample_rate(), 48_000);
        assert!((r.audio.duration() - x.duration()).abs() <= 480.0 / 48_000.0);
        let (x_h, c) = preprocess(&x).unwrap();
        let obs = wav_to_logmel(&x_h, &SpectralConfig::default()).unwrap();
        let bank = mel_bank(&SpectralConfig::default()).unwrap();
        for j in (0..256).filter(|&j| bank.band_edges(j).2 <= c) {
            assert_eq!(r.mel_estimate.data().column(j), obs.data().column(j));
        }
        let ratio = band_energy(&r.audio, 0.0, c) / band_energy(&x_h, 0.0, c);
        assert!((ratio - 1.0).abs() < 0.01, "{ratio}");
        assert!(upsample(&AudioBuffer::zeros(4000, 48_000), &models, &cfg).is_err());
    }
}
