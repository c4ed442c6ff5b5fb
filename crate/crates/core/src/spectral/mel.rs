use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use super::{ComplexSpectrogram, SpectralConfig, Stft};
use crate::error::{Error, Result};
use crate::signal_io::AudioBuffer;

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK filterbank with unit-area (sum-normalized) filters.
///
/// Weights are the integral of each triangle over the frequency cell of each
/// STFT bin, so narrow low-frequency filters never come out empty and the
/// band edges at 0 Hz and `mel_fmax` are covered.
#[derive(Debug, Clone)]
pub struct MelBank {
    /// `(lower, center, upper)` edge frequencies in Hz per mel band.
    edges: Vec<(f64, f64, f64)>,
    /// Per band: first STFT bin and its weights.
    filters: Vec<(usize, Vec<f64>)>,
    n_bins: usize,
    /// Per STFT bin: total weight over all bands (for the transpose lift).
    column_sums: Vec<f64>,
}

impl MelBank {
    pub fn new(cfg: &SpectralConfig) -> Result<Self> {
        cfg.validate()?;
        let n_bins = cfg.n_bins();
        let df = cfg.bin_hz();
        let lo_mel = hz_to_mel(cfg.mel_fmin);
        let hi_mel = hz_to_mel(cfg.mel_fmax);
        let pts: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo_mel + (hi_mel - lo_mel) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let mut edges = Vec::with_capacity(cfg.n_mels);
        let mut filters = Vec::with_capacity(cfg.n_mels);
        let mut column_sums = vec![0.0; n_bins];
        for j in 0..cfg.n_mels {
            let (lo, c, hi) = (pts[j], pts[j + 1], pts[j + 2]);
            edges.push((lo, c, hi));
            let first = (((lo - 0.5 * df) / df).floor().max(0.0)) as usize;
            let last = (((hi + 0.5 * df) / df).ceil() as usize).min(n_bins - 1);
            let mut w: Vec<f64> = (first..=last)
                .map(|b| {
                    let f = b as f64 * df;
                    triangle_cdf(f + 0.5 * df, lo, c, hi) - triangle_cdf(f - 0.5 * df, lo, c, hi)
                })
                .collect();
            let total: f64 = w.iter().sum();
            if !(total > 0.0) {
                return Err(Error::InvalidArgument(format!("mel band {j} covers no bins")));
            }
            w.iter_mut().for_each(|v| *v /= total);
            for (k, v) in w.iter().enumerate() {
                column_sums[first + k] += v;
            }
            filters.push((first, w));
        }
        Ok(Self {
            edges,
            filters,
            n_bins,
            column_sums,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.filters.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn band_edges(&self, band: usize) -> (f64, f64, f64) {
        self.edges[band]
    }

    pub fn center_hz(&self, band: usize) -> f64 {
        self.edges[band].1
    }

    /// Dense `n_mels × n_bins` matrix.
    pub fn matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.n_mels(), self.n_bins));
        for (j, (first, w)) in self.filters.iter().enumerate() {
            for (k, v) in w.iter().enumerate() {
                m[[j, first + k]] = *v;
            }
        }
        m
    }

    /// Applies the filterbank to one frame of bin magnitudes.
    pub fn apply(&self, mags: &[f64], out: &mut [f64]) {
        for ((first, w), o) in self.filters.iter().zip(out.iter_mut()) {
            *o = w.iter().zip(&mags[*first..]).map(|(a, b)| a * b).sum();
        }
    }

    /// Transpose-normalized lift from band amplitudes back to bin magnitudes.
    pub fn lift(&self, bands: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for ((first, w), &a) in self.filters.iter().zip(bands) {
            for (k, v) in w.iter().enumerate() {
                out[first + k] += v * a;
            }
        }
        for (o, s) in out.iter_mut().zip(&self.column_sums) {
            if *s > 0.0 {
                *o /= s;
            }
        }
    }
}

/// Antiderivative of the unit-peak triangle on `(lo, c, hi)`.
fn triangle_cdf(x: f64, lo: f64, c: f64, hi: f64) -> f64 {
    if x <= lo {
        0.0
    } else if x <= c {
        (x - lo) * (x - lo) / (2.0 * (c - lo))
    } else if x <= hi {
        (c - lo) / 2.0 + (hi - c) / 2.0 - (hi - x) * (hi - x) / (2.0 * (hi - c))
    } else {
        (hi - lo) / 2.0
    }
}

/// Shared, lazily built filterbank for `cfg`.
pub fn mel_bank(cfg: &SpectralConfig) -> Result<Arc<MelBank>> {
    static CACHE: OnceLock<Mutex<Vec<(SpectralConfig, Arc<MelBank>)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(Vec::new()));
    let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
    if let Some((_, bank)) = guard.iter().find(|(c, _)| c == cfg) {
        return Ok(bank.clone());
    }
    let bank = Arc::new(MelBank::new(cfg)?);
    guard.push((*cfg, bank.clone()));
    Ok(bank)
}

/// Frames × mel bands of `log10(max(mel_amplitude, floor))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    data: Array2<f64>,
    cfg: SpectralConfig,
}

const BMEL_MAGIC: &[u8; 4] = b"BMEL";
const BMEL_VERSION: u32 = 1;

impl LogMelSpectrogram {
    /// Wraps frame data, rejecting non-finite or sub-floor entries.
    pub fn new(data: Array2<f64>, cfg: SpectralConfig) -> Result<Self> {
        if data.ncols() != cfg.n_mels {
            return Err(Error::ShapeMismatch(format!(
                "expected {} mel bands, got {}",
                cfg.n_mels,
                data.ncols()
            )));
        }
        let floor = cfg.floor_db();
        if data.iter().any(|v| !v.is_finite() || *v < floor) {
            return Err(Error::InvalidArgument("log-mel entries must be finite and >= floor".into()));
        }
        Ok(Self { data, cfg })
    }

    /// Clamps entries to the floor (non-finite values become the floor).
    pub fn from_clamped(mut data: Array2<f64>, cfg: SpectralConfig) -> Result<Self> {
        let floor = cfg.floor_db();
        data.mapv_inplace(|v| if v.is_finite() { v.max(floor) } else { floor });
        Self::new(data, cfg)
    }

    pub fn floor_filled(frames: usize, cfg: SpectralConfig) -> Self {
        Self {
            data: Array2::from_elem((frames, cfg.n_mels), cfg.floor_db()),
            cfg,
        }
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn config(&self) -> &SpectralConfig {
        &self.cfg
    }

    pub fn n_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.data.ncols()
    }

    /// Writes the `BMEL` binary form: 32-byte header then row-major f32.
    ///
    /// Header (little endian): magic `BMEL`, version u32, frames u32, mels u32,
    /// sample_rate u32, hop u32, n_fft u32, reserved u32.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(BMEL_MAGIC)?;
        w.write_u32::<LittleEndian>(BMEL_VERSION)?;
        w.write_u32::<LittleEndian>(self.n_frames() as u32)?;
        w.write_u32::<LittleEndian>(self.n_mels() as u32)?;
        w.write_u32::<LittleEndian>(self.cfg.sample_rate)?;
        w.write_u32::<LittleEndian>(self.cfg.hop as u32)?;
        w.write_u32::<LittleEndian>(self.cfg.n_fft as u32)?;
        w.write_u32::<LittleEndian>(0)?;
        for v in self.data.iter() {
            w.write_f32::<LittleEndian>(*v as f32)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::MalformedContainer(format!("BMEL: {m}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != BMEL_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut hdr = [0u32; 7];
        for v in hdr.iter_mut() {
            *v = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        }
        let [version, frames, mels, rate, hop, n_fft, _] = hdr;
        if version != BMEL_VERSION {
            return Err(Error::UnsupportedEncoding(format!("BMEL version {version}")));
        }
        let cfg = SpectralConfig {
            n_fft: n_fft as usize,
            hop: hop as usize,
            sample_rate: rate,
            n_mels: mels as usize,
            ..SpectralConfig::for_rate(rate)
        };
        let mut data = Array2::zeros((frames as usize, mels as usize));
        for v in data.iter_mut() {
            *v = r.read_f32::<LittleEndian>().map_err(|_| bad("truncated body"))? as f64;
        }
        Self::from_clamped(data, cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Log-mel of the magnitude spectrogram.
pub fn wav_to_logmel(buf: &AudioBuffer, cfg: &SpectralConfig) -> Result<LogMelSpectrogram> {
    let spec = Stft::new(*cfg)?.forward(buf)?;
    spec_to_logmel(&spec)
}

pub(crate) fn spec_to_logmel(spec: &ComplexSpectrogram) -> Result<LogMelSpectrogram> {
    let cfg = spec.cfg;
    let bank = mel_bank(&cfg)?;
    let floor = cfg.log_floor;
    let mut data = Array2::zeros((spec.n_frames(), cfg.n_mels));
    let mut mags = vec![0.0; cfg.n_bins()];
    let mut bands = vec![0.0; cfg.n_mels];
    for (t, row) in spec.data.rows().into_iter().enumerate() {
        for (m, c) in mags.iter_mut().zip(row.iter()) {
            *m = c.norm();
        }
        bank.apply(&mags, &mut bands);
        for (d, &b) in data.row_mut(t).iter_mut().zip(&bands) {
            *d = b.max(floor).log10();
        }
    }
    LogMelSpectrogram::new(data, cfg)
}
