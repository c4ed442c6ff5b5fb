//! Log-spectral distance and the benchmark runner.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bandwidth::{degrade, FilterFamily, FilterSpec};
use crate::error::{Error, Result};
use crate::signal_io::{read_wav, resample_cubic, AudioBuffer, TARGET_RATE};
use crate::spectral::{SpectralConfig, Stft};

pub const LSD_N_FFT: usize = 2048;
pub const LSD_HOP: usize = 512;
pub const LSD_MAG_FLOOR: f64 = 1e-8;
/// Failure share above which a benchmark run counts as failed.
pub const MAX_FAILURE_RATE: f64 = 0.10;

fn lsd_config(rate: u32) -> SpectralConfig {
    SpectralConfig {
        n_fft: LSD_N_FFT,
        hop: LSD_HOP,
        ..SpectralConfig::for_rate(rate)
    }
}

/// Frame-averaged RMS difference of log10 power spectra. Both signals are
/// truncated to the shorter length; magnitudes are floored at 1e-8.
pub fn lsd(reference: &AudioBuffer, estimate: &AudioBuffer) -> Result<f64> {
    if reference.sample_rate() != estimate.sample_rate() {
        return Err(Error::RateMismatch {
            expected: reference.sample_rate(),
            actual: estimate.sample_rate(),
        });
    }
    let n = reference.len().min(estimate.len());
    if n == 0 {
        return Err(Error::EmptyAudio);
    }
    let stft = Stft::new(lsd_config(reference.sample_rate()))?;
    let a = stft.forward_samples(&reference.samples()[..n]);
    let b = stft.forward_samples(&estimate.samples()[..n]);
    let floor = LSD_MAG_FLOOR * LSD_MAG_FLOOR;
    let log_power = |c: &num_complex::Complex64| c.norm_sqr().max(floor).log10();
    let mut total = 0.0;
    for (ra, rb) in a.data.rows().into_iter().zip(b.data.rows()) {
        let ms = ra
            .iter()
            .zip(rb.iter())
            .map(|(x, y)| (log_power(x) - log_power(y)).powi(2))
            .sum::<f64>()
            / ra.len() as f64;
        total += ms.sqrt();
    }
    Ok(total / a.n_frames() as f64)
}

/// One degradation to evaluate: a clean file plus the filter that produces its observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub input_path: PathBuf,
    pub seed: u64,
    /// A filter family name, or `none` for an untouched observation.
    pub family: String,
    pub order: usize,
    pub cutoff_hz: f64,
}

impl ManifestRecord {
    /// `None` for the pass-through record.
    pub fn filter_spec(&self) -> Result<Option<FilterSpec>> {
        if self.family == "none" {
            return Ok(None);
        }
        let family: FilterFamily = self.family.parse()?;
        Ok(Some(FilterSpec::new(family, self.order, self.cutoff_hz)))
    }

    /// Observation of `clean` under this record's degradation.
    pub fn degrade(&self, clean: &AudioBuffer) -> Result<AudioBuffer> {
        match self.filter_spec()? {
            Some(spec) => degrade(clean, &spec),
            None => Ok(clean.clone()),
        }
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidArgument(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest<W: Write>(mut w: W, records: &[ManifestRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io("<manifest>", e))?;
    }
    Ok(())
}

/// Per-file benchmark outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsdRow {
    pub file: String,
    pub cutoff_hz: f64,
    pub family: String,
    pub order: usize,
    pub lsd_unprocessed: Option<f64>,
    pub lsd_system: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

/// Mean and standard deviation of one column within a group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        Some(Self {
            mean,
            std,
            count: v.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct LsdReport {
    pub rows: Vec<LsdRow>,
}

impl LsdReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn failure_rate(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.failures() as f64 / self.rows.len() as f64
        }
    }

    pub fn too_many_failures(&self) -> bool {
        self.failure_rate() > MAX_FAILURE_RATE
    }

    /// `(unprocessed, system)` aggregates keyed by cutoff in whole Hz.
    pub fn by_cutoff(&self) -> BTreeMap<u64, (Option<Aggregate>, Option<Aggregate>)> {
        let mut groups: BTreeMap<u64, Vec<&LsdRow>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.error.is_none()) {
            groups.entry(r.cutoff_hz.round() as u64).or_default().push(r);
        }
        groups
            .into_iter()
            .map(|(c, rows)| {
                (
                    c,
                    (
                        Aggregate::of(rows.iter().filter_map(|r| r.lsd_unprocessed)),
                        Aggregate::of(rows.iter().filter_map(|r| r.lsd_system)),
                    ),
                )
            })
            .collect()
    }

    pub fn mean_system(&self) -> Option<f64> {
        Aggregate::of(self.rows.iter().filter_map(|r| r.lsd_system)).map(|a| a.mean)
    }

    pub fn mean_unprocessed(&self) -> Option<f64> {
        Aggregate::of(self.rows.iter().filter_map(|r| r.lsd_unprocessed)).map(|a| a.mean)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
        out.write_record(["file", "cutoff_hz", "family", "order", "lsd_unprocessed", "lsd_system"])
            .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            out.write_record([
                r.file.clone(),
                r.cutoff_hz.to_string(),
                r.family.clone(),
                r.order.to_string(),
                opt(r.lsd_unprocessed),
                opt(r.lsd_system),
            ])
            .map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.rows {
            let line = serde_json::to_string(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io("<jsonl>", e))?;
        }
        Ok(())
    }
}

/// Loads a clean reference at 48 kHz.
pub fn load_reference(path: &Path) -> Result<AudioBuffer> {
    let buf = read_wav(path)?;
    resample_cubic(&buf, TARGET_RATE)
}

/// Evaluates one record: degrade, run the system, score both it and the
/// cubic-upsampled observation against the clean reference.
pub fn evaluate_record<F>(rec: &ManifestRecord, clean: &AudioBuffer, system: &F) -> Result<(f64, f64)>
where
    F: Fn(&AudioBuffer, &ManifestRecord) -> Result<AudioBuffer> + ?Sized,
{
    let observed = rec.degrade(clean)?;
    let unprocessed = resample_cubic(&observed, TARGET_RATE)?;
    let out = system(&observed, rec)?;
    Ok((lsd(clean, &unprocessed)?, lsd(clean, &out)?))
}

/// Runs `system` over every record and writes `lsd.csv` and `lsd.jsonl` into `out_dir`.
/// Per-file errors are recorded in the report rather than aborting the run.
pub fn run_benchmark<F>(manifest: &[ManifestRecord], system: &F, out_dir: &Path) -> Result<LsdReport>
where
    F: Fn(&AudioBuffer, &ManifestRecord) -> Result<AudioBuffer> + ?Sized,
{
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut report = LsdReport::default();
    for rec in manifest {
        let outcome = load_reference(&rec.input_path).and_then(|clean| evaluate_record(rec, &clean, system));
        let (lsd_unprocessed, lsd_system, error) = match outcome {
            Ok((u, s)) => (Some(u), Some(s), None),
            Err(e) => (None, None, Some(e.to_string())),
        };
        report.rows.push(LsdRow {
            file: rec.input_path.display().to_string(),
            cutoff_hz: rec.cutoff_hz,
            family: rec.family.clone(),
            order: rec.order,
            lsd_unprocessed,
            lsd_system,
            error,
        });
    }
    let create = |name: &str| {
        let p = out_dir.join(name);
        std::fs::File::create(&p)
            .map(std::io::BufWriter::new)
            .map_err(|e| Error::io(p, e))
    };
    report.write_csv(create("lsd.csv")?)?;
    report.write_jsonl(create("lsd.jsonl")?)?;
    Ok(report)
}
