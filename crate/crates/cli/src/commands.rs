use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use bandlift::bandwidth::{draw_stable_kernel, estimate_rolloff, ROLLOFF_FRACTION};
use bandlift::diffusion::{DiffusionTrainer, LatentDiffusion, LatentPair, SamplerConfig};
use bandlift::eval::{load_reference, read_manifest, run_benchmark, write_manifest, ManifestRecord};
use bandlift::latent_codec::{CodecTrainer, LatentCodec, ReferenceCodec, VariationalCodec};
use bandlift::pipeline::{observe, upsample as run_pipeline, Models};
use bandlift::spectral::{GriffinLim, LogMelSpectrogram, SpectralConfig, Stft};
use bandlift::{read_wav, resample_cubic, wav_to_logmel, write_wav, AudioBuffer, Error, WavEncoding};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::exit;
use crate::{Encoding, EvaluateArgs, RolloffArgs, SimulateArgs, Stage, SystemKind, TrainArgs, UpsampleArgs};

pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::DivergedTraining { .. } => exit::DIVERGED,
            Error::SilentInput => exit::SILENT_INPUT,
            Error::BadCheckpoint(_) | Error::ShapeMismatch(_) => exit::CHECKPOINT_MISMATCH,
            _ => exit::FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    RunConfig::load(path).map_err(|m| Failure::new(exit::USAGE, m))
}

fn require_seed(flag: Option<u64>, cfg: &RunConfig) -> Result<u64, Failure> {
    flag.or(cfg.seed)
        .ok_or_else(|| Failure::new(exit::USAGE, "a seed is required: pass --seed or set `seed` in the config"))
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(exit::FAILURE, format!("{}: {e}", path.display()))
}

/// Folder holding the cached mel pairs of a manifest.
pub fn mel_cache_dir(manifest: &Path) -> PathBuf {
    manifest.with_extension("mels")
}

fn mel_paths(cache: &Path, index: usize) -> (PathBuf, PathBuf) {
    (
        cache.join(format!("{index:06}_hi.bmel")),
        cache.join(format!("{index:06}_lo.bmel")),
    )
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let entries = std::fs::read_dir(dir).map_err(|e| Failure::new(exit::EMPTY_INPUT, format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| x.eq_ignore_ascii_case("wav"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Writes through a temporary sibling so readers never see a partial file.
fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<(), Failure>) -> CmdResult {
    let tmp = path.with_extension("partial");
    let mut w = BufWriter::new(File::create(&tmp).map_err(|e| io_failure(&tmp, e))?);
    f(&mut w)?;
    w.flush().map_err(|e| io_failure(&tmp, e))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| io_failure(path, e))
}

pub fn simulate(a: &SimulateArgs) -> CmdResult {
    let cfg = load_config(a.config.as_deref())?;
    let seed = require_seed(a.seed, &cfg)?;
    let files = wav_files(&a.in_dir)?;
    if files.is_empty() {
        return Err(Failure::new(
            exit::EMPTY_INPUT,
            format!("no WAV files in {}", a.in_dir.display()),
        ));
    }
    let n = a.n.unwrap_or(files.len());
    let cache = mel_cache_dir(&a.out);
    std::fs::create_dir_all(&cache).map_err(|e| io_failure(&cache, e))?;
    let mel_cfg = SpectralConfig::default();
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let path = &files[i % files.len()];
        let record_seed = master.next_u64();
        let attempt = || -> bandlift::Result<ManifestRecord> {
            let (spec, _) = draw_stable_kernel(&mut ChaCha8Rng::seed_from_u64(record_seed), mel_cfg.sample_rate)?;
            let clean = load_reference(path)?;
            let hi = wav_to_logmel(&clean, &mel_cfg)?;
            let (observed, _) = observe(&clean, &spec)?;
            let lo = wav_to_logmel(&observed, &mel_cfg)?;
            let (hi_path, lo_path) = mel_paths(&cache, records.len());
            hi.save(hi_path)?;
            lo.save(lo_path)?;
            Ok(ManifestRecord {
                input_path: path.clone(),
                seed: record_seed,
                family: spec.family.name().to_string(),
                order: spec.order,
                cutoff_hz: spec.cutoff_hz,
            })
        };
        match attempt() {
            Ok(r) => records.push(r),
            Err(e) => log::warn!("{}: {e}", path.display()),
        }
    }
    write_atomic(&a.out, |w| write_manifest(w, &records).map_err(Failure::from))?;
    log::info!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

fn load_mel_pairs(manifest: &Path) -> Result<Vec<(LogMelSpectrogram, LogMelSpectrogram)>, Failure> {
    let records = read_manifest(manifest)?;
    if records.is_empty() {
        return Err(Failure::new(exit::EMPTY_INPUT, format!("{} has no records", manifest.display())));
    }
    let cache = mel_cache_dir(manifest);
    (0..records.len())
        .map(|i| {
            let (h, l) = mel_paths(&cache, i);
            Ok((LogMelSpectrogram::load(h)?, LogMelSpectrogram::load(l)?))
        })
        .collect()
}

enum Codec {
    Reference(ReferenceCodec),
    Trained(VariationalCodec),
}

impl Codec {
    fn load(spec: &str) -> Result<Self, Failure> {
        if spec == "reference" {
            return Ok(Codec::Reference(ReferenceCodec::default()));
        }
        VariationalCodec::load(spec).map(Codec::Trained).map_err(|e| match e {
            Error::IoFailure { .. } => Failure::from(e),
            e => Failure::new(exit::CHECKPOINT_MISMATCH, e.to_string()),
        })
    }

    fn as_dyn(&self) -> &dyn LatentCodec {
        match self {
            Codec::Reference(c) => c,
            Codec::Trained(c) => c,
        }
    }
}

fn load_ldm(path: &Path, codec: &dyn LatentCodec) -> Result<LatentDiffusion, Failure> {
    let ldm = LatentDiffusion::load(path).map_err(|e| match e {
        Error::IoFailure { .. } => Failure::from(e),
        e => Failure::new(exit::CHECKPOINT_MISMATCH, e.to_string()),
    })?;
    let arch = ldm.denoiser.arch();
    let (c, _, f) = codec.latent_shape(1);
    if arch.channels != c || arch.freq != f {
        return Err(Failure::new(
            exit::CHECKPOINT_MISMATCH,
            format!(
                "diffusion model expects {}×t×{} latents but the codec produces {c}×t×{f}",
                arch.channels, arch.freq
            ),
        ));
    }
    Ok(ldm)
}

struct LossLog {
    w: BufWriter<File>,
    interval: usize,
    path: PathBuf,
}

impl LossLog {
    fn create(path: PathBuf, interval: usize) -> Result<Self, Failure> {
        if interval == 0 {
            return Err(Failure::new(exit::USAGE, "log interval must be positive"));
        }
        let mut w = BufWriter::new(File::create(&path).map_err(|e| io_failure(&path, e))?);
        writeln!(w, "step,loss").map_err(|e| io_failure(&path, e))?;
        Ok(Self { w, interval, path })
    }

    fn record(&mut self, step: u64, loss: f64) -> CmdResult {
        if step.is_multiple_of(self.interval as u64) {
            writeln!(self.w, "{step},{loss}").map_err(|e| io_failure(&self.path, e))?;
        }
        Ok(())
    }

    fn finish(mut self) -> CmdResult {
        self.w.flush().map_err(|e| io_failure(&self.path, e))
    }
}

fn open_resume(path: &Path) -> Result<std::io::BufReader<File>, Failure> {
    File::open(path)
        .map(std::io::BufReader::new)
        .map_err(|e| io_failure(path, e))
}

pub fn train(a: &TrainArgs) -> CmdResult {
    let cfg = load_config(a.config.as_deref())?;
    let seed = require_seed(a.seed, &cfg)?;
    let pairs = load_mel_pairs(&a.manifest)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("loss.csv"));
    let mut log = LossLog::create(log_path, a.log_interval.unwrap_or(cfg.train.log_interval))?;
    let ckpt_every = cfg.train.checkpoint_interval.max(1) as u64;

    match a.stage {
        Stage::Codec => {
            let mut tc = cfg.codec;
            tc.seed = seed;
            tc.steps = a.steps.unwrap_or(tc.steps);
            tc.lr = a.lr.unwrap_or(tc.lr);
            let mels: Vec<_> = pairs.into_iter().map(|(hi, _)| hi).collect();
            let mut trainer = match &a.resume {
                Some(p) => CodecTrainer::resume(open_resume(p)?, &mels, tc)?,
                None => CodecTrainer::new(&mels, tc)?,
            };
            let save = |t: &CodecTrainer| write_atomic(&a.out, |w| t.write_checkpoint(w).map(|_| ()).map_err(Failure::from));
            while trainer.step_index() < tc.steps as u64 {
                let loss = trainer.step()?;
                log.record(trainer.step_index(), loss.total)?;
                if trainer.step_index() % ckpt_every == 0 {
                    save(&trainer)?;
                }
            }
            save(&trainer)?;
        }
        Stage::Ldm => {
            let codec_spec = a
                .codec
                .as_deref()
                .ok_or_else(|| Failure::new(exit::USAGE, "ldm training needs --codec"))?;
            let codec = Codec::load(codec_spec)?;
            let codec = codec.as_dyn();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let latents = pairs
                .iter()
                .map(|(hi, lo)| {
                    Ok(LatentPair {
                        target: codec.encode(hi, false, &mut rng)?,
                        cond: codec.encode(lo, false, &mut rng)?,
                    })
                })
                .collect::<bandlift::Result<Vec<_>>>()?;
            let mut tc = cfg.ldm;
            tc.seed = seed;
            tc.steps = a.steps.unwrap_or(tc.steps);
            tc.lr = a.lr.unwrap_or(tc.lr);
            let mut trainer = match &a.resume {
                Some(p) => DiffusionTrainer::resume(open_resume(p)?, &latents, tc)?,
                None => DiffusionTrainer::new(&latents, tc)?,
            };
            let save = |t: &DiffusionTrainer| write_atomic(&a.out, |w| t.write_checkpoint(w).map(|_| ()).map_err(Failure::from));
            while trainer.step_index() < tc.steps as u64 {
                let loss = trainer.step()?;
                log.record(trainer.step_index(), loss)?;
                if trainer.step_index() % ckpt_every == 0 {
                    save(&trainer)?;
                }
            }
            save(&trainer)?;
        }
    }
    log.finish()?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct Sidecar<'a> {
    input: &'a Path,
    input_sample_rate: u32,
    output_sample_rate: u32,
    detected_rolloff: f64,
    timing_ms: &'a std::collections::BTreeMap<String, f64>,
    settings: Settings<'a>,
}

#[derive(Serialize)]
struct Settings<'a> {
    seed: u64,
    guidance_scale: f64,
    ddim_steps: usize,
    griffin_lim_iters: usize,
    codec: &'a str,
    ldm: &'a Path,
}

fn sampler(cfg: &RunConfig, seed: Option<u64>, guidance: Option<f64>, steps: Option<usize>) -> SamplerConfig {
    SamplerConfig {
        seed: seed.unwrap_or(cfg.sampler.seed),
        guidance_scale: guidance.unwrap_or(cfg.sampler.guidance_scale),
        ddim_steps: steps.unwrap_or(cfg.sampler.ddim_steps),
        ..cfg.sampler
    }
}

pub fn upsample(a: &UpsampleArgs) -> CmdResult {
    let cfg = load_config(a.config.as_deref())?;
    let codec = Codec::load(&a.codec)?;
    let ldm = load_ldm(&a.ldm, codec.as_dyn())?;
    let iters = a.griffin_lim_iters.unwrap_or(cfg.vocoder.griffin_lim_iters);
    let vocoder = GriffinLim::new(iters);
    let sc = sampler(&cfg, a.seed, a.guidance, a.steps);
    let input = read_wav(&a.input)?;
    let models = Models {
        codec: codec.as_dyn(),
        ldm: &ldm,
        vocoder: &vocoder,
    };
    let result = run_pipeline(&input, &models, &sc)?;
    let encoding = match a.encoding {
        Encoding::Pcm16 => WavEncoding::Pcm16,
        Encoding::Float32 => WavEncoding::Float32,
    };
    write_wav(&result.audio, &a.out, encoding)?;
    let sidecar = Sidecar {
        input: &a.input,
        input_sample_rate: input.sample_rate(),
        output_sample_rate: result.audio.sample_rate(),
        detected_rolloff: result.detected_rolloff,
        timing_ms: &result.timing,
        settings: Settings {
            seed: sc.seed,
            guidance_scale: sc.guidance_scale,
            ddim_steps: sc.ddim_steps,
            griffin_lim_iters: iters,
            codec: &a.codec,
            ldm: &a.ldm,
        },
    };
    let side_path = a.out.with_extension("json");
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Failure::new(exit::FAILURE, e.to_string()))?;
    std::fs::write(&side_path, text + "\n").map_err(|e| io_failure(&side_path, e))?;
    log::info!(
        "{} -> {} (roll-off {:.0} Hz)",
        a.input.display(),
        a.out.display(),
        result.detected_rolloff
    );
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> CmdResult {
    let cfg = load_config(a.config.as_deref())?;
    let manifest = read_manifest(&a.manifest)?;
    let report = match a.system {
        SystemKind::Identity => {
            let system = |x: &AudioBuffer, _: &ManifestRecord| resample_cubic(x, bandlift::signal_io::TARGET_RATE);
            run_benchmark(&manifest, &system, &a.out)?
        }
        SystemKind::Model => {
            let (Some(codec_spec), Some(ldm_path)) = (a.codec.as_deref(), a.ldm.as_deref()) else {
                return Err(Failure::new(exit::USAGE, "--system model needs --codec and --ldm"));
            };
            let codec = Codec::load(codec_spec)?;
            let ldm = load_ldm(ldm_path, codec.as_dyn())?;
            let vocoder = GriffinLim::new(cfg.vocoder.griffin_lim_iters);
            let models = Models {
                codec: codec.as_dyn(),
                ldm: &ldm,
                vocoder: &vocoder,
            };
            let base = sampler(&cfg, None, a.guidance, a.steps);
            let system = |x: &AudioBuffer, rec: &ManifestRecord| {
                let sc = SamplerConfig { seed: rec.seed, ..base };
                run_pipeline(x, &models, &sc).map(|r| r.audio)
            };
            run_benchmark(&manifest, &system, &a.out)?
        }
    };
    println!("{:>10}  {:>5}  {:>17}  {:>17}", "cutoff_hz", "n", "unprocessed", "system");
    for (cutoff, (u, s)) in report.by_cutoff() {
        let fmt = |g: Option<bandlift::eval::Aggregate>| {
            g.map(|g| format!("{:.3} ± {:.3}", g.mean, g.std)).unwrap_or_else(|| "-".into())
        };
        let n = u.map(|g| g.count).unwrap_or(0);
        println!("{cutoff:>10}  {n:>5}  {:>17}  {:>17}", fmt(u), fmt(s));
    }
    for r in report.rows.iter().filter(|r| r.error.is_some()) {
        log::warn!("{}: {}", r.file, r.error.as_deref().unwrap_or_default());
    }
    if report.too_many_failures() {
        return Err(Failure::new(
            exit::EVAL_FAILURES,
            format!("{} of {} files failed", report.failures(), report.rows.len()),
        ));
    }
    Ok(())
}

pub fn rolloff(a: &RolloffArgs) -> CmdResult {
    let buf = read_wav(&a.file)?;
    let spec = Stft::new(SpectralConfig::for_rate(buf.sample_rate()))?.forward(&buf)?;
    let c = estimate_rolloff(&spec, ROLLOFF_FRACTION)?;
    println!("{c:.1}");
    Ok(())
}
