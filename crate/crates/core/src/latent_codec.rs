//! Latent codecs mapping log-mel spectrograms to a compact latent grid.
//!
//! Both codecs work on non-overlapping 4×4 (time × mel) patches, i.e. a
//! stride-4 convolution with a 4×4 kernel. [`ReferenceCodec`] is the exact
//! patch reshape (16 channels); [`VariationalCodec`] compresses each patch to
//! a Gaussian posterior over 8 channels through a small tanh network.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CkptReader, CkptWriter, FLAG_TRAINING_STATE};
use crate::error::{Error, Result};
use crate::nn::{max_rel_error, numeric_grad, Adam, Dense, Layout};
use crate::spectral::{LogMelSpectrogram, SpectralConfig};

pub const TIME_DS: usize = 4;
pub const FREQ_DS: usize = 4;
const PATCH: usize = TIME_DS * FREQ_DS;

// Log-mel values live roughly in [-5, 1]; the variational codec works on
// (mel - SHIFT) / SCALE.
const MEL_SHIFT: f64 = -2.5;
const MEL_SCALE: f64 = 2.5;

/// Latent grid `channels × time × freq`, remembering the mel frame count it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    pub data: Array3<f64>,
    /// Mel frames before time padding.
    pub frames: usize,
}

impl LatentTensor {
    pub fn new(data: Array3<f64>, frames: usize) -> Self {
        Self { data, frames }
    }

    pub fn zeros(shape: (usize, usize, usize), frames: usize) -> Self {
        Self {
            data: Array3::zeros(shape),
            frames,
        }
    }

    pub fn zeros_like(other: &LatentTensor) -> Self {
        Self::zeros(other.data.dim(), other.frames)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_same_shape(&self, other: &LatentTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "latent shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Latent time steps for `frames` mel frames.
pub fn latent_time(frames: usize) -> usize {
    frames.div_ceil(TIME_DS)
}

/// Patch matrix `(t·f) × 16`, rows time-major, time padded by edge replication.
fn to_patches(mel: &LogMelSpectrogram) -> Result<(Array2<f64>, usize, usize)> {
    let (m, n) = mel.data().dim();
    if m == 0 || n % FREQ_DS != 0 {
        return Err(Error::ShapeMismatch(format!(
            "mel of {m}×{n} cannot be patched by {TIME_DS}×{FREQ_DS}"
        )));
    }
    let t = latent_time(m);
    let f = n / FREQ_DS;
    let d = mel.data();
    let mut out = Array2::zeros((t * f, PATCH));
    for ti in 0..t {
        for fi in 0..f {
            let mut row = out.row_mut(ti * f + fi);
            for dt in 0..TIME_DS {
                let src_t = (ti * TIME_DS + dt).min(m - 1);
                for df in 0..FREQ_DS {
                    row[dt * FREQ_DS + df] = d[[src_t, fi * FREQ_DS + df]];
                }
            }
        }
    }
    Ok((out, t, f))
}

fn from_patches(p: &Array2<f64>, t: usize, f: usize, frames: usize) -> Array2<f64> {
    let mut out = Array2::zeros((frames, f * FREQ_DS));
    for ti in 0..t {
        for fi in 0..f {
            let row = p.row(ti * f + fi);
            for dt in 0..TIME_DS {
                let dst_t = ti * TIME_DS + dt;
                if dst_t >= frames {
                    break;
                }
                for df in 0..FREQ_DS {
                    out[[dst_t, fi * FREQ_DS + df]] = row[dt * FREQ_DS + df];
                }
            }
        }
    }
    out
}

fn rows_to_latent(rows: &Array2<f64>, t: usize, f: usize, frames: usize) -> LatentTensor {
    let c = rows.ncols();
    let mut data = Array3::zeros((c, t, f));
    for ti in 0..t {
        for fi in 0..f {
            for ch in 0..c {
                data[[ch, ti, fi]] = rows[[ti * f + fi, ch]];
            }
        }
    }
    LatentTensor { data, frames }
}

fn latent_to_rows(z: &LatentTensor) -> Array2<f64> {
    let (c, t, f) = z.shape();
    let mut rows = Array2::zeros((t * f, c));
    for ti in 0..t {
        for fi in 0..f {
            for ch in 0..c {
                rows[[ti * f + fi, ch]] = z.data[[ch, ti, fi]];
            }
        }
    }
    rows
}

/// The mel ↔ latent slot of the pipeline.
pub trait LatentCodec: Send + Sync {
    fn channels(&self) -> usize;

    fn mel_config(&self) -> &SpectralConfig;

    /// Encodes `mel`; `sample` draws from the posterior instead of taking its mean.
    fn encode(&self, mel: &LogMelSpectrogram, sample: bool, rng: &mut dyn RngCore) -> Result<LatentTensor>;

    /// Decodes to `z.frames` mel frames, clamped to the log floor.
    fn decode(&self, z: &LatentTensor) -> Result<LogMelSpectrogram>;

    fn latent_shape(&self, frames: usize) -> (usize, usize, usize) {
        (self.channels(), latent_time(frames), self.mel_config().n_mels / FREQ_DS)
    }
}

/// Exact, norm-preserving patch reshape with 16 channels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ReferenceCodec {
    pub cfg: SpectralConfig,
}

impl LatentCodec for ReferenceCodec {
    fn channels(&self) -> usize {
        PATCH
    }

    fn mel_config(&self) -> &SpectralConfig {
        &self.cfg
    }

    fn encode(&self, mel: &LogMelSpectrogram, _sample: bool, _rng: &mut dyn RngCore) -> Result<LatentTensor> {
        let (p, t, f) = to_patches(mel)?;
        Ok(rows_to_latent(&p, t, f, mel.n_frames()))
    }

    fn decode(&self, z: &LatentTensor) -> Result<LogMelSpectrogram> {
        let (c, t, f) = z.shape();
        if c != PATCH || f * FREQ_DS != self.cfg.n_mels || latent_time(z.frames) != t {
            return Err(Error::ShapeMismatch(format!(
                "reference codec cannot decode latent {:?} ({} frames)",
                z.shape(),
                z.frames
            )));
        }
        let mel = from_patches(&latent_to_rows(z), t, f, z.frames);
        LogMelSpectrogram::from_clamped(mel, self.cfg)
    }
}

/// Small variational patch codec.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalCodec {
    cfg: SpectralConfig,
    channels: usize,
    hidden: usize,
    params: Vec<f64>,
    net: CodecNet,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct CodecNet {
    enc: Dense,
    mu: Dense,
    logvar: Dense,
    dec: Dense,
    out: Dense,
}

impl CodecNet {
    fn layout(channels: usize, hidden: usize) -> (Self, usize) {
        let mut l = Layout::default();
        let net = CodecNet {
            enc: l.dense(PATCH, hidden),
            mu: l.dense(hidden, channels),
            logvar: l.dense(hidden, channels),
            dec: l.dense(channels, hidden),
            out: l.dense(hidden, PATCH),
        };
        (net, l.len())
    }
}

/// Loss terms of one codec evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecLoss {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

/// Mean KL divergence of diagonal Gaussians `N(mu, exp(logvar))` from `N(0, 1)`.
pub fn kl_standard_normal(mu: &[f64], logvar: &[f64]) -> f64 {
    let n = mu.len().max(1) as f64;
    mu.iter()
        .zip(logvar)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum::<f64>()
        / n
}

const BVAE_MAGIC: &[u8; 4] = b"BVAE";
const BVAE_VERSION: u32 = 1;

impl VariationalCodec {
    pub fn new(cfg: SpectralConfig, channels: usize, hidden: usize, seed: u64) -> Result<Self> {
        if channels == 0 || hidden == 0 || !cfg.n_mels.is_multiple_of(FREQ_DS) {
            return Err(Error::InvalidArgument(format!(
                "codec needs channels, hidden > 0 and n_mels divisible by {FREQ_DS}"
            )));
        }
        let (net, n) = CodecNet::layout(channels, hidden);
        let mut params = vec![0.0; n];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        net.enc.init(&mut params, 1.0, &mut rng);
        net.mu.init(&mut params, 1.0, &mut rng);
        net.logvar.zero_init(&mut params);
        net.dec.init(&mut params, 1.0, &mut rng);
        net.out.init(&mut params, 1.0, &mut rng);
        Ok(Self {
            cfg,
            channels,
            hidden,
            params,
            net,
        })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Posterior mean and log-variance for a patch matrix.
    fn posterior(&self, params: &[f64], x: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let h = self.net.enc.forward(params, x.view()).mapv(f64::tanh);
        let mu = self.net.mu.forward(params, h.view());
        let lv = self.net.logvar.forward(params, h.view());
        (h, mu, lv)
    }

    fn reconstruct(&self, params: &[f64], z: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let g = self.net.dec.forward(params, z.view()).mapv(f64::tanh);
        let xh = self.net.out.forward(params, g.view());
        (g, xh)
    }

    /// Loss on normalized patches `x` with fixed reparameterization noise `eps`;
    /// accumulates gradients into `grads` when given.
    fn loss_and_grad(
        &self,
        params: &[f64],
        x: &Array2<f64>,
        eps: &Array2<f64>,
        kl_weight: f64,
        grads: Option<&mut [f64]>,
    ) -> CodecLoss {
        let (h, mu, lv) = self.posterior(params, x);
        let std = lv.mapv(|v| (0.5 * v).exp());
        let z = &mu + &(&std * eps);
        let (g, xh) = self.reconstruct(params, &z);
        let diff = &xh - x;
        let n_rec = diff.len() as f64;
        let recon = diff.iter().map(|d| d * d).sum::<f64>() / n_rec;
        let kl = kl_standard_normal(mu.as_slice().unwrap(), lv.as_slice().unwrap());
        let loss = CodecLoss {
            recon,
            kl,
            total: recon + kl_weight * kl,
        };
        let Some(grads) = grads else {
            return loss;
        };
        let n_lat = mu.len() as f64;
        let dxh = diff.mapv(|d| 2.0 * d / n_rec);
        let dg = self.net.out.backward(params, g.view(), dxh.view(), grads);
        let da2 = &dg * &g.mapv(|v| 1.0 - v * v);
        let dz = self.net.dec.backward(params, z.view(), da2.view(), grads);
        let dmu = &dz + &mu.mapv(|m| kl_weight * m / n_lat);
        let dlv = &(&dz * eps) * &std.mapv(|s| 0.5 * s) + &lv.mapv(|v| kl_weight * 0.5 * (v.exp() - 1.0) / n_lat);
        let dh_mu = self.net.mu.backward(params, h.view(), dmu.view(), grads);
        let dh_lv = self.net.logvar.backward(params, h.view(), dlv.view(), grads);
        let da1 = (dh_mu + dh_lv) * &h.mapv(|v| 1.0 - v * v);
        self.net.enc.backward(params, x.view(), da1.view(), grads);
        loss
    }

    fn normalize(p: &Array2<f64>) -> Array2<f64> {
        p.mapv(|v| (v - MEL_SHIFT) / MEL_SCALE)
    }

    /// Round-trip reconstruction loss (mean path) on a mel, in normalized units.
    pub fn reconstruction_mse(&self, mel: &LogMelSpectrogram) -> Result<f64> {
        let (p, _, _) = to_patches(mel)?;
        let x = Self::normalize(&p);
        let (_, mu, _) = self.posterior(&self.params, &x);
        let (_, xh) = self.reconstruct(&self.params, &mu);
        Ok((&xh - &x).iter().map(|d| d * d).sum::<f64>() / x.len() as f64)
    }

    pub fn write_to<W: Write>(&self, w: W, state: Option<(&Adam, u64, f64)>) -> Result<W> {
        let flags = if state.is_some() { FLAG_TRAINING_STATE } else { 0 };
        let mut c = CkptWriter::new(w, BVAE_MAGIC, BVAE_VERSION, flags)?;
        c.u32(TIME_DS as u32)?;
        c.u32(FREQ_DS as u32)?;
        c.u32(self.cfg.n_mels as u32)?;
        c.u32(self.channels as u32)?;
        c.u32(self.hidden as u32)?;
        c.u32(self.cfg.sample_rate)?;
        c.u32(self.cfg.hop as u32)?;
        c.u32(self.cfg.n_fft as u32)?;
        c.f64(state.map(|s| s.2).unwrap_or(0.0))?;
        c.f32s(&self.params)?;
        if let Some((opt, step, _)) = state {
            c.training_state(&self.params, opt, step)?;
        }
        c.finish()
    }

    /// Reads a checkpoint; returns the codec and, when present, `(optimizer, step, kl_weight)`.
    pub fn read_from<R: Read>(r: R) -> Result<(Self, Option<(Adam, u64, f64)>)> {
        let mut c = CkptReader::new(r, BVAE_MAGIC, BVAE_VERSION)?;
        let (pt, pf) = (c.u32()? as usize, c.u32()? as usize);
        if (pt, pf) != (TIME_DS, FREQ_DS) {
            return Err(Error::BadCheckpoint(format!("patch {pt}×{pf} unsupported")));
        }
        let n_mels = c.u32()? as usize;
        let channels = c.u32()? as usize;
        let hidden = c.u32()? as usize;
        let rate = c.u32()?;
        let hop = c.u32()? as usize;
        let n_fft = c.u32()? as usize;
        let kl_weight = c.f64()?;
        let cfg = SpectralConfig {
            n_mels,
            hop,
            n_fft,
            ..SpectralConfig::for_rate(rate)
        };
        let mut codec = Self::new(cfg, channels, hidden, 0)
            .map_err(|e| Error::BadCheckpoint(e.to_string()))?;
        codec.params = c.f32s(codec.params.len())?;
        let state = c.training_state(codec.params.len())?.map(|s| {
            codec.params = s.params;
            let mut opt = Adam::new(codec.params.len(), 0.0, None);
            opt.m = s.m;
            opt.v = s.v;
            opt.t = s.t;
            (opt, s.step, kl_weight)
        });
        Ok((codec, state))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_with(path.as_ref(), |w| self.write_to(w, None).map(|_| ()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::read_from(std::io::BufReader::new(f))?.0)
    }
}

pub(crate) fn save_with(path: &Path, f: impl FnOnce(&mut std::io::BufWriter<std::fs::File>) -> Result<()>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    f(&mut w)
}

impl LatentCodec for VariationalCodec {
    fn channels(&self) -> usize {
        self.channels
    }

    fn mel_config(&self) -> &SpectralConfig {
        &self.cfg
    }

    fn encode(&self, mel: &LogMelSpectrogram, sample: bool, rng: &mut dyn RngCore) -> Result<LatentTensor> {
        if mel.n_mels() != self.cfg.n_mels {
            return Err(Error::ShapeMismatch(format!(
                "codec expects {} mel bands, got {}",
                self.cfg.n_mels,
                mel.n_mels()
            )));
        }
        let (p, t, f) = to_patches(mel)?;
        let (_, mu, lv) = self.posterior(&self.params, &Self::normalize(&p));
        let z = if sample {
            let mut z = mu;
            for (zv, l) in z.iter_mut().zip(lv.iter()) {
                let e: f64 = StandardNormal.sample(rng);
                *zv += (0.5 * l).exp() * e;
            }
            z
        } else {
            mu
        };
        Ok(rows_to_latent(&z, t, f, mel.n_frames()))
    }

    fn decode(&self, z: &LatentTensor) -> Result<LogMelSpectrogram> {
        let (c, t, f) = z.shape();
        if c != self.channels || f * FREQ_DS != self.cfg.n_mels || latent_time(z.frames) != t {
            return Err(Error::ShapeMismatch(format!(
                "codec cannot decode latent {:?} ({} frames)",
                z.shape(),
                z.frames
            )));
        }
        let (_, xh) = self.reconstruct(&self.params, &latent_to_rows(z));
        let p = xh.mapv(|v| v * MEL_SCALE + MEL_SHIFT);
        LogMelSpectrogram::from_clamped(from_patches(&p, t, f, z.frames), self.cfg)
    }
}

/// Hyperparameters for [`train_codec`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub kl_weight: f64,
    /// Patches per step.
    pub batch: usize,
    pub channels: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 2e-3,
            kl_weight: 1e-3,
            batch: 256,
            channels: 8,
            hidden: 32,
            seed: 0,
        }
    }
}

/// Step-wise trainer; each step draws from an RNG stream keyed by the step
/// index, so a run resumed from a checkpoint replays the same batches.
pub struct CodecTrainer {
    pub codec: VariationalCodec,
    opt: Adam,
    cfg: CodecTrainConfig,
    step: u64,
    pool: Array2<f64>,
}

impl CodecTrainer {
    pub fn new(dataset: &[LogMelSpectrogram], cfg: CodecTrainConfig) -> Result<Self> {
        let first = dataset
            .first()
            .ok_or_else(|| Error::InvalidArgument("codec training needs at least one mel".into()))?;
        let codec = VariationalCodec::new(*first.config(), cfg.channels, cfg.hidden, cfg.seed)?;
        let opt = Adam::new(codec.n_params(), cfg.lr, Some(1.0));
        Self::with_state(codec, opt, 0, dataset, cfg)
    }

    /// Continues from a checkpoint written by [`CodecTrainer::write_checkpoint`].
    pub fn resume<R: Read>(r: R, dataset: &[LogMelSpectrogram], cfg: CodecTrainConfig) -> Result<Self> {
        let (codec, state) = VariationalCodec::read_from(r)?;
        let (mut opt, step, _) =
            state.ok_or_else(|| Error::BadCheckpoint("checkpoint has no training state".into()))?;
        opt.lr = cfg.lr;
        opt.clip_norm = Some(1.0);
        Self::with_state(codec, opt, step, dataset, cfg)
    }

    fn with_state(
        codec: VariationalCodec,
        opt: Adam,
        step: u64,
        dataset: &[LogMelSpectrogram],
        cfg: CodecTrainConfig,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(dataset.len());
        for mel in dataset {
            if mel.n_mels() != codec.cfg.n_mels {
                return Err(Error::ShapeMismatch("dataset mels disagree on band count".into()));
            }
            blocks.push(VariationalCodec::normalize(&to_patches(mel)?.0));
        }
        if blocks.is_empty() {
            return Err(Error::InvalidArgument("codec training needs at least one mel".into()));
        }
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        let pool = ndarray::concatenate(Axis(0), &views).expect("patch widths agree");
        Ok(Self {
            codec,
            opt,
            cfg,
            step,
            pool,
        })
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    /// One optimizer update; returns the loss before the update.
    pub fn step(&mut self) -> Result<CodecLoss> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.step);
        let n = self.pool.nrows();
        let idx: Vec<usize> = (0..self.cfg.batch)
            .map(|_| (rng.next_u64() % n as u64) as usize)
            .collect();
        let x = self.pool.select(Axis(0), &idx);
        let eps = Array2::from_shape_simple_fn((x.nrows(), self.codec.channels), || {
            StandardNormal.sample(&mut rng)
        });
        let mut grads = vec![0.0; self.codec.n_params()];
        let loss = self
            .codec
            .loss_and_grad(&self.codec.params, &x, &eps, self.cfg.kl_weight, Some(&mut grads));
        if !loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergedTraining {
                step: self.step as usize,
            });
        }
        self.opt.step(&mut self.codec.params, &grads);
        self.step += 1;
        Ok(loss)
    }

    pub fn write_checkpoint<W: Write>(&self, w: W) -> Result<W> {
        self.codec
            .write_to(w, Some((&self.opt, self.step, self.cfg.kl_weight)))
    }
}

/// Trained codec with its per-step loss record.
#[derive(Debug, Clone)]
pub struct TrainedCodec {
    pub codec: VariationalCodec,
    pub losses: Vec<CodecLoss>,
}

/// Optimizes reconstruction MSE plus `kl_weight`·KL for `cfg.steps` steps.
pub fn train_codec(dataset: &[LogMelSpectrogram], cfg: CodecTrainConfig) -> Result<TrainedCodec> {
    let mut trainer = CodecTrainer::new(dataset, cfg)?;
    let losses = (0..cfg.steps)
        .map(|_| trainer.step())
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainedCodec {
        codec: trainer.codec,
        losses,
    })
}

/// Largest relative disagreement between the analytic loss gradient and
/// central differences, on a small randomly initialized codec and batch.
pub fn codec_gradient_error(seed: u64) -> f64 {
    let cfg = SpectralConfig::default();
    let codec = VariationalCodec::new(cfg, 2, 5, seed).expect("valid tiny codec");
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = Array2::from_shape_simple_fn((7, PATCH), || {
        let v: f64 = StandardNormal.sample(&mut r);
        0.5 * v
    });
    let eps = Array2::from_shape_simple_fn((7, 2), || StandardNormal.sample(&mut r));
    let mut params = codec.params.clone();
    // Give the log-variance head something non-trivial to differentiate.
    for (i, p) in params.iter_mut().enumerate() {
        *p += 0.05 * ((i as f64) * 0.37).sin();
    }
    let mut grads = vec![0.0; params.len()];
    codec.loss_and_grad(&params, &x, &eps, 0.3, Some(&mut grads));
    let num = numeric_grad(&params, 1e-4, |p| codec.loss_and_grad(p, &x, &eps, 0.3, None).total);
    max_rel_error(&grads, &num)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mel_from_fn(frames: usize, f: impl Fn(usize, usize) -> f64) -> LogMelSpectrogram {
        let cfg = SpectralConfig::default();
        LogMelSpectrogram::from_clamped(Array2::from_shape_fn((frames, cfg.n_mels), |(t, j)| f(t, j)), cfg)
            .unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn reference_round_trip_is_exact() {
        let mel = mel_from_fn(101, |t, j| -5.0 + ((t * 31 + j * 7) % 97) as f64 / 17.0);
        let codec = ReferenceCodec::default();
        let z = codec.encode(&mel, false, &mut rng()).unwrap();
        assert_eq!(z.shape(), (16, 26, 64));
        assert_eq!(codec.decode(&z).unwrap(), mel);
    }

    #[test]
    fn reference_preserves_norm() {
        let mel = mel_from_fn(100, |t, j| -5.0 + ((t * 13 + j * 3) % 41) as f64 / 9.0);
        let z = ReferenceCodec::default().encode(&mel, false, &mut rng()).unwrap();
        let mel_norm = mel.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((z.norm() - mel_norm).abs() < 1e-9);
    }

    #[test]
    fn reference_zero_latent_decodes_to_zero() {
        let z = LatentTensor::zeros((16, 3, 64), 10);
        let mel = ReferenceCodec::default().decode(&z).unwrap();
        assert_eq!(mel.n_frames(), 10);
        assert!(mel.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_rejects_wrong_shape() {
        let z = LatentTensor::zeros((8, 3, 64), 10);
        assert!(matches!(ReferenceCodec::default().decode(&z), Err(Error::ShapeMismatch(_))));
        let codec = VariationalCodec::new(SpectralConfig::default(), 8, 16, 1).unwrap();
        let z = LatentTensor::zeros((8, 4, 64), 10);
        assert!(matches!(codec.decode(&z), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn variational_mean_path_is_deterministic() {
        let codec = VariationalCodec::new(SpectralConfig::default(), 8, 16, 3).unwrap();
        let mel = mel_from_fn(37, |t, j| -4.0 + (t as f64 * 0.1 + j as f64 * 0.02).sin());
        let a = codec.encode(&mel, false, &mut rng()).unwrap();
        let b = codec.encode(&mel, false, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), (8, 10, 64));
        let s = codec.encode(&mel, true, &mut rng()).unwrap();
        assert_ne!(a, s);
        assert_eq!(codec.decode(&a).unwrap().n_frames(), 37);
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_standard_normal(&[0.0; 5], &[0.0; 5]), 0.0);
        let mu = [0.5, -1.5, 2.0];
        let got = kl_standard_normal(&mu, &[0.0; 3]);
        let expected = mu.iter().map(|m| m * m / 2.0).sum::<f64>() / 3.0;
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for seed in [11, 12] {
            let err = codec_gradient_error(seed);
            assert!(err < 1e-3, "relative error {err}");
        }
    }

    #[test]
    fn training_halves_reconstruction_loss() {
        let mels: Vec<_> = (0..100)
            .map(|k| {
                let tilt = 0.01 + 0.0004 * k as f64;
                mel_from_fn(24, move |t, j| {
                    (-0.5 - tilt * j as f64 + 0.3 * ((t + k) as f64 * 0.4).sin()).max(-5.0)
                })
            })
            .collect();
        let cfg = CodecTrainConfig {
            steps: 2000,
            seed: 4,
            ..CodecTrainConfig::default()
        };
        let trained = train_codec(&mels, cfg).unwrap();
        let first = trained.losses[0].recon;
        let last = trained.losses.last().unwrap().recon;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn resume_replays_identical_losses() {
        let mels: Vec<_> = (0..4)
            .map(|k| mel_from_fn(16, move |t, j| -1.0 - 0.01 * j as f64 - 0.1 * ((t * k) % 3) as f64))
            .collect();
        let cfg = CodecTrainConfig {
            steps: 0,
            batch: 32,
            seed: 8,
            ..CodecTrainConfig::default()
        };
        let mut a = CodecTrainer::new(&mels, cfg).unwrap();
        for _ in 0..5 {
            a.step().unwrap();
        }
        let bytes = a.write_checkpoint(Vec::new()).unwrap();
        let mut b = CodecTrainer::resume(bytes.as_slice(), &mels, cfg).unwrap();
        assert_eq!(b.step_index(), 5);
        for _ in 0..5 {
            assert_eq!(a.step().unwrap(), b.step().unwrap());
        }
        let (loaded, _) = VariationalCodec::read_from(bytes.as_slice()).unwrap();
        assert_eq!(loaded.params.len(), a.codec.params.len());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn shape_contract(frames in 1usize..=512) {
            let mel = LogMelSpectrogram::floor_filled(frames, SpectralConfig::default());
            let reference = ReferenceCodec::default();
            let z = reference.encode(&mel, false, &mut rng()).unwrap();
            prop_assert_eq!(z.shape(), (16, frames.div_ceil(4), 64));
            prop_assert_eq!(reference.decode(&z).unwrap().n_frames(), frames);
            let codec = VariationalCodec::new(SpectralConfig::default(), 8, 4, 0).unwrap();
            let z = codec.encode(&mel, false, &mut rng()).unwrap();
            prop_assert_eq!(z.shape(), codec.latent_shape(frames));
            prop_assert_eq!(codec.decode(&z).unwrap().n_frames(), frames);
        }
    }
}
