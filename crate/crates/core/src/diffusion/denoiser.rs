//! A small residual temporal-convolution velocity predictor and its trainer.
//!
//! Each latent time step is flattened to `channels·freq` features and
//! concatenated with the conditioning latent at the same step. Three-tap
//! convolutions run along time; the diffusion step enters through a
//! sinusoidal embedding added after the input convolution.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_drop, ddim_sample, draw_noise, gaussian_like, forward_diffuse, v_target, Denoiser, NoiseSchedule, SamplerConfig};
use crate::checkpoint::{CkptReader, CkptWriter, FLAG_TRAINING_STATE};
use crate::error::{Error, Result};
use crate::latent_codec::{save_with, LatentTensor};
use crate::nn::{col2im3, im2col3, max_rel_error, numeric_grad, silu, silu_grad, Adam, Dense, Layout};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub channels: usize,
    pub freq: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub emb_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Net {
    input: Dense,
    emb: Dense,
    blocks: Vec<Dense>,
    output: Dense,
}

/// Residual temporal-convolution denoiser over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeConvDenoiser {
    arch: DenoiserArch,
    net: Net,
    params: Vec<f64>,
}

/// Per-sample inputs of one forward pass; all samples share the time length.
struct Inputs<'a> {
    z: Vec<&'a LatentTensor>,
    cond: Vec<Option<&'a LatentTensor>>,
    ks: Vec<usize>,
}

struct Cache {
    len: usize,
    col0: Array2<f64>,
    emb_in: Array2<f64>,
    /// Residual stream before each block, then after the last one.
    hs: Vec<Array2<f64>>,
    cols: Vec<Array2<f64>>,
    col_out: Array2<f64>,
}

fn step_embedding(k: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut e = vec![0.0; dim];
    for j in 0..half {
        let freq = (-(10_000f64).ln() * j as f64 / half as f64).exp();
        let a = k as f64 * freq;
        e[j] = a.sin();
        e[half + j] = a.cos();
    }
    e
}

impl TimeConvDenoiser {
    pub fn new(arch: DenoiserArch, seed: u64) -> Result<Self> {
        if arch.channels == 0 || arch.freq == 0 || arch.hidden == 0 || arch.emb_dim < 2 || !arch.emb_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("invalid denoiser architecture {arch:?}")));
        }
        let feat = arch.channels * arch.freq;
        let mut l = Layout::default();
        let net = Net {
            input: l.dense(3 * 2 * feat, arch.hidden),
            emb: l.dense(arch.emb_dim, arch.hidden),
            blocks: (0..arch.blocks).map(|_| l.dense(3 * arch.hidden, arch.hidden)).collect(),
            output: l.dense(3 * arch.hidden, feat),
        };
        let mut params = vec![0.0; l.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        net.input.init(&mut params, 1.0, &mut rng);
        net.emb.init(&mut params, 1.0, &mut rng);
        for b in &net.blocks {
            b.init(&mut params, 0.5, &mut rng);
        }
        net.output.zero_init(&mut params);
        Ok(Self { arch, net, params })
    }

    pub fn arch(&self) -> DenoiserArch {
        self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn check(&self, z: &LatentTensor) -> Result<()> {
        let (c, _, f) = z.shape();
        if c != self.arch.channels || f != self.arch.freq {
            return Err(Error::ShapeMismatch(format!(
                "denoiser expects {}×t×{} latents, got {:?}",
                self.arch.channels,
                self.arch.freq,
                z.shape()
            )));
        }
        Ok(())
    }

    fn features(&self, inp: &Inputs) -> Result<(Array2<f64>, usize)> {
        let len = inp.z[0].shape().1;
        let (c, f) = (self.arch.channels, self.arch.freq);
        let feat = c * f;
        let mut x = Array2::zeros((inp.z.len() * len, 2 * feat));
        for (b, (z, cond)) in inp.z.iter().zip(&inp.cond).enumerate() {
            self.check(z)?;
            if z.shape().1 != len {
                return Err(Error::ShapeMismatch("batch latents differ in length".into()));
            }
            if let Some(cd) = cond {
                z.check_same_shape(cd)?;
            }
            for t in 0..len {
                let mut row = x.row_mut(b * len + t);
                for ch in 0..c {
                    for fi in 0..f {
                        row[ch * f + fi] = z.data[[ch, t, fi]];
                        if let Some(cd) = cond {
                            row[feat + ch * f + fi] = cd.data[[ch, t, fi]];
                        }
                    }
                }
            }
        }
        Ok((x, len))
    }

    fn forward(&self, p: &[f64], inp: &Inputs) -> Result<(Array2<f64>, Cache)> {
        let (x, len) = self.features(inp)?;
        let col0 = im2col3(x.view(), len);
        let mut h = self.net.input.forward(p, col0.view());
        let emb_in = Array2::from_shape_vec(
            (inp.ks.len(), self.arch.emb_dim),
            inp.ks.iter().flat_map(|&k| step_embedding(k, self.arch.emb_dim)).collect(),
        )
        .expect("embedding shape");
        let e = self.net.emb.forward(p, emb_in.view());
        for (b, mut rows) in h.axis_chunks_iter_mut(Axis(0), len).enumerate() {
            rows += &e.row(b);
        }
        let mut hs = Vec::with_capacity(self.net.blocks.len() + 1);
        let mut cols = Vec::with_capacity(self.net.blocks.len());
        for blk in &self.net.blocks {
            let col = im2col3(h.mapv(silu).view(), len);
            let next = &h + &blk.forward(p, col.view());
            hs.push(h);
            cols.push(col);
            h = next;
        }
        let col_out = im2col3(h.mapv(silu).view(), len);
        let y = self.net.output.forward(p, col_out.view());
        hs.push(h);
        Ok((
            y,
            Cache {
                len,
                col0,
                emb_in,
                hs,
                cols,
                col_out,
            },
        ))
    }

    fn backward(&self, p: &[f64], cache: &Cache, dy: &Array2<f64>, grads: &mut [f64]) {
        let len = cache.len;
        let n_blocks = self.net.blocks.len();
        let dcol = self.net.output.backward(p, cache.col_out.view(), dy.view(), grads);
        let mut dh = col2im3(dcol.view(), len) * &cache.hs[n_blocks].mapv(silu_grad);
        for (i, blk) in self.net.blocks.iter().enumerate().rev() {
            let dcol = blk.backward(p, cache.cols[i].view(), dh.view(), grads);
            dh = dh + col2im3(dcol.view(), len) * &cache.hs[i].mapv(silu_grad);
        }
        self.net.input.backward(p, cache.col0.view(), dh.view(), grads);
        let de = Array2::from_shape_fn((cache.emb_in.nrows(), self.arch.hidden), |(b, j)| {
            dh.slice(s![b * len..(b + 1) * len, j]).sum()
        });
        self.net.emb.backward(p, cache.emb_in.view(), de.view(), grads);
    }

    fn unflatten(&self, y: &Array2<f64>, b: usize, like: &LatentTensor) -> LatentTensor {
        let (c, len, f) = like.shape();
        let mut out = LatentTensor::zeros_like(like);
        for t in 0..len {
            let row = y.row(b * len + t);
            for ch in 0..c {
                for fi in 0..f {
                    out.data[[ch, t, fi]] = row[ch * f + fi];
                }
            }
        }
        out
    }

    /// Batch loss on explicit draws; gradients accumulate into `grads` when given.
    fn loss(
        &self,
        p: &[f64],
        batch: &[(LatentTensor, LatentTensor)],
        draws: &[super::NoiseDraw],
        sched: &NoiseSchedule,
        grads: Option<&mut [f64]>,
    ) -> Result<f64> {
        let mut zk = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for ((z0, _), d) in batch.iter().zip(draws) {
            zk.push(forward_diffuse(z0, d.k, &d.eps, sched)?);
            targets.push(v_target(z0, &d.eps, d.k, sched)?);
        }
        let inp = Inputs {
            z: zk.iter().collect(),
            cond: batch
                .iter()
                .zip(draws)
                .map(|((_, c), d)| if d.drop_cond { None } else { Some(c) })
                .collect(),
            ks: draws.iter().map(|d| d.k).collect(),
        };
        let (y, cache) = self.forward(p, &inp)?;
        let mut diff = y;
        let len = cache.len;
        let feat = self.arch.channels * self.arch.freq;
        for (b, tgt) in targets.iter().enumerate() {
            for t in 0..len {
                let mut row = diff.row_mut(b * len + t);
                for ch in 0..self.arch.channels {
                    for fi in 0..self.arch.freq {
                        row[ch * self.arch.freq + fi] -= tgt.data[[ch, t, fi]];
                    }
                }
            }
        }
        let n = (diff.nrows() * feat) as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        if let Some(g) = grads {
            let dy = diff.mapv(|d| 2.0 * d / n);
            self.backward(p, &cache, &dy, g);
        }
        Ok(loss)
    }
}

impl Denoiser for TimeConvDenoiser {
    fn predict_v(&self, z_k: &LatentTensor, k: usize, cond: Option<&LatentTensor>) -> Result<LatentTensor> {
        let inp = Inputs {
            z: vec![z_k],
            cond: vec![cond],
            ks: vec![k],
        };
        let (y, _) = self.forward(&self.params, &inp)?;
        Ok(self.unflatten(&y, 0, z_k))
    }
}

/// One optimizer update on `(z0, cond)` pairs of equal shape; returns the
/// pre-update loss. Step, noise and condition drops come from `rng`.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut TimeConvDenoiser,
    opt: &mut Adam,
    batch: &[(LatentTensor, LatentTensor)],
    sched: &NoiseSchedule,
    rng: &mut R,
    cfg_drop: f64,
) -> Result<f64> {
    check_drop(cfg_drop)?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let draws = draw_noise(batch.iter().map(|(z, _)| (z.shape(), z.frames)), sched.steps(), cfg_drop, rng);
    let mut grads = vec![0.0; model.n_params()];
    let loss = model.loss(&model.params, batch, &draws, sched, Some(&mut grads))?;
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::DivergedTraining { step: opt.steps_taken() as usize });
    }
    opt.step(&mut model.params, &grads);
    Ok(loss)
}

/// Per-channel latent standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn fit<'a>(latents: impl IntoIterator<Item = &'a LatentTensor>) -> Result<Self> {
        let mut sums: Vec<(f64, f64, usize)> = Vec::new();
        for z in latents {
            let c = z.shape().0;
            if sums.is_empty() {
                sums = vec![(0.0, 0.0, 0); c];
            } else if sums.len() != c {
                return Err(Error::ShapeMismatch("latents differ in channel count".into()));
            }
            for (ch, acc) in z.data.outer_iter().zip(sums.iter_mut()) {
                for &v in ch.iter() {
                    acc.0 += v;
                    acc.1 += v * v;
                    acc.2 += 1;
                }
            }
        }
        if sums.is_empty() {
            return Err(Error::InvalidArgument("no latents to fit".into()));
        }
        let (mean, std) = sums
            .iter()
            .map(|&(s, sq, n)| {
                let n = n.max(1) as f64;
                let m = s / n;
                (m, (sq / n - m * m).max(0.0).sqrt().max(1e-3))
            })
            .unzip();
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, z: &LatentTensor) -> LatentTensor {
        let mut out = z.clone();
        for ((mut ch, m), s) in out.data.outer_iter_mut().zip(&self.mean).zip(&self.std) {
            ch.mapv_inplace(|v| (v - m) / s);
        }
        out
    }

    pub fn denormalize(&self, z: &LatentTensor) -> LatentTensor {
        let mut out = z.clone();
        for ((mut ch, m), s) in out.data.outer_iter_mut().zip(&self.mean).zip(&self.std) {
            ch.mapv_inplace(|v| v * s + m);
        }
        out
    }
}

/// Schedule, latent statistics and denoiser bundled for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDiffusion {
    pub schedule: NoiseSchedule,
    pub norm: LatentNorm,
    pub denoiser: TimeConvDenoiser,
}

const BLDM_MAGIC: &[u8; 4] = b"BLDM";
const BLDM_VERSION: u32 = 1;

impl LatentDiffusion {
    pub fn new(arch: DenoiserArch, steps: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            schedule: NoiseSchedule::cosine(steps)?,
            norm: LatentNorm::identity(arch.channels),
            denoiser: TimeConvDenoiser::new(arch, seed)?,
        })
    }

    /// Samples a latent conditioned on `cond` (in codec units) and returns it in codec units.
    pub fn sample(&self, cond: &LatentTensor, cfg: &SamplerConfig, rng: &mut dyn RngCore) -> Result<LatentTensor> {
        self.denoiser.check(cond)?;
        let c = self.norm.normalize(cond);
        let z = ddim_sample(&self.denoiser, &c, &self.schedule, cfg, rng)?;
        Ok(self.norm.denormalize(&z))
    }

    pub fn write_to<W: Write>(&self, w: W, state: Option<(&Adam, u64)>) -> Result<W> {
        let flags = if state.is_some() { FLAG_TRAINING_STATE } else { 0 };
        let a = self.denoiser.arch;
        let mut c = CkptWriter::new(w, BLDM_MAGIC, BLDM_VERSION, flags)?;
        c.u32(self.schedule.steps() as u32)?;
        for v in [a.channels, a.freq, a.hidden, a.blocks, a.emb_dim] {
            c.u32(v as u32)?;
        }
        c.f64s(self.schedule.values())?;
        c.f64s(&self.norm.mean)?;
        c.f64s(&self.norm.std)?;
        c.f32s(&self.denoiser.params)?;
        if let Some((opt, step)) = state {
            c.training_state(&self.denoiser.params, opt, step)?;
        }
        c.finish()
    }

    pub fn read_from<R: Read>(r: R) -> Result<(Self, Option<(Adam, u64)>)> {
        let mut c = CkptReader::new(r, BLDM_MAGIC, BLDM_VERSION)?;
        let steps = c.u32()? as usize;
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = c.u32()? as usize;
        }
        let arch = DenoiserArch {
            channels: dims[0],
            freq: dims[1],
            hidden: dims[2],
            blocks: dims[3],
            emb_dim: dims[4],
        };
        let bad = |e: Error| Error::BadCheckpoint(e.to_string());
        let schedule = NoiseSchedule::from_alpha_bar(c.f64s(steps + 1)?).map_err(bad)?;
        let norm = LatentNorm {
            mean: c.f64s(arch.channels)?,
            std: c.f64s(arch.channels)?,
        };
        let mut denoiser = TimeConvDenoiser::new(arch, 0).map_err(bad)?;
        denoiser.params = c.f32s(denoiser.n_params())?;
        let state = c.training_state(denoiser.n_params())?.map(|s| {
            denoiser.params = s.params;
            let mut opt = Adam::new(denoiser.n_params(), 0.0, None);
            opt.m = s.m;
            opt.v = s.v;
            opt.t = s.t;
            (opt, s.step)
        });
        Ok((
            Self {
                schedule,
                norm,
                denoiser,
            },
            state,
        ))
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

/// Hyperparameters for [`DiffusionTrainer`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Latent time steps per training crop.
    pub crop: usize,
    pub cfg_drop: f64,
    pub hidden: usize,
    pub blocks: usize,
    pub emb_dim: usize,
    pub diffusion_steps: usize,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-4,
            batch: 16,
            crop: 16,
            cfg_drop: 0.1,
            hidden: 128,
            blocks: 2,
            emb_dim: 32,
            diffusion_steps: super::DEFAULT_STEPS,
            seed: 0,
        }
    }
}

/// High-resolution target latent with its low-resolution conditioning latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPair {
    pub target: LatentTensor,
    pub cond: LatentTensor,
}

/// Step-wise trainer with per-step RNG streams, so resumed runs replay exactly.
pub struct DiffusionTrainer {
    pub model: LatentDiffusion,
    opt: Adam,
    cfg: DiffusionTrainConfig,
    step: u64,
    data: Vec<(LatentTensor, LatentTensor)>,
    crop: usize,
}

impl DiffusionTrainer {
    /// Fits latent statistics on the targets and initializes a fresh model.
    pub fn new(pairs: &[LatentPair], cfg: DiffusionTrainConfig) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::InvalidArgument("diffusion training needs at least one pair".into()))?;
        let (channels, _, freq) = first.target.shape();
        let arch = DenoiserArch {
            channels,
            freq,
            hidden: cfg.hidden,
            blocks: cfg.blocks,
            emb_dim: cfg.emb_dim,
        };
        let mut model = LatentDiffusion::new(arch, cfg.diffusion_steps, cfg.seed)?;
        model.norm = LatentNorm::fit(pairs.iter().map(|p| &p.target))?;
        let opt = Adam::new(model.denoiser.n_params(), cfg.lr, Some(1.0));
        Self::with_state(model, opt, 0, pairs, cfg)
    }

    pub fn resume<R: Read>(r: R, pairs: &[LatentPair], cfg: DiffusionTrainConfig) -> Result<Self> {
        let (model, state) = LatentDiffusion::read_from(r)?;
        let (mut opt, step) = state.ok_or_else(|| Error::BadCheckpoint("checkpoint has no training state".into()))?;
        opt.lr = cfg.lr;
        opt.clip_norm = Some(1.0);
        Self::with_state(model, opt, step, pairs, cfg)
    }

    fn with_state(
        model: LatentDiffusion,
        opt: Adam,
        step: u64,
        pairs: &[LatentPair],
        cfg: DiffusionTrainConfig,
    ) -> Result<Self> {
        if cfg.batch == 0 || cfg.crop == 0 {
            return Err(Error::InvalidArgument("batch and crop must be positive".into()));
        }
        check_drop(cfg.cfg_drop)?;
        let mut data = Vec::with_capacity(pairs.len());
        for p in pairs {
            model.denoiser.check(&p.target)?;
            p.target.check_same_shape(&p.cond)?;
            data.push((model.norm.normalize(&p.target), model.norm.normalize(&p.cond)));
        }
        let crop = data
            .iter()
            .map(|(z, _)| z.shape().1)
            .min()
            .ok_or_else(|| Error::InvalidArgument("diffusion training needs at least one pair".into()))?
            .min(cfg.crop);
        Ok(Self {
            model,
            opt,
            cfg,
            step,
            data,
            crop,
        })
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.step);
        let crop = self.crop;
        let batch: Vec<_> = (0..self.cfg.batch)
            .map(|_| {
                let (z, c) = &self.data[rng.random_range(0..self.data.len())];
                let start = rng.random_range(0..=z.shape().1 - crop);
                let cut = |x: &LatentTensor| {
                    LatentTensor::new(x.data.slice(s![.., start..start + crop, ..]).to_owned(), crop * 4)
                };
                (cut(z), cut(c))
            })
            .collect();
        let loss = train_step(
            &mut self.model.denoiser,
            &mut self.opt,
            &batch,
            &self.model.schedule,
            &mut rng,
            self.cfg.cfg_drop,
        )
        .map_err(|e| match e {
            Error::DivergedTraining { .. } => Error::DivergedTraining { step: self.step as usize },
            e => e,
        })?;
        self.step += 1;
        Ok(loss)
    }

    pub fn write_checkpoint<W: Write>(&self, w: W) -> Result<W> {
        self.model.write_to(w, Some((&self.opt, self.step)))
    }
}

/// Largest relative disagreement between the analytic v-loss gradient and
/// central differences, on a tiny perturbed denoiser with a random batch.
pub fn denoiser_gradient_error(seed: u64) -> Result<f64> {
    let arch = DenoiserArch {
        channels: 2,
        freq: 3,
        hidden: 6,
        blocks: 2,
        emb_dim: 4,
    };
    let mut model = TimeConvDenoiser::new(arch, seed)?;
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Break the zero-initialized output layer so every path carries gradient.
    for p in model.params.iter_mut() {
        *p += 0.2 * (r.random::<f64>() - 0.5);
    }
    let sched = super::build_schedule(1000)?;
    let b: Vec<_> = (0..3)
        .map(|_| (gaussian_like((2, 5, 3), 20, &mut r), gaussian_like((2, 5, 3), 20, &mut r)))
        .collect();
    let draws = draw_noise(b.iter().map(|(z, _)| (z.shape(), z.frames)), 1000, 0.3, &mut r);
    let mut grads = vec![0.0; model.n_params()];
    model.loss(&model.params, &b, &draws, &sched, Some(&mut grads))?;
    let num = numeric_grad(&model.params, 1e-4, |p| model.loss(p, &b, &draws, &sched, None).expect("shapes checked above"));
    Ok(max_rel_error(&grads, &num))
}
