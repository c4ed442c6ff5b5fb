//! Latent diffusion: zero-terminal-SNR cosine schedule, v-prediction,
//! classifier-free guidance and deterministic DDIM sampling.

mod denoiser;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent_codec::LatentTensor;

pub use denoiser::{
    train_step, denoiser_gradient_error, DenoiserArch, DiffusionTrainConfig, DiffusionTrainer, LatentDiffusion, LatentNorm,
    LatentPair, TimeConvDenoiser,
};

/// Offset of the cosine schedule.
const COSINE_OFFSET: f64 = 0.008;
pub const DEFAULT_STEPS: usize = 1000;

/// Cumulative signal fractions `ᾱ_0..ᾱ_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule with `√ᾱ` shifted and rescaled so the last step carries no signal.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!("schedule needs at least 2 steps, got {steps}")));
        }
        let base: Vec<f64> = (0..=steps)
            .map(|k| cosine_alpha_bar(k, steps).sqrt())
            .collect();
        let (first, last) = (base[0], base[steps]);
        let scale = first / (first - last);
        let alpha_bar = base
            .iter()
            .map(|&s| {
                let r = (s - last) * scale;
                r * r
            })
            .collect();
        Ok(Self { alpha_bar })
    }

    /// Schedule from explicit values; must start at most 1, decrease strictly and end at 0.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        let ok = alpha_bar.len() >= 3
            && alpha_bar[0] <= 1.0
            && *alpha_bar.last().unwrap() == 0.0
            && alpha_bar.windows(2).all(|w| w[1] < w[0]);
        if !ok {
            return Err(Error::InvalidArgument(
                "alpha_bar must decrease strictly from at most 1 to exactly 0".into(),
            ));
        }
        Ok(Self { alpha_bar })
    }

    /// Total diffusion steps `K`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, k: usize) -> Result<f64> {
        self.alpha_bar
            .get(k)
            .copied()
            .ok_or(Error::StepOutOfRange { step: k, max: self.steps() })
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `(√ᾱ_k, √(1-ᾱ_k))`.
    pub fn coefficients(&self, k: usize) -> Result<(f64, f64)> {
        let ab = self.alpha_bar(k)?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }
}

/// Unshifted cosine value at step `k` of `steps`.
pub fn cosine_alpha_bar(k: usize, steps: usize) -> f64 {
    let x = (k as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
    x.cos().powi(2)
}

pub fn build_schedule(steps: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::cosine(steps)
}

fn axpby(a: f64, x: &LatentTensor, b: f64, y: &LatentTensor) -> Result<LatentTensor> {
    x.check_same_shape(y)?;
    let mut out = x.clone();
    out.data.zip_mut_with(&y.data, |o, &yv| *o = a * *o + b * yv);
    Ok(out)
}

/// `z_k = √ᾱ_k z0 + √(1-ᾱ_k) eps`.
pub fn forward_diffuse(z0: &LatentTensor, k: usize, eps: &LatentTensor, sched: &NoiseSchedule) -> Result<LatentTensor> {
    let (a, b) = sched.coefficients(k)?;
    axpby(a, z0, b, eps)
}

/// `v_k = √ᾱ_k eps - √(1-ᾱ_k) z0`.
pub fn v_target(z0: &LatentTensor, eps: &LatentTensor, k: usize, sched: &NoiseSchedule) -> Result<LatentTensor> {
    let (a, b) = sched.coefficients(k)?;
    axpby(a, eps, -b, z0)
}

/// Recovers `(ẑ0, ε̂)` from a noisy latent and a velocity.
pub fn split_velocity(z_k: &LatentTensor, v: &LatentTensor, k: usize, sched: &NoiseSchedule) -> Result<(LatentTensor, LatentTensor)> {
    let (a, b) = sched.coefficients(k)?;
    Ok((axpby(a, z_k, -b, v)?, axpby(b, z_k, a, v)?))
}

/// The conditional velocity predictor. `cond = None` is the empty (all-zero) token.
pub trait Denoiser: Send + Sync {
    fn predict_v(&self, z_k: &LatentTensor, k: usize, cond: Option<&LatentTensor>) -> Result<LatentTensor>;
}

/// Guided velocity `v_uncond + w (v_cond - v_uncond)`.
pub fn cfg_combine(v_cond: &LatentTensor, v_uncond: &LatentTensor, w: f64) -> Result<LatentTensor> {
    axpby(w, v_cond, 1.0 - w, v_uncond)
}

/// Sampler settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub ddim_steps: usize,
    pub guidance_scale: f64,
    /// Only the deterministic sampler (0) is supported.
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            ddim_steps: 50,
            guidance_scale: 3.5,
            eta: 0.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.ddim_steps < 1 || self.ddim_steps > sched.steps() {
            return Err(Error::InvalidArgument(format!(
                "ddim_steps {} not in 1..={}",
                self.ddim_steps,
                sched.steps()
            )));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "guidance scale {} must be finite and non-negative",
                self.guidance_scale
            )));
        }
        if self.eta != 0.0 {
            return Err(Error::InvalidArgument("only eta = 0 is supported".into()));
        }
        Ok(())
    }
}

/// Exponent of the visit grid; values above 1 pack steps toward low noise,
/// where narrow data distributions change fastest along the trajectory.
pub const TIMESTEP_POWER: f64 = 1.5;

/// Decreasing visit order of `n` steps from `K` down to 1, spaced as
/// `1 + (K - 1) u^1.5` for `u` evenly spread over `[1, 0]`.
pub fn ddim_timesteps(total: usize, n: usize) -> Vec<usize> {
    let n = n.min(total);
    if n <= 1 {
        return vec![total];
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let u = 1.0 - i as f64 / (n - 1) as f64;
        let k = (1.0 + (total - 1) as f64 * u.powf(TIMESTEP_POWER)).round() as usize;
        // Keep strictly decreasing while leaving room for the remaining steps.
        let hi = out.last().map_or(total, |&p: &usize| p - 1);
        out.push(k.min(hi).max(n - i));
    }
    out
}

pub(crate) fn gaussian_like<R: RngCore + ?Sized>(shape: (usize, usize, usize), frames: usize, rng: &mut R) -> LatentTensor {
    let mut z = LatentTensor::zeros(shape, frames);
    z.data.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
    z
}

/// Deterministic DDIM from pure noise; the latent shape follows `cond`.
pub fn ddim_sample(
    model: &dyn Denoiser,
    cond: &LatentTensor,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut dyn RngCore,
) -> Result<LatentTensor> {
    cfg.validate(sched)?;
    let mut z = gaussian_like(cond.shape(), cond.frames, rng);
    let steps = ddim_timesteps(sched.steps(), cfg.ddim_steps);
    let w = cfg.guidance_scale;
    for (i, &k) in steps.iter().enumerate() {
        let v = if w == 1.0 {
            model.predict_v(&z, k, Some(cond))?
        } else if w == 0.0 {
            model.predict_v(&z, k, None)?
        } else {
            let vc = model.predict_v(&z, k, Some(cond))?;
            let vu = model.predict_v(&z, k, None)?;
            cfg_combine(&vc, &vu, w)?
        };
        if v.shape() != z.shape() {
            return Err(Error::ShapeMismatch(format!(
                "denoiser returned {:?} for input {:?}",
                v.shape(),
                z.shape()
            )));
        }
        let (x0, eps) = split_velocity(&z, &v, k, sched)?;
        z = match steps.get(i + 1) {
            Some(&prev) => forward_diffuse(&x0, prev, &eps, sched)?,
            None => x0,
        };
    }
    Ok(z)
}

/// One training draw for a batch element.
#[derive(Debug, Clone)]
pub(crate) struct NoiseDraw {
    pub k: usize,
    pub eps: LatentTensor,
    pub drop_cond: bool,
}

pub(crate) fn draw_noise<R: Rng + ?Sized>(
    shapes: impl Iterator<Item = ((usize, usize, usize), usize)>,
    total: usize,
    cfg_drop: f64,
    rng: &mut R,
) -> Vec<NoiseDraw> {
    shapes
        .map(|(shape, frames)| {
            let k = rng.random_range(1..=total);
            let drop_cond = rng.random::<f64>() < cfg_drop;
            let eps = gaussian_like(shape, frames, rng);
            NoiseDraw { k, eps, drop_cond }
        })
        .collect()
}

fn check_drop(cfg_drop: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&cfg_drop) {
        return Err(Error::InvalidArgument(format!("cfg_drop {cfg_drop} not in [0, 1]")));
    }
    Ok(())
}

/// Mean squared v-prediction error of any denoiser on `(z0, cond)` pairs,
/// drawing steps, noise and condition drops exactly as [`train_step`] does.
pub fn v_loss<R: Rng + ?Sized>(
    model: &dyn Denoiser,
    batch: &[(LatentTensor, LatentTensor)],
    sched: &NoiseSchedule,
    rng: &mut R,
    cfg_drop: f64,
) -> Result<f64> {
    check_drop(cfg_drop)?;
    let draws = draw_noise(batch.iter().map(|(z, _)| (z.shape(), z.frames)), sched.steps(), cfg_drop, rng);
    let (mut sum, mut n) = (0.0, 0usize);
    for ((z0, cond), d) in batch.iter().zip(&draws) {
        let z_k = forward_diffuse(z0, d.k, &d.eps, sched)?;
        let target = v_target(z0, &d.eps, d.k, sched)?;
        let c = if d.drop_cond { None } else { Some(cond) };
        let pred = model.predict_v(&z_k, d.k, c)?;
        target.check_same_shape(&pred)?;
        sum += pred.data.iter().zip(target.data.iter()).map(|(p, t)| (p - t).powi(2)).sum::<f64>();
        n += pred.len();
    }
    Ok(sum / n.max(1) as f64)
}
