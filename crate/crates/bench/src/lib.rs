//! Shared fixtures for the criterion benchmarks.

use bandlift::bandwidth::{degrade, FilterFamily, FilterSpec};
use bandlift::diffusion::{DenoiserArch, LatentDiffusion};
use bandlift::latent_codec::LatentTensor;
use bandlift::synth::{synth_clip, ClipKind};
use bandlift::AudioBuffer;

/// One second of harmonic material at 48 kHz.
pub fn clip() -> AudioBuffer {
    synth_clip(ClipKind::Harmonic, 1.0, 42)
}

/// The same clip lowpassed at 4 kHz and resampled to 8 kHz.
pub fn narrowband_clip() -> AudioBuffer {
    degrade(&clip(), &FilterSpec::new(FilterFamily::Chebyshev1, 8, 4000.0)).expect("valid spec")
}

/// An untrained diffusion model shaped for one second of 8-channel latents.
pub fn ldm() -> (LatentDiffusion, LatentTensor) {
    let arch = DenoiserArch {
        channels: 8,
        freq: 64,
        hidden: 128,
        blocks: 2,
        emb_dim: 32,
    };
    let model = LatentDiffusion::new(arch, 1000, 0).expect("valid architecture");
    let cond = LatentTensor::zeros((8, 26, 64), 101);
    (model, cond)
}
