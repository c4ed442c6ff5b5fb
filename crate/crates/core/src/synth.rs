//! Synthetic full-band test material: harmonic tones and shaped noise bursts.

use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::signal_io::{AudioBuffer, TARGET_RATE};

/// Level of the white background added to every clip.
const NOISE_FLOOR: f64 = 1e-3;
const PEAK: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipKind {
    Harmonic,
    NoiseBurst,
}

/// A clip of `seconds` at 48 kHz, fully determined by `(kind, seed)`.
pub fn synth_clip(kind: ClipKind, seconds: f64, seed: u64) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * TARGET_RATE as f64).round() as usize;
    let fs = TARGET_RATE as f64;
    let mut x = match kind {
        ClipKind::Harmonic => harmonic(n, fs, &mut rng),
        ClipKind::NoiseBurst => bursts(n, fs, &mut rng),
    };
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    for v in &mut x {
        let floor: f64 = StandardNormal.sample(&mut rng);
        *v = *v * PEAK / peak + NOISE_FLOOR * floor;
    }
    AudioBuffer::new(x, TARGET_RATE).expect("finite synthetic samples")
}

/// Harmonic series with a random fundamental, spectral slope, vibrato and
/// attack/decay envelope; partials run up to Nyquist.
fn harmonic(n: usize, fs: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let f0 = rng.random_range(80.0..400.0);
    let slope = rng.random_range(0.5..1.0);
    let vib_rate = rng.random_range(3.0..7.0);
    let vib_depth = rng.random_range(0.0..0.01);
    let attack = rng.random_range(0.01..0.1) * fs;
    let decay = rng.random_range(0.5..3.0);
    let n_partials = ((fs / 2.0 * 0.98) / (f0 * (1.0 + vib_depth))).floor() as usize;
    // Partial h contributes Im(c_h z^h) with z = e^{i phase}; Horner keeps this cheap.
    let coeffs: Vec<Complex64> = (1..=n_partials)
        .map(|h| Complex64::from_polar(1.0 / (h as f64).powf(slope), rng.random_range(0.0..TAU)))
        .collect();
    let mut phase = 0.0;
    (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            let f = f0 * (1.0 + vib_depth * (TAU * vib_rate * t).sin());
            phase += TAU * f / fs;
            let env = (i as f64 / attack).min(1.0) * (-decay * t).exp();
            let z = Complex64::from_polar(1.0, phase);
            let sum = coeffs.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, c| (acc + c) * z);
            env * sum.im
        })
        .collect()
}

/// Two to five bursts of white noise through a random one-pole tilt.
fn bursts(n: usize, fs: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = vec![0.0; n];
    let count = rng.random_range(2..=5);
    for _ in 0..count {
        let start = rng.random_range(0..n);
        let len = rng.random_range(0.05..0.3) * fs;
        let pole: f64 = rng.random_range(0.0..0.6);
        let gain = rng.random_range(0.3..1.0);
        let mut y = 0.0;
        for (j, v) in x.iter_mut().enumerate().skip(start) {
            let age = (j - start) as f64;
            if age > len {
                break;
            }
            let w: f64 = StandardNormal.sample(rng);
            y = (1.0 - pole) * w + pole * y;
            let env = (age / (0.005 * fs)).min(1.0) * (-(age / len) * 3.0).exp();
            *v += gain * env * y;
        }
    }
    x
}

/// `n` one-second clips alternating harmonic and noise-burst material.
pub fn synth_corpus(n: usize, seed: u64) -> Vec<AudioBuffer> {
    (0..n)
        .map(|i| {
            let kind = if i % 2 == 0 {
                ClipKind::Harmonic
            } else {
                ClipKind::NoiseBurst
            };
            synth_clip(kind, 1.0, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))
        })
        .collect()
}
