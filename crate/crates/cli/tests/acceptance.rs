//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. Built with `harness = false`.

use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use bandlift::bandwidth::{
    apply_filter, degrade, design_lowpass, draw_filter_spec, estimate_rolloff, FilterFamily, FilterSpec,
    ROLLOFF_FRACTION,
};
use bandlift::diffusion::{
    build_schedule, denoiser_gradient_error, ddim_sample, forward_diffuse, v_target, Denoiser, DiffusionTrainConfig,
    DiffusionTrainer, LatentPair, NoiseSchedule, SamplerConfig,
};
use bandlift::eval::lsd;
use bandlift::latent_codec::{codec_gradient_error, train_codec, CodecTrainConfig};
use bandlift::pipeline::{observe, replace_low_mel, replace_low_wave, upsample, Models};
use bandlift::spectral::{mel_bank, GriffinLim};
use bandlift::synth::{synth_clip, synth_corpus, ClipKind};
use bandlift::{
    resample_cubic, stft, wav_to_logmel, write_wav, AudioBuffer, LatentCodec, LatentTensor, LogMelSpectrogram,
    SpectralConfig, WavEncoding,
};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn noise(len: usize, seed: u64) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AudioBuffer::new((0..len).map(|_| StandardNormal.sample(&mut rng)).collect(), 48_000).unwrap()
}

// ---------------------------------------------------------------- 1

/// Direct-DFT log-spectral distance: centered frames with reflect padding,
/// periodic Hann, n_fft 2048, hop 512, magnitude floor 1e-8.
fn lsd_brute(a: &[f64], b: &[f64], cos: &[f64], sin: &[f64]) -> f64 {
    const N: usize = 2048;
    const HOP: usize = 512;
    let n = a.len().min(b.len());
    let frames = n / HOP + 1;
    let window: Vec<f64> = (0..N).map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / N as f64).cos())).collect();
    let mirror = |i: isize| -> usize {
        let mut i = i;
        let last = n as isize - 1;
        while i < 0 || i > last {
            i = if i < 0 { -i } else { 2 * last - i };
        }
        i as usize
    };
    let spectrum = |x: &[f64], t: usize| -> Vec<f64> {
        let frame: Vec<f64> = (0..N)
            .map(|k| x[mirror((t * HOP) as isize - (N / 2) as isize + k as isize)] * window[k])
            .collect();
        (0..=N / 2)
            .map(|bin| {
                let (mut re, mut im) = (0.0, 0.0);
                for (k, v) in frame.iter().enumerate() {
                    let idx = (bin * k) % N;
                    re += v * cos[idx];
                    im -= v * sin[idx];
                }
                (re * re + im * im).max(1e-16).log10()
            })
            .collect()
    };
    let mut total = 0.0;
    for t in 0..frames {
        let pa = spectrum(&a[..n], t);
        let pb = spectrum(&b[..n], t);
        let ms = pa.iter().zip(&pb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / pa.len() as f64;
        total += ms.sqrt();
    }
    total / frames as f64
}

fn lsd_oracle() -> Outcome {
    let start = Instant::now();
    let cos: Vec<f64> = (0..2048).map(|i| (2.0 * PI * i as f64 / 2048.0).cos()).collect();
    let sin: Vec<f64> = (0..2048).map(|i| (2.0 * PI * i as f64 / 2048.0).sin()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let len = rng.random_range(1100..2600);
        let a = noise(len, 1000 + i);
        // Half the pairs share structure so the distances span a useful range.
        let b = if i % 2 == 0 {
            noise(rng.random_range(1100..2600), 5000 + i)
        } else {
            let k = design_lowpass(&FilterSpec::new(FilterFamily::Butterworth, 4, 6000.0), 48_000).unwrap();
            apply_filter(&a, &k)
        };
        let lib = lsd(&a, &b).map_err(|e| e.to_string())?;
        let brute = lsd_brute(a.samples(), b.samples(), &cos, &sin);
        worst = worst.max((lib - brute).abs());
    }
    check(worst < 1e-9, format!("max |lib - brute| = {worst:e}"))?;
    let x = noise(9600, 3);
    let same = lsd(&x, &x).unwrap();
    check(same == 0.0, format!("lsd(x, x) = {same}"))?;
    let scaled = AudioBuffer::new(x.samples().iter().map(|v| v * 10f64.sqrt()).collect(), 48_000).unwrap();
    let one = lsd(&x, &scaled).unwrap();
    check((one - 1.0).abs() < 1e-6, format!("lsd(x, sqrt(10) x) = {one}"))?;
    let el = start.elapsed();
    check(el < Duration::from_secs(10), format!("took {el:?}"))?;
    Ok(format!("max diff {worst:.1e}, scale check {one:.9}, {el:.1?}"))
}

// ---------------------------------------------------------------- 2

/// Jury test on each section's denominator: a second-order polynomial
/// z^2 + a1 z + a2 has both roots inside the unit circle iff |a2| < 1 and
/// |a1| < 1 + a2. Returns the smallest stability margin seen.
fn stability_margin(spec: &FilterSpec) -> Result<f64, String> {
    use bandlift::bandwidth::FilterKernel;
    let k = design_lowpass(spec, 48_000).map_err(|e| format!("{spec:?}: {e}"))?;
    let FilterKernel::Iir(sections) = k else {
        return Ok(1.0);
    };
    let mut margin = f64::INFINITY;
    for s in sections {
        let [a1, a2] = s.a;
        margin = margin.min(1.0 - a2.abs()).min(1.0 + a2 - a1.abs());
    }
    check(margin > 0.0, format!("{spec:?}: unstable section (margin {margin:e})"))?;
    Ok(margin)
}

/// Frequency response of the cascaded sections by direct polynomial
/// evaluation on the unit circle, independent of the library's `response`.
fn transfer_db(spec: &FilterSpec, f: f64) -> f64 {
    use bandlift::bandwidth::FilterKernel;
    let k = design_lowpass(spec, 48_000).unwrap();
    let w = 2.0 * PI * f / 48_000.0;
    let z1 = num_complex::Complex64::from_polar(1.0, -w);
    let z2 = z1 * z1;
    let h = match &k {
        FilterKernel::Iir(sections) => sections.iter().fold(num_complex::Complex64::new(1.0, 0.0), |acc, s| {
            acc * (s.b[0] + s.b[1] * z1 + s.b[2] * z2) / (1.0 + s.a[0] * z1 + s.a[1] * z2)
        }),
        FilterKernel::Fir(taps) => taps
            .iter()
            .enumerate()
            .map(|(n, t)| t * num_complex::Complex64::from_polar(1.0, -w * n as f64))
            .sum(),
    };
    20.0 * h.norm().log10()
}

fn filter_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut margin = f64::INFINITY;
    for _ in 0..1000 {
        margin = margin.min(stability_margin(&draw_filter_spec(&mut rng))?);
    }
    let mut butter_worst = 0.0f64;
    for order in 2..=10 {
        for cutoff in [2000.0, 4000.0, 8000.0, 12_000.0, 16_000.0] {
            let db = transfer_db(&FilterSpec::new(FilterFamily::Butterworth, order, cutoff), cutoff);
            butter_worst = butter_worst.max((db + 3.01).abs());
        }
    }
    check(butter_worst <= 0.1, format!("Butterworth off by {butter_worst} dB at cutoff"))?;
    let stop = transfer_db(&FilterSpec::new(FilterFamily::Chebyshev1, 8, 4000.0), 8000.0);
    check(stop < -40.0, format!("Chebyshev order 8 at 8 kHz: {stop} dB"))?;
    let el = start.elapsed();
    check(el < Duration::from_secs(30), format!("took {el:?}"))?;
    Ok(format!(
        "min stability margin {margin:.1e}, Butterworth error {butter_worst:.3} dB, stopband {stop:.1} dB, {el:.1?}"
    ))
}

// ---------------------------------------------------------------- 3

fn rolloff_estimator() -> Outcome {
    let mut lines = Vec::new();
    for cutoff in [2000.0, 4000.0, 8000.0, 12_000.0, 16_000.0] {
        let k = design_lowpass(&FilterSpec::new(FilterFamily::Chebyshev1, 8, cutoff), 48_000).unwrap();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for seed in 0..16 {
            let y = apply_filter(&noise(48_000, 100 + seed), &k);
            let c = estimate_rolloff(&stft(&y, &SpectralConfig::default()).unwrap(), ROLLOFF_FRACTION).unwrap();
            check(
                (0.9 * cutoff..=1.2 * cutoff).contains(&c),
                format!("cutoff {cutoff}: estimate {c} (seed {seed})"),
            )?;
            lo = lo.min(c);
            hi = hi.max(c);
        }
        lines.push(format!("{:.0}k->[{lo:.0},{hi:.0}]", cutoff / 1000.0));
    }
    Ok(lines.join(" "))
}

// ---------------------------------------------------------------- 4

fn gaussian(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> LatentTensor {
    LatentTensor::new(Array3::from_shape_simple_fn(shape, || StandardNormal.sample(rng)), shape.1 * 4)
}

fn schedule_identities() -> Outcome {
    let sched = build_schedule(1000).map_err(|e| e.to_string())?;
    let last = sched.alpha_bar(1000).unwrap();
    check(last == 0.0, format!("alpha_bar at K = {last:e}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let (mut sum, mut sum_sq, mut count) = (0.0, 0.0, 0usize);
    for _ in 0..10_000 {
        let k = rng.random_range(0..=1000);
        let z0 = gaussian((2, 2, 2), &mut rng);
        let eps = gaussian((2, 2, 2), &mut rng);
        let zk = forward_diffuse(&z0, k, &eps, &sched).unwrap();
        let v = v_target(&z0, &eps, k, &sched).unwrap();
        let ab = sched.alpha_bar(k).unwrap();
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for ((z, vv), x) in zk.data.iter().zip(v.data.iter()).zip(z0.data.iter()) {
            worst = worst.max((a * z - b * vv - x).abs());
            sum += z;
            sum_sq += z * z;
            count += 1;
        }
    }
    check(worst < 1e-6, format!("reconstruction residual {worst:e}"))?;
    let mean = sum / count as f64;
    let var = sum_sq / count as f64 - mean * mean;
    check((var - 1.0).abs() <= 0.02, format!("marginal variance {var}"))?;
    Ok(format!("residual {worst:.1e}, variance {var:.4}"))
}

// ---------------------------------------------------------------- 5

/// Posterior-mean velocity for data drawn from N(mu, sigma^2) per element.
struct GaussianOracle {
    mu: f64,
    sigma: f64,
    sched: NoiseSchedule,
}

impl Denoiser for GaussianOracle {
    fn predict_v(&self, z: &LatentTensor, k: usize, _cond: Option<&LatentTensor>) -> bandlift::Result<LatentTensor> {
        let ab = self.sched.alpha_bar(k)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let s2 = self.sigma * self.sigma;
        let data = z.data.mapv(|z| {
            let x0 = self.mu + a * s2 * (z - a * self.mu) / (a * a * s2 + b * b);
            let eps = if b > 0.0 { (z - a * x0) / b } else { 0.0 };
            a * eps - b * x0
        });
        Ok(LatentTensor::new(data, z.frames))
    }
}

fn ddim_gaussian() -> Outcome {
    let start = Instant::now();
    let (mu, sigma) = (0.7, 0.4);
    let oracle = GaussianOracle {
        mu,
        sigma,
        sched: build_schedule(1000).unwrap(),
    };
    let cond = LatentTensor::zeros((8, 1, 1), 4);
    let cfg = SamplerConfig {
        ddim_steps: 50,
        guidance_scale: 1.0,
        ..SamplerConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut values = Vec::with_capacity(80_000);
    for _ in 0..10_000 {
        let x = ddim_sample(&oracle, &cond, &oracle.sched, &cfg, &mut rng).map_err(|e| e.to_string())?;
        values.extend(x.data.iter().copied());
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    check((mean - mu).abs() <= 0.014, format!("mean {mean}"))?;
    check((std / sigma - 1.0).abs() <= 0.03, format!("std {std}"))?;
    let el = start.elapsed();
    check(el < Duration::from_secs(120), format!("took {el:?}"))?;
    Ok(format!("mean {mean:.4}, std {std:.4}, {el:.1?}"))
}

// ---------------------------------------------------------------- 6

fn gradient_checks() -> Outcome {
    let mut codec = 0.0f64;
    let mut denoiser = 0.0f64;
    for seed in 0..3 {
        codec = codec.max(codec_gradient_error(seed));
        denoiser = denoiser.max(denoiser_gradient_error(seed).map_err(|e| e.to_string())?);
    }
    check(codec < 1e-3, format!("codec relative error {codec:e}"))?;
    check(denoiser < 1e-3, format!("denoiser relative error {denoiser:e}"))?;
    Ok(format!("codec {codec:.1e}, denoiser {denoiser:.1e}"))
}

// ---------------------------------------------------------------- 7

fn band_energies(x: &AudioBuffer, edges: &[f64]) -> Vec<f64> {
    let spec = stft(x, &SpectralConfig::default()).unwrap();
    let mut e = vec![0.0; edges.len() - 1];
    for row in spec.data.rows() {
        for (b, c) in row.iter().enumerate() {
            let f = spec.bin_frequency(b);
            if let Some(i) = edges.windows(2).position(|w| f >= w[0] && f < w[1]) {
                e[i] += c.norm_sqr();
            }
        }
    }
    e
}

fn replacement() -> Outcome {
    let cfg = SpectralConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut field = |frames: usize| {
        LogMelSpectrogram::new(Array2::from_shape_simple_fn((frames, 256), || rng.random_range(-5.0..0.0)), cfg)
            .unwrap()
    };
    let bank = mel_bank(&cfg).unwrap();
    for cutoff in [2000.0, 4000.0, 8000.0, 12_000.0, 16_000.0] {
        let (est, obs) = (field(40), field(40));
        let out = replace_low_mel(&est, &obs, cutoff).unwrap();
        for j in 0..256 {
            let donor = if bank.band_edges(j).2 <= cutoff { &obs } else { &est };
            for t in 0..40 {
                let (a, b) = (out.data()[(t, j)], donor.data()[(t, j)]);
                check(a.to_bits() == b.to_bits(), format!("mel band {j} frame {t} changed at cutoff {cutoff}"))?;
            }
        }
    }
    let obs = noise(48_000, 70);
    let est = noise(48_000, 71);
    let mut worst = 0.0f64;
    for cutoff in [4000.0, 8000.0, 16_000.0] {
        let out = replace_low_wave(&est, &obs, cutoff).unwrap();
        let low: Vec<f64> = (0..=4).map(|i| cutoff * i as f64 / 4.0).collect();
        let high: Vec<f64> = (0..=4).map(|i| cutoff + (24_001.0 - cutoff) * i as f64 / 4.0).collect();
        for (edges, donor) in [(&low, &obs), (&high, &est)] {
            for (got, want) in band_energies(&out, edges).iter().zip(band_energies(donor, edges)) {
                let rel = (got / want - 1.0).abs();
                worst = worst.max(rel);
                check(rel < 0.01, format!("band energy off by {:.2}% at cutoff {cutoff}", 100.0 * rel))?;
            }
        }
    }
    Ok(format!("mel bands bit-exact, worst band energy error {:.3}%", 100.0 * worst))
}

// ---------------------------------------------------------------- 8

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let corpus = synth_corpus(500, 0);
    let (train, held) = corpus.split_at(450);
    let cfg = SpectralConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut hi_mels = Vec::new();
    let mut lo_mels = Vec::new();
    for clip in train {
        let (spec, _) = bandlift::bandwidth::draw_stable_kernel(&mut rng, 48_000).unwrap();
        let (observed, _) = observe(clip, &spec).unwrap();
        lo_mels.push(wav_to_logmel(&observed, &cfg).unwrap());
        hi_mels.push(wav_to_logmel(clip, &cfg).unwrap());
    }
    let trained = train_codec(
        &hi_mels,
        CodecTrainConfig {
            seed: 2,
            ..CodecTrainConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let codec_time = start.elapsed();
    let codec = trained.codec;
    let mut enc_rng = ChaCha8Rng::seed_from_u64(0);
    let pairs: Vec<LatentPair> = hi_mels
        .iter()
        .zip(&lo_mels)
        .map(|(h, l)| LatentPair {
            target: codec.encode(h, false, &mut enc_rng).unwrap(),
            cond: codec.encode(l, false, &mut enc_rng).unwrap(),
        })
        .collect();
    let dcfg = DiffusionTrainConfig {
        steps: 1000,
        lr: 1e-3,
        hidden: 64,
        seed: 3,
        ..DiffusionTrainConfig::default()
    };
    let mut trainer = DiffusionTrainer::new(&pairs, dcfg).map_err(|e| e.to_string())?;
    for _ in 0..dcfg.steps {
        trainer.step().map_err(|e| e.to_string())?;
    }
    let ldm_time = start.elapsed() - codec_time;
    let ldm = trainer.model;
    let vocoder = GriffinLim::default();
    let models = Models {
        codec: &codec,
        ldm: &ldm,
        vocoder: &vocoder,
    };
    let spec4 = FilterSpec::new(FilterFamily::Chebyshev1, 8, 4000.0);
    let (mut unprocessed, mut system) = (0.0, 0.0);
    for (i, clip) in held.iter().enumerate() {
        let lo = degrade(clip, &spec4).unwrap();
        unprocessed += lsd(clip, &resample_cubic(&lo, 48_000).unwrap()).unwrap();
        let sampler = SamplerConfig {
            seed: i as u64,
            ..SamplerConfig::default()
        };
        system += lsd(clip, &upsample(&lo, &models, &sampler).map_err(|e| e.to_string())?.audio).unwrap();
    }
    let n = held.len() as f64;
    let (unprocessed, system) = (unprocessed / n, system / n);
    let mut baseline = Vec::new();
    for cutoff in [4000.0, 8000.0, 16_000.0] {
        let spec = FilterSpec::new(FilterFamily::Chebyshev1, 8, cutoff);
        let total: f64 = held
            .iter()
            .map(|clip| lsd(clip, &resample_cubic(&degrade(clip, &spec).unwrap(), 48_000).unwrap()).unwrap())
            .sum();
        baseline.push(total / n);
    }
    let summary = format!(
        "system {system:.3} vs unprocessed {unprocessed:.3} (ratio {:.3}); baseline 4/8/16k {:.3}/{:.3}/{:.3}; codec {codec_time:.0?}, ldm {ldm_time:.0?}",
        system / unprocessed,
        baseline[0],
        baseline[1],
        baseline[2]
    );
    check(system <= 0.8 * unprocessed, summary.clone())?;
    check(baseline[0] > baseline[1] && baseline[1] > baseline[2], summary.clone())?;
    check(codec_time < Duration::from_secs(600), format!("codec training {codec_time:?}"))?;
    check(ldm_time < Duration::from_secs(3600), format!("ldm training {ldm_time:?}"))?;
    Ok(summary)
}

// ---------------------------------------------------------------- 9

const TINY: &str = r#"
seed = 11
[codec]
steps = 20
batch = 32
hidden = 8
[ldm]
steps = 10
batch = 2
crop = 4
hidden = 8
emb_dim = 4
diffusion_steps = 100
lr = 0.001
[sampler]
ddim_steps = 5
[train]
log_interval = 5
checkpoint_interval = 5
[vocoder]
griffin_lim_iters = 4
"#;

fn bandlift(args: &[&Path]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_bandlift"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    check(
        out.status.success(),
        format!("bandlift {:?}: {}", args, String::from_utf8_lossy(&out.stderr)),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name);
    std::fs::create_dir(p("clean")).unwrap();
    for i in 0..4u64 {
        let kind = if i % 2 == 0 { ClipKind::Harmonic } else { ClipKind::NoiseBurst };
        write_wav(&synth_clip(kind, 0.5, 300 + i), p("clean").join(format!("c{i}.wav")), WavEncoding::Pcm16).unwrap();
    }
    std::fs::write(p("tiny.toml"), TINY).unwrap();
    let a = Path::new;
    for m in ["a.jsonl", "b.jsonl"] {
        bandlift(&[a("simulate"), a("--in-dir"), &p("clean"), a("--out"), &p(m), a("--config"), &p("tiny.toml")])?;
    }
    let (ma, mb) = (std::fs::read(p("a.jsonl")).unwrap(), std::fs::read(p("b.jsonl")).unwrap());
    check(!ma.is_empty() && ma == mb, "simulate manifests differ")?;
    bandlift(&[
        a("train"), a("codec"), a("--manifest"), &p("a.jsonl"), a("--out"), &p("codec.bin"), a("--config"), &p("tiny.toml"),
    ])?;
    bandlift(&[
        a("train"), a("ldm"), a("--manifest"), &p("a.jsonl"), a("--out"), &p("ldm.bin"), a("--codec"), &p("codec.bin"),
        a("--config"), &p("tiny.toml"),
    ])?;
    let narrow = degrade(&synth_clip(ClipKind::Harmonic, 0.5, 400), &FilterSpec::new(FilterFamily::Chebyshev1, 8, 4000.0))
        .unwrap();
    write_wav(&narrow, p("in.wav"), WavEncoding::Pcm16).unwrap();
    for out in ["o1.wav", "o2.wav"] {
        bandlift(&[
            a("upsample"), a("--in"), &p("in.wav"), a("--out"), &p(out), a("--codec"), &p("codec.bin"), a("--ldm"),
            &p("ldm.bin"), a("--seed"), a("9"), a("--config"), &p("tiny.toml"),
        ])?;
    }
    let (wa, wb) = (std::fs::read(p("o1.wav")).unwrap(), std::fs::read(p("o2.wav")).unwrap());
    check(!wa.is_empty() && wa == wb, "upsample outputs differ")?;
    Ok(format!("manifest {} bytes, wav {} bytes identical", ma.len(), wa.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("lsd matches direct-DFT oracle", lsd_oracle),
        ("filter designs stable and on spec", filter_suite),
        ("roll-off estimate tracks cutoff", rolloff_estimator),
        ("schedule and velocity identities", schedule_identities),
        ("DDIM reproduces Gaussian data", ddim_gaussian),
        ("analytic gradients match finite differences", gradient_checks),
        ("low-band replacement exact", replacement),
        ("toy end-to-end beats cubic baseline", end_to_end),
        ("CLI outputs deterministic", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[{}] PASS  {name} ({secs:.1} s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("[{}] FAIL  {name} ({secs:.1} s): {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
