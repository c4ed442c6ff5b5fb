use std::hint::black_box;

use bandlift::bandwidth::{apply_filter, design_lowpass, FilterFamily, FilterSpec};
use bandlift::diffusion::SamplerConfig;
use bandlift::eval::lsd;
use bandlift::spectral::{istft, stft, wav_to_logmel, SpectralConfig};
use bandlift::resample_cubic;
use bandlift_bench::{clip, ldm, narrowband_clip};
use criterion::{criterion_group, criterion_main, Criterion};
use rand_chacha::rand_core::SeedableRng;

fn spectral(c: &mut Criterion) {
    let x = clip();
    let cfg = SpectralConfig::default();
    c.bench_function("stft_1s", |b| b.iter(|| stft(black_box(&x), &cfg).unwrap()));
    let spec = stft(&x, &cfg).unwrap();
    c.bench_function("istft_1s", |b| b.iter(|| istft(black_box(&spec)).unwrap()));
    c.bench_function("logmel_1s", |b| b.iter(|| wav_to_logmel(black_box(&x), &cfg).unwrap()));
}

fn filters(c: &mut Criterion) {
    let x = clip();
    for family in FilterFamily::ALL {
        let spec = FilterSpec::new(family, 8, 6000.0);
        c.bench_function(&format!("design_{}", family.name()), |b| {
            b.iter(|| design_lowpass(black_box(&spec), 48_000).unwrap())
        });
        let kernel = design_lowpass(&spec, 48_000).unwrap();
        c.bench_function(&format!("filter_1s_{}", family.name()), |b| {
            b.iter(|| apply_filter(black_box(&x), &kernel))
        });
    }
    let lo = narrowband_clip();
    c.bench_function("resample_8k_to_48k", |b| b.iter(|| resample_cubic(black_box(&lo), 48_000).unwrap()));
}

fn sampling(c: &mut Criterion) {
    let (model, cond) = ldm();
    let cfg = SamplerConfig {
        ddim_steps: 10,
        ..SamplerConfig::default()
    };
    let mut group = c.benchmark_group("ddim");
    group.sample_size(10);
    group.bench_function("10_steps_guided_1s", |b| {
        b.iter(|| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
            model.sample(black_box(&cond), &cfg, &mut rng).unwrap()
        })
    });
    group.finish();
}

fn metric(c: &mut Criterion) {
    let x = clip();
    let y = resample_cubic(&narrowband_clip(), 48_000).unwrap();
    c.bench_function("lsd_1s", |b| b.iter(|| lsd(black_box(&x), black_box(&y)).unwrap()));
}

criterion_group!(benches, spectral, filters, sampling, metric);
criterion_main!(benches);
