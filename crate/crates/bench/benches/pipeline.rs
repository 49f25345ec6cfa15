//! Criterion benchmarks for the hot paths: convolution, quantization, the
//! autoregressive sampling step, and the DSP front end.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use svqa_core::array::Array;
use svqa_core::dsp::{self, MelFilterbank, Waveform};
use svqa_core::nn::NetCtx;
use svqa_core::optim::ParamStore;
use svqa_core::prior::{self, PriorCfg, SamplerConfig};
use svqa_core::specvqgan;
use svqa_core::tape::Tape;
use svqa_core::{Config, Rng};

fn tiny_config() -> Config {
    Config {
        clip_seconds: 1.024,
        mel_bands: 16,
        codebook_size: 32,
        latent_dim: 8,
        conv_channels: 8,
        prior_layers: 2,
        prior_width: 64,
        prior_heads: 4,
        top_k: 8,
        ..Config::default()
    }
}

fn bench_conv2d(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let x = Array::uniform(&[4, 8, 16, 64], -1.0, 1.0, &mut rng);
    let w = Array::uniform(&[16, 8, 4, 4], -0.2, 0.2, &mut rng);
    let b = Array::uniform(&[16], -0.1, 0.1, &mut rng);
    c.bench_function("conv2d forward 4x8x16x64", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let wn = tape.constant(w.clone());
            let bn = tape.constant(b.clone());
            let y = tape.conv2d(xn, wn, bn, 2, 1);
            black_box(tape.value(y).data[0])
        })
    });
}

fn bench_quantize(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    let entries = Array::uniform(&[128, 32], -1.0, 1.0, &mut rng);
    let flat = Array::uniform(&[256, 32], -1.0, 1.0, &mut rng);
    c.bench_function("quantize 256 cells x 128 codes", |bench| {
        bench.iter(|| black_box(specvqgan::quantize(&flat, &entries).unwrap()))
    });
}

fn bench_vq_roundtrip(c: &mut Criterion) {
    let cfg = tiny_config();
    let mut store = ParamStore::new();
    let mut rng = Rng::new(3);
    specvqgan::init_vq_model(&mut store, &cfg, &mut rng);
    let mel = Array::uniform(&[cfg.mel_bands, cfg.frames()], -1.0, 1.0, &mut rng);
    c.bench_function("vq encode-decode one clip", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let x = tape.constant(mel.reshaped(vec![1, 1, cfg.mel_bands, cfg.frames()]));
            let mut ctx = NetCtx::frozen(&mut tape, &store);
            let fwd = specvqgan::vq_forward(&mut ctx, &cfg, x).unwrap();
            black_box(tape.value(fwd.recon).data[0])
        })
    });
}

fn bench_sampling_step(c: &mut Criterion) {
    let cfg = tiny_config();
    let pcfg = PriorCfg::from_config(&cfg);
    let mut store = ParamStore::new();
    let mut rng = Rng::new(4);
    prior::init_prior(&mut store, &pcfg, &mut rng);
    let feat = Array::uniform(&[1, pcfg.dim], -0.5, 0.5, &mut rng);
    let sampler = SamplerConfig { top_k: cfg.top_k, temperature: 1.0, seed: 7 };
    c.bench_function("prior sample full sequence", |bench| {
        bench.iter(|| black_box(prior::sample_sequence(&store, &pcfg, &feat, &sampler).len()))
    });
}

fn bench_stft_mel(c: &mut Criterion) {
    let cfg = tiny_config();
    let fb = MelFilterbank::new(cfg.mel_bands, cfg.n_fft, cfg.sample_rate).unwrap();
    let mut rng = Rng::new(5);
    let samples: Vec<f64> = (0..cfg.clip_samples()).map(|_| rng.uniform_in(-0.5, 0.5)).collect();
    let w = Waveform { samples, sample_rate: cfg.sample_rate };
    c.bench_function("stft + mel one clip", |bench| {
        bench.iter(|| black_box(dsp::mel_of_config(&cfg, &w, &fb).unwrap().values.data[0]))
    });
}

criterion_group!(
    benches,
    bench_conv2d,
    bench_quantize,
    bench_vq_roundtrip,
    bench_sampling_step,
    bench_stft_mel
);
criterion_main!(benches);
