use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use tgm_core::decoder::{DecoderKind, DecoderParams, DecoderShape};
use tgm_core::inference::{beam_search, DecodeOptions};
use tgm_core::topic_mining::{kernel_kmeans, KMeansParams, KernelMatrix};

fn decoder(kind: DecoderKind) -> DecoderParams {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    DecoderParams::new(
        &DecoderShape {
            kind,
            vocab_size: 200,
            hidden: 32,
            feature_dim: 32,
            factors: 32,
            topics: 5,
            factorize_recurrent: true,
        },
        &mut rng,
    )
    .unwrap()
}

fn features(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn decoder_step(c: &mut Criterion) {
    let z = [0.1, 0.2, 0.3, 0.25, 0.15];
    let x = features(1, 32);
    for kind in [DecoderKind::Vanilla, DecoderKind::Tgm] {
        let p = decoder(kind);
        let cond = p.condition(Some(&z)).unwrap();
        let s0 = p.init_state(&x).unwrap();
        c.bench_function(&format!("step/{kind:?}"), |b| {
            b.iter(|| p.step(black_box(&s0), 7, &cond, None).unwrap())
        });
    }
}

fn beam(c: &mut Criterion) {
    let p = decoder(DecoderKind::Tgm);
    let z = [0.1, 0.2, 0.3, 0.25, 0.15];
    let x = features(2, 32);
    let cond = p.condition(Some(&z)).unwrap();
    for width in [1, 5] {
        let opts = DecodeOptions {
            beam_width: width,
            max_len: 20,
            length_normalize: false,
        };
        c.bench_function(&format!("beam/width-{width}"), |b| {
            b.iter(|| beam_search(&p, black_box(&x), &cond, &opts).unwrap())
        });
    }
}

fn kmeans(c: &mut Criterion) {
    let n = 200;
    let points: Vec<Vec<f64>> = (0..n).map(|i| features(100 + i as u64, 16)).collect();
    let kernel = KernelMatrix::from_fn(n, |i, j| {
        let dot: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| a * b).sum();
        let ni: f64 = points[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        let nj: f64 = points[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (ni * nj)
    });
    let params = KMeansParams {
        k: 5,
        restarts: 10,
        max_iters: 100,
        seed: 0,
    };
    c.bench_function("kernel-kmeans/200x5", |b| {
        b.iter(|| kernel_kmeans(black_box(&kernel), &params).unwrap())
    });
}

criterion_group!(benches, decoder_step, beam, kmeans);
criterion_main!(benches);
