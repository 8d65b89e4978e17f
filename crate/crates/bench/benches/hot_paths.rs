use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mdrg_core::codec::{Codebook, CodecConfig, LatentGrid, VqModel};
use mdrg_core::data::ShapeSpec;
use mdrg_core::seq::{DecodeOptions, SeqModelConfig, SeqParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn quantize(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("quantize");
    for k in [64usize, 512] {
        let book = Codebook::<f32>::init(k, 16, &mut rng);
        let data = (0..16 * 16).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let z = LatentGrid::new(4, 4, 16, data).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(k), &z, |b, z| b.iter(|| book.quantize(black_box(z)).unwrap()));
    }
    group.finish();
}

fn codec_round_trip(c: &mut Criterion) {
    let model = VqModel::<f32>::init(CodecConfig::default(), 0).unwrap();
    let img = ShapeSpec::all()[5].render(model.config.height);
    c.bench_function("codec_encode_decode", |b| {
        b.iter(|| {
            let z = model.encode(black_box(&img)).unwrap();
            let (zq, _) = model.quantize(&z).unwrap();
            model.decode(&zq).unwrap()
        })
    });
}

fn seq_model() -> SeqParams<f32> {
    SeqParams::init(
        SeqModelConfig {
            vocab_size: 512,
            layers: 2,
            heads: 4,
            hidden: 64,
            max_len: 96,
        },
        0,
    )
    .unwrap()
}

fn seq_forward(c: &mut Criterion) {
    let p = seq_model();
    let tokens: Vec<u32> = (0..96).map(|i| (i * 7 % 500 + 4) as u32).collect();
    c.bench_function("seq_forward_96", |b| b.iter(|| p.logits(black_box(&tokens)).unwrap()));
    let mask = vec![true; tokens.len()];
    c.bench_function("seq_backward_96", |b| b.iter(|| p.backward(black_box(&tokens), &mask).unwrap()));
}

fn beam_decode(c: &mut Criterion) {
    let p = seq_model();
    let prefix: Vec<u32> = (0..40).map(|i| (i * 13 % 500 + 4) as u32).collect();
    let mut group = c.benchmark_group("beam_decode_40");
    for beam in [1usize, 5] {
        let opts = DecodeOptions {
            beam,
            stop_id: 2,
            max_new: 40,
            blocked: Vec::new(),
        };
        group.bench_with_input(BenchmarkId::from_parameter(beam), &opts, |b, o| {
            b.iter(|| p.decode(black_box(&prefix), o).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, quantize, codec_round_trip, seq_forward, beam_decode);
criterion_main!(benches);
