//! Shared fixtures and criterion checks for the integration tests.
#![allow(dead_code)]

use std::sync::Mutex;
use std::time::{Duration, Instant};

use mdrg_core::codec::{train_codec, Codebook, CodecConfig, CodecTrainConfig, LatentGrid, VqModel};
use mdrg_core::data::{generate_synthetic, Corpora, SyntheticWorldConfig};
use mdrg_core::pipeline::{ModelSize, StageBudgets, TrainingConfig};
use mdrg_core::seq::{SeqModelConfig, SeqParams};
use mdrg_core::tensor::{gaussian, ParamSet, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Serializes timed checks so that wall-clock limits are not skewed by
/// tests running alongside.
pub static TIMED: Mutex<()> = Mutex::new(());

pub fn timed_lock() -> std::sync::MutexGuard<'static, ()> {
    TIMED.lock().unwrap_or_else(|e| e.into_inner())
}

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// Prints the one-line verdict and fails the test on a miss. Written
/// straight to the stderr handle so the line shows without `--nocapture`.
pub fn verdict(name: &str, o: Outcome) {
    use std::io::Write;
    let tag = if o.pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "[{tag}] {name}: {}", o.detail);
    assert!(o.pass, "{name}: {}", o.detail);
}

pub fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

// ---------------------------------------------------------------------
// quantizer

/// Exhaustive nearest neighbour: every distance first, then the smallest
/// index holding the minimum.
pub fn oracle_quantize(codebook: &[Vec<f32>], z: &[Vec<f32>]) -> (Vec<usize>, Vec<f32>) {
    let mut idx = Vec::new();
    let mut out = Vec::new();
    for cell in z {
        let dists: Vec<f32> = codebook
            .iter()
            .map(|e| e.iter().zip(cell).map(|(&a, &b)| (a - b) * (a - b)).sum())
            .collect();
        let min = dists.iter().copied().fold(f32::INFINITY, f32::min);
        let k = dists.iter().position(|&d| d == min).unwrap();
        idx.push(k);
        out.extend_from_slice(&codebook[k]);
    }
    (idx, out)
}

pub struct QuantInstance {
    pub entries: Vec<Vec<f32>>,
    pub cells: Vec<Vec<f32>>,
    pub h: usize,
    pub w: usize,
}

/// Random grid and codebook, with duplicated entries and cells placed
/// exactly on entries often enough to exercise ties.
pub fn quant_instance(rng: &mut ChaCha8Rng) -> QuantInstance {
    let h = rng.random_range(1..=6);
    let w = rng.random_range(1..=6);
    let d = rng.random_range(1..=8);
    let k = rng.random_range(1..=64);
    let mut entries: Vec<Vec<f32>> = (0..k)
        .map(|_| (0..d).map(|_| gaussian(rng) as f32).collect())
        .collect();
    if k > 1 && rng.random_bool(0.3) {
        let (a, b) = (rng.random_range(0..k), rng.random_range(0..k));
        entries[b] = entries[a].clone();
    }
    let cells = (0..h * w)
        .map(|_| {
            if rng.random_bool(0.2) {
                entries[rng.random_range(0..k)].clone()
            } else {
                (0..d).map(|_| gaussian(rng) as f32 * 1.5).collect()
            }
        })
        .collect();
    QuantInstance { entries, cells, h, w }
}

impl QuantInstance {
    pub fn codebook(&self) -> Codebook<f32> {
        Codebook::new(self.entries.clone()).unwrap()
    }

    pub fn grid(&self) -> LatentGrid<f32> {
        let d = self.entries[0].len();
        LatentGrid::new(self.h, self.w, d, self.cells.concat()).unwrap()
    }
}

pub fn check_quantizer_oracle(n: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = Instant::now();
    let mut mismatches = 0;
    for _ in 0..n {
        let inst = quant_instance(&mut rng);
        let (zq, s) = inst.codebook().quantize(&inst.grid()).unwrap();
        let (want_s, want_zq) = oracle_quantize(&inst.entries, &inst.cells);
        let same = s == want_s && zq.data.iter().map(|x| x.to_bits()).eq(want_zq.iter().map(|x| x.to_bits()));
        if !same {
            mismatches += 1;
        }
    }
    let t = start.elapsed();
    Outcome::new(
        mismatches == 0 && t < Duration::from_secs(10),
        format!("{n} instances, {mismatches} mismatches, {} (limit 10s)", secs(t)),
    )
}

pub fn check_round_trip(n: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut bad = 0;
    for _ in 0..n {
        let inst = quant_instance(&mut rng);
        let cb = inst.codebook();
        let z = inst.grid();
        let (zq, s) = cb.quantize(&z).unwrap();
        let back = cb.indices_to_codes(&s, z.h, z.w).unwrap();
        let bits = |g: &LatentGrid<f32>| g.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&back) != bits(&zq) || (back.h, back.w, back.dim) != (zq.h, zq.w, zq.dim) {
            bad += 1;
        }
    }
    Outcome::new(bad == 0, format!("{n} instances, {bad} not bit-exact"))
}

// ---------------------------------------------------------------------
// gradient checks

pub fn seq_micro() -> SeqModelConfig {
    SeqModelConfig {
        vocab_size: 11,
        layers: 2,
        heads: 2,
        hidden: 16,
        max_len: 8,
    }
}

pub fn codec_micro() -> CodecConfig {
    CodecConfig {
        height: 8,
        width: 8,
        grid_h: 2,
        grid_w: 2,
        codebook_size: 8,
        latent_dim: 4,
        hidden: 8,
    }
}

/// Max over coordinates of `|a - n| / max(|a|, |n|, floor)`.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Central differences of `f` over every parameter, compared with `grad`.
pub fn fd_max_rel_err<P: ParamSet<f64>>(params: &P, grad: &P, h: f64, f: impl Fn(&P) -> f64) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut n = 0;
    let names: Vec<String> = params.named().into_iter().map(|(k, _)| k).collect();
    let grads: Vec<Vec<f64>> = grad.named().into_iter().map(|(_, t)| t.data.clone()).collect();
    for (ti, _) in names.iter().enumerate() {
        let len = params.named()[ti].1.data.len();
        for i in 0..len {
            let mut p = params.clone();
            p.named_mut()[ti].1.data[i] += h;
            let up = f(&p);
            p.named_mut()[ti].1.data[i] -= 2.0 * h;
            let down = f(&p);
            let num = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(grads[ti][i], num));
            n += 1;
        }
    }
    (worst, n)
}

pub fn seq_grad_check() -> (f64, usize) {
    let p = SeqParams::<f64>::init(seq_micro(), 5).unwrap();
    let tokens = vec![0, 3, 7, 1, 10, 4, 4, 9];
    let mask = vec![false, false, true, true, false, true, true, true];
    let g = p.backward(&tokens, &mask).unwrap();
    fd_max_rel_err(&p, &g, 1e-5, |q| q.nll_loss(&tokens, &mask).unwrap())
}

pub fn random_image(size: usize, seed: u64) -> mdrg_core::image::ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..size * size * 3).map(|_| rng.random::<f32>()).collect();
    mdrg_core::image::ImageTensor::new(size, size, data).unwrap()
}

pub fn codec_grad_check() -> (f64, usize) {
    let m = VqModel::<f64>::init(codec_micro(), 3).unwrap();
    let img = random_image(8, 4);
    let beta = 0.25;
    let mut g = m.zeros_like();
    m.loss_and_grad(&img, beta, Some((&mut g, 1.0))).unwrap();
    fd_max_rel_err(&m, &g, 1e-5, |q| q.surrogate_loss(&m, &img, beta).unwrap())
}

pub fn check_gradients() -> Outcome {
    let start = Instant::now();
    let (seq_err, seq_n) = seq_grad_check();
    let (codec_err, codec_n) = codec_grad_check();
    let t = start.elapsed();
    Outcome::new(
        seq_err < 1e-3 && codec_err < 1e-3 && t < Duration::from_secs(60),
        format!(
            "seq max rel err {seq_err:.2e} over {seq_n} params, codec {codec_err:.2e} over {codec_n}, {} (limit 60s)",
            secs(t)
        ),
    )
}

// ---------------------------------------------------------------------
// normalization and causality

pub fn check_normalization_causality(cases: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst_sum = 0.0f64;
    let mut leaks = 0;
    let mut dists = 0;
    for c in 0..cases {
        let cfg = SeqModelConfig {
            vocab_size: rng.random_range(5..60),
            layers: rng.random_range(1..3),
            heads: 2,
            hidden: 8 * rng.random_range(1..4),
            max_len: 24,
        };
        let p = SeqParams::<f32>::init(cfg.clone(), c as u64).unwrap();
        let len = rng.random_range(2..=cfg.max_len);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
        let base = p.forward(&tokens).unwrap();
        for d in &base {
            worst_sum = worst_sum.max((d.sum() - 1.0).abs());
            dists += 1;
        }
        let j = rng.random_range(1..len);
        let mut perturbed = tokens.clone();
        perturbed[j] = (perturbed[j] + 1) % cfg.vocab_size as u32;
        let after = p.forward(&perturbed).unwrap();
        for i in 0..j {
            let a: Vec<u64> = base[i].probs.iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = after[i].probs.iter().map(|x| x.to_bits()).collect();
            if a != b {
                leaks += 1;
            }
        }
    }
    Outcome::new(
        worst_sum <= 1e-6 && leaks == 0,
        format!("{dists} distributions, max |sum-1| {worst_sum:.1e}, {leaks} past positions changed by a future edit"),
    )
}

// ---------------------------------------------------------------------
// small pipeline fixtures

pub fn tiny_size() -> ModelSize {
    ModelSize {
        layers: 1,
        heads: 2,
        hidden: 16,
    }
}

/// A configuration small enough for second-scale stage runs.
pub fn tiny_config() -> TrainingConfig {
    TrainingConfig {
        vocab_size: 300,
        generator: tiny_size(),
        translator: tiny_size(),
        generator_max_len: 64,
        max_response: 24,
        max_description: 16,
        codec: CodecConfig {
            height: 16,
            width: 16,
            grid_h: 2,
            grid_w: 2,
            codebook_size: 16,
            latent_dim: 4,
            hidden: 16,
        },
        codec_train: CodecTrainConfig {
            steps: 30,
            ..CodecTrainConfig::default()
        },
        scorer: mdrg_core::scorer::DualEncoderConfig {
            steps: 20,
            ..Default::default()
        },
        classifier: mdrg_core::classifier::ClassifierConfig {
            steps: 20,
            ..Default::default()
        },
        budgets: StageBudgets {
            pretrain_g: 12,
            pretrain_f: 12,
            f_warm: 6,
            joint: 12,
        },
        batch_size: 4,
        eval_every: 4,
        max_val_examples: 8,
        ..TrainingConfig::default()
    }
}

pub fn tiny_corpora() -> Corpora {
    generate_synthetic(&SyntheticWorldConfig {
        seed: 3,
        n_dialogues: 60,
        n_text_dialogues: 60,
        n_pairs: 48,
        image_size: 16,
    })
    .unwrap()
}

/// Codec trained for `steps` full-batch steps on `images`.
pub fn overfit_codec(images: &[mdrg_core::image::ImageTensor], steps: usize) -> VqModel<f32> {
    train_codec(
        images,
        CodecConfig::default(),
        &CodecTrainConfig {
            steps,
            batch_size: images.len(),
            ..CodecTrainConfig::default()
        },
        |_, _| {},
    )
    .unwrap()
}

pub fn to_f64<P: ParamSet<f32>, Q: ParamSet<f64>>(src: &P, dst: &mut Q) {
    for ((_, a), (_, b)) in src.named().into_iter().zip(dst.named_mut()) {
        b.data = a.data.iter().map(|&x| x as f64).collect();
    }
}

pub fn max_abs<T: Scalar, P: ParamSet<T>>(p: &P) -> f64 {
    p.named()
        .iter()
        .flat_map(|(_, t)| t.data.iter().map(|x| x.to_f64_lossy().abs()))
        .fold(0.0, f64::max)
}
