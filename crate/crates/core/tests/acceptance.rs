//! The acceptance suite. Each test prints one PASS/FAIL line.
//!
//! Run with `cargo test -p mdrg-core --test acceptance -- --nocapture`.

mod common;

use std::time::{Duration, Instant};

use common::*;
use mdrg_core::agent::RespondOptions;
use mdrg_core::data::{generate_synthetic, MultimodalDialogue, SyntheticWorldConfig};
use mdrg_core::eval::{self, bleu, fid, inception_score, intent_f1, rouge_l, token_f1};
use mdrg_core::generator::{build_target, generate_response, parse_segments, GenerateOptions};
use mdrg_core::codec::CodecTrainConfig;
use mdrg_core::optim::Adam;
use mdrg_core::pipeline::{
    corpus_text, joint_finetune_step, joint_gradients, joint_item, pair_stream, run_all, run_stage, JointItem, LogRecord,
    RunOptions, RunState, Stage, TrainingConfig,
};
use mdrg_core::seq::{SeqExample, SeqParams};
use mdrg_core::tensor::ParamSet;
use mdrg_core::tokenizer::{Vocab, DST};

#[test]
fn quantizer_oracle() {
    let _g = timed_lock();
    verdict("quantizer oracle", check_quantizer_oracle(1000));
}

#[test]
fn quantizer_round_trip() {
    verdict("indices-to-codes round trip", check_round_trip(100));
}

#[test]
fn gradient_checks() {
    let _g = timed_lock();
    verdict("gradient checks", check_gradients());
}

#[test]
fn normalization_and_causality() {
    verdict("normalization/causality", check_normalization_causality(40));
}

#[test]
fn metric_identities() {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let mut fails = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            fails.push(name.to_string());
        }
    };

    let a: Vec<Vec<f64>> = (0..30)
        .map(|i| (0..3).map(|j| ((i * 7 + j * 3) as f64).sin()).collect())
        .collect();
    check("fid(A,A)", fid(&a, &a).unwrap() < 1e-6);
    // four points with identity covariance, shifted by a length-2 vector
    let r = 1.5f64.sqrt();
    let x = vec![vec![r, 0.0], vec![-r, 0.0], vec![0.0, r], vec![0.0, -r]];
    let y: Vec<Vec<f64>> = x.iter().map(|p| vec![p[0] + 2.0f64.sqrt(), p[1] + 2.0f64.sqrt()]).collect();
    check("fid shift", (fid(&x, &y).unwrap() - 4.0).abs() < 1e-6);

    let uniform = vec![vec![0.1; 10]; 50];
    check("IS uniform", (inception_score(&uniform, 10).unwrap().0 - 1.0).abs() < 1e-6);
    let onehot: Vec<Vec<f64>> = (0..40).map(|i| (0..4).map(|c| f64::from(c == i % 4)).collect()).collect();
    check("IS one-hot", (inception_score(&onehot, 10).unwrap().0 - 4.0).abs() < 1e-6);

    let corpus = s(&["the red circle", "a big blue square on the desk", "yes"]);
    check("BLEU-1 identical", bleu(&corpus, &corpus, 1).unwrap() == 1.0);
    check("BLEU-2 identical", bleu(&corpus, &corpus, 2).unwrap() == 1.0);
    check("ROUGE-L identical", rouge_l(&corpus, &corpus).unwrap() == 1.0);
    check("F1 identical", token_f1(&corpus, &corpus).unwrap() == 1.0);

    let p = SeqParams::<f32>::init(seq_micro(), 1).unwrap();
    let ex = vec![
        SeqExample {
            tokens: vec![1, 2, 3, 4],
            mask: vec![false, true, true, true],
        },
        SeqExample {
            tokens: vec![5, 6, 7],
            mask: vec![false, false, true],
        },
    ];
    let loss = p.batch_nll(&ex).unwrap();
    check("PPL = exp(loss)", eval::ppl(&p, &ex).unwrap() == loss.exp());

    check("BLEU-1 hand case", bleu(&s(&["a b c"]), &s(&["a b d"]), 1).unwrap() == 2.0 / 3.0);
    check("ROUGE-L hand case", (rouge_l(&s(&["a b c"]), &s(&["a c"])).unwrap() - 0.8).abs() < 1e-15);
    let intent = intent_f1(&[true, true, true, false], &[true, false, true, false]).unwrap();
    check("intent F1 hand case", (intent.f1 - 0.8).abs() < 1e-15);

    verdict(
        "metric identities",
        Outcome::new(fails.is_empty(), format!("14 identities, failing: {fails:?}")),
    );
}

fn tiny_state() -> (RunState, mdrg_core::data::Corpora) {
    let corpora = tiny_corpora();
    let cfg = tiny_config();
    let vocab = Vocab::train(corpus_text(&corpora), cfg.vocab_size).unwrap();
    (RunState::new(cfg, vocab).unwrap(), corpora)
}

fn image_items(state: &RunState, dialogues: &[MultimodalDialogue], n: usize) -> Vec<JointItem> {
    let layout = state.layout();
    let window = state.config.window();
    dialogues
        .iter()
        .filter(|d| d.response.has_image())
        .take(n)
        .map(|d| joint_item(d, &state.vocab, &state.codec, &layout, window).unwrap())
        .collect()
}

#[test]
fn lambda_routing() {
    let (mut state, corpora) = tiny_state();
    let mut items = image_items(&state, &corpora.dialogues.train, 3);
    items.extend(
        corpora
            .dialogues
            .train
            .iter()
            .filter(|d| !d.response.has_image())
            .take(2)
            .map(|d| joint_item(d, &state.vocab, &state.codec, &state.layout(), state.config.window()).unwrap()),
    );

    // lambda = 0: translator untouched, generator moves
    state.config.lambda = 0.0;
    let f_before = state.translator.to_bytes();
    let g_before = state.generator.to_bytes();
    for _ in 0..3 {
        joint_finetune_step(&mut state, &items).unwrap();
    }
    let frozen_f = state.translator.to_bytes() == f_before && state.f_opt.step == 0;
    let moved_g = state.generator.to_bytes() != g_before;

    // translator gradient is linear in lambda (64-bit micro models)
    let mut g64 = SeqParams::<f64>::init(state.generator.config.clone(), 1).unwrap();
    let mut f64p = SeqParams::<f64>::init(state.translator.config.clone(), 2).unwrap();
    to_f64(&state.generator, &mut g64);
    to_f64(&state.translator, &mut f64p);
    let (_, _, unit) = joint_gradients(&g64, &f64p, &items, 1.0).unwrap();
    let mut worst = 0.0f64;
    for lambda in [0.05, 0.2, 0.7, 3.0] {
        let (_, _, fg) = joint_gradients(&g64, &f64p, &items, lambda).unwrap();
        let mut want = unit.clone();
        want.scale(lambda);
        for ((_, a), (_, b)) in fg.named().into_iter().zip(want.named()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    let (_, _, zero) = joint_gradients(&g64, &f64p, &items, 0.0).unwrap();
    let zero_ok = max_abs(&zero) == 0.0;

    // the codec is bit-identical across the whole joint stage
    let (mut state, corpora) = tiny_state();
    run_stage(&mut state, Stage::PretrainV, &corpora, &mut RunOptions::default()).unwrap();
    let codec_before = state.codec.to_bytes();
    run_stage(&mut state, Stage::JointFinetune, &corpora, &mut RunOptions::default()).unwrap();
    let codec_frozen = state.codec.to_bytes() == codec_before && state.progress.joint.finished;

    verdict(
        "lambda routing",
        Outcome::new(
            frozen_f && moved_g && zero_ok && worst <= 1e-6 && codec_frozen,
            format!(
                "lambda=0 translator unchanged: {frozen_f}, generator moved: {moved_g}; \
                 max |dF(lambda) - lambda*dF(1)| = {worst:.1e}; codec unchanged over joint stage: {codec_frozen}"
            ),
        ),
    );
}

fn train_until(params: &mut SeqParams<f32>, batch: &[SeqExample], target: f64, max_steps: usize, lr: f64) -> (f64, usize) {
    let mut opt = Adam::new(params);
    for step in 0..max_steps {
        let (l, g) = params.batch_loss_and_grad(batch).unwrap();
        if l < target {
            return (l, step);
        }
        opt.update(params, &g, lr).unwrap();
    }
    (params.batch_nll(batch).unwrap(), max_steps)
}

/// Smallest mean NLL any model can reach on `batch`: at each scored
/// position, the empirical next-token distribution among the examples
/// that share the prefix.
fn empirical_floor(batch: &[SeqExample]) -> f64 {
    let (mut nll, mut n) = (0.0, 0usize);
    for e in batch {
        for t in (1..e.tokens.len()).filter(|&t| e.mask[t]) {
            let pre = &e.tokens[..t];
            let same: Vec<_> = batch.iter().filter(|o| o.tokens.len() > t && &o.tokens[..t] == pre).collect();
            let hit = same.iter().filter(|o| o.tokens[t] == e.tokens[t]).count();
            nll -= (hit as f64 / same.len() as f64).ln();
            n += 1;
        }
    }
    nll / n as f64
}

#[test]
fn overfit_suite() {
    let _g = timed_lock();
    let start = Instant::now();
    let cfg = TrainingConfig::default();
    let corpora = generate_synthetic(&SyntheticWorldConfig::default()).unwrap();
    let vocab = Vocab::train(corpus_text(&corpora), cfg.vocab_size).unwrap();
    let v = vocab.size();
    let window = cfg.window();

    // eight dialogues with distinct contexts, image-bearing and text-only
    let mut picked: Vec<&MultimodalDialogue> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for want_image in [true, false] {
        for d in corpora.dialogues.train.iter().filter(|d| d.response.has_image() == want_image) {
            let ex = window.example(&d.context, &[], &vocab).unwrap();
            if picked.iter().filter(|p| p.response.has_image() == want_image).count() < 4 && seen.insert(ex.tokens) {
                picked.push(d);
            }
        }
    }
    let g_batch: Vec<SeqExample> = picked
        .iter()
        .map(|d| window.example(&d.context, &build_target(&d.response, &vocab).unwrap().tokens, &vocab).unwrap())
        .collect();
    let mut g = SeqParams::<f32>::init(cfg.generator_config(v), 1).unwrap();
    let (g_loss, g_steps) = train_until(&mut g, &g_batch, 0.01, 800, 1e-3);

    let mut exact = 0;
    let mut segmentation = 0;
    for d in &picked {
        let target = build_target(&d.response, &vocab).unwrap();
        let out = generate_response(&g, &d.context, &vocab, &GenerateOptions::default()).unwrap();
        if out.tokens == target.tokens {
            exact += 1;
        }
        let parsed = parse_segments(&out.tokens, &vocab).unwrap();
        let gold: Vec<String> = d.response.images().map(|r| r.description.clone()).collect();
        if parsed.descriptions().map(str::to_string).collect::<Vec<_>>() == gold && !parsed.unterminated {
            segmentation += 1;
        }
    }

    // translator on eight distinct description/image pairs
    let mut pairs = Vec::new();
    let mut names = std::collections::HashSet::new();
    for p in &corpora.pairs.train {
        if names.insert(p.description.clone()) && pairs.len() < 8 {
            pairs.push(p.clone());
        }
    }
    let images: Vec<_> = pairs.iter().map(|p| p.image.clone()).collect();
    let codec = overfit_codec(&images, CodecTrainConfig::default().steps);
    let codec_mse = images
        .iter()
        .map(|i| codec.reconstruct(i).unwrap().mse(i))
        .sum::<f64>()
        / images.len() as f64;
    let layout = cfg.layout(v);
    let f_batch: Vec<SeqExample> = pairs
        .iter()
        .map(|p| pair_stream(&p.description, &p.image, &vocab, &codec, &layout).unwrap())
        .collect();
    let mut f = SeqParams::<f32>::init(cfg.translator_config(v), 2).unwrap();
    let f_floor = empirical_floor(&f_batch);
    let (f_loss, f_steps) = train_until(&mut f, &f_batch, 0.1, 3000, 1e-3);

    let t = start.elapsed();
    let n = picked.len();
    verdict(
        "overfit suite",
        Outcome::new(
            g_loss < 0.1 && f_loss < 0.1 && codec_mse < 1e-3 && exact == n && segmentation == n && t < Duration::from_secs(600),
            format!(
                "G loss {g_loss:.4} ({g_steps} steps), F loss {f_loss:.4} ({f_steps} steps, floor {f_floor:.4}), codec MSE {codec_mse:.2e}; \
                 beam-5 exact {exact}/{n}, segmentation {segmentation}/{n}; {} (limit 600s)",
                secs(t)
            ),
        ),
    );
}

#[test]
fn end_to_end_synthetic_run() {
    let _g = timed_lock();
    let start = Instant::now();
    let corpora = generate_synthetic(&SyntheticWorldConfig::default()).unwrap();
    let (state, _) = run_all(TrainingConfig::default(), &corpora, &mut RunOptions::default()).unwrap();
    let (report, _) = mdrg_core::pipeline::evaluate(&state, &corpora.dialogues.test, &RespondOptions::default()).unwrap();
    let t = start.elapsed();
    let f1 = report.intent.f1;
    let cm = report.image.class_match.unwrap_or(0.0);
    verdict(
        "end-to-end synthetic run",
        Outcome::new(
            f1 >= 0.9 && cm >= 0.7 && t < Duration::from_secs(45 * 60),
            format!(
                "intent F1 {f1:.3} (>= 0.9), class match {cm:.3} over {} images (>= 0.7), {} (limit 45 min)",
                report.image.count,
                secs(t)
            ),
        ),
    );
}

#[test]
fn pure_text_mode() {
    let cfg = TrainingConfig::default();
    let corpora = tiny_corpora();
    let vocab = Vocab::train(corpus_text(&corpora), cfg.vocab_size).unwrap();
    // an untrained generator pushed hard towards [DST]
    let mut g = SeqParams::<f32>::init(cfg.generator_config(vocab.size()), 4).unwrap();
    g.b_out.data[DST as usize] += 8.0;
    let contexts: Vec<_> = corpora.dialogues.all().map(|d| d.context.clone()).collect();
    let opts = |pure_text| GenerateOptions {
        pure_text,
        max_new: 12,
        ..GenerateOptions::default()
    };
    let mut unblocked = 0;
    for ctx in contexts.iter().take(20) {
        if generate_response(&g, ctx, &vocab, &opts(false)).unwrap().parsed.has_description() {
            unblocked += 1;
        }
    }
    let mut with_image = 0;
    let mut with_dst = 0;
    for i in 0..1000 {
        // vary the model as well as the context
        if i % 100 == 0 {
            g.b_out.data[DST as usize] += 0.5;
        }
        let out = generate_response(&g, &contexts[i % contexts.len()], &vocab, &opts(true)).unwrap();
        with_image += usize::from(out.parsed.has_description() || out.shares_image());
        with_dst += usize::from(out.tokens.contains(&DST));
    }
    verdict(
        "pure-text mode",
        Outcome::new(
            with_image == 0 && with_dst == 0 && unblocked > 0,
            format!("{with_image}/1000 responses with a description ({with_dst} with [DST]); unblocked control: {unblocked}/20"),
        ),
    );
}

fn collect_log(state: &mut RunState, corpora: &mdrg_core::data::Corpora, stop_at: Option<u64>) -> Vec<LogRecord> {
    let mut log = Vec::new();
    let mut sink = |r: &LogRecord| log.push(r.clone());
    for stage in Stage::ALL {
        let mut opts = RunOptions {
            stop_at: stop_at.filter(|_| stage == Stage::JointFinetune),
            log: Some(&mut sink),
            ..RunOptions::default()
        };
        run_stage(state, stage, corpora, &mut opts).unwrap();
    }
    log
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let (fresh, corpora) = tiny_state();

    // uninterrupted run
    let mut full = fresh.clone();
    let full_log = collect_log(&mut full, &corpora, None);

    // same run interrupted inside the joint phase, saved, reloaded, resumed
    let mut part = fresh.clone();
    let stop = part.config.budgets.f_warm + 5;
    let mut resumed_log = collect_log(&mut part, &corpora, Some(stop));
    let path = dir.path().join("run.ckpt");
    part.save(&path).unwrap();
    let mut back = RunState::load(&path).unwrap();
    resumed_log.extend(collect_log(&mut back, &corpora, None));

    let first = std::fs::read(&path).unwrap();
    let loaded = RunState::load(&path).unwrap();
    let resaved = loaded.to_checkpoint().to_bytes();
    let byte_identical = first == resaved;

    let same_curve = full_log == resumed_log;
    let same_params = full.generator.to_bytes() == back.generator.to_bytes()
        && full.translator.to_bytes() == back.translator.to_bytes()
        && full.codec.to_bytes() == back.codec.to_bytes();
    verdict(
        "checkpoint round trip",
        Outcome::new(
            byte_identical && same_curve && same_params,
            format!(
                "save-load-save identical: {byte_identical} ({} bytes); resumed curve equal: {same_curve} \
                 ({} records); final parameters equal: {same_params}",
                first.len(),
                full_log.len()
            ),
        ),
    );
}
