use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use mdrg_core::agent::{ResponseSegment, RespondOptions};
use mdrg_core::data::{attach_pixels, generate_synthetic_for, load_contexts, load_photochat_format, Corpora};
use mdrg_core::eval::MetricsReport;
use mdrg_core::pipeline::{
    attach_class_match, corpus_text, evaluate, prediction_from_dialogue, run_stage, score_predictions, text_report,
    write_predictions, LogRecord, PhaseProgress, RunOptions, RunState, Stage, StageReport,
};
use mdrg_core::tokenizer::Vocab;
use serde_json::json;

use crate::config::{CliConfig, Home};
use crate::{Command, Common, RespondArgs, TrainArgs};

pub fn dispatch(common: &Common, command: Command, out: &mut dyn Write) -> Result<()> {
    let mut cfg = CliConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.synthetic.seed = seed;
        cfg.training.seed = seed;
    }
    let home = cfg.home(common.home.as_deref());
    match command {
        Command::SynthData {
            out: dir,
            n_dialogues,
            n_text_dialogues,
            n_pairs,
        } => {
            let s = &mut cfg.synthetic;
            s.n_dialogues = n_dialogues.unwrap_or(s.n_dialogues);
            s.n_text_dialogues = n_text_dialogues.unwrap_or(s.n_text_dialogues);
            s.n_pairs = n_pairs.unwrap_or(s.n_pairs);
            synth_data(&cfg, &dir.unwrap_or_else(|| home.data()), out)
        }
        Command::TokenizerTrain { data, vocab_size, out: path } => {
            let corpora = read_corpora(&data.unwrap_or_else(|| home.data()))?;
            let size = vocab_size.unwrap_or(cfg.training.vocab_size);
            let vocab = Vocab::train(corpus_text(&corpora), size)?;
            let path = path.unwrap_or_else(|| home.vocab());
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            vocab.save(&path)?;
            writeln!(out, "{}", json!({"vocab": path, "size": vocab.size()}))?;
            Ok(())
        }
        Command::CodecTrain { train } => {
            if let Some(n) = train.steps {
                cfg.training.codec_train.steps = n as usize;
            }
            if let Some(lr) = train.lr {
                cfg.training.codec_train.lr = lr;
            }
            if let Some(b) = train.batch_size {
                cfg.training.codec_train.batch_size = b;
            }
            train_stage(&cfg, &home, Stage::PretrainV, &TrainArgs { steps: None, lr: None, batch_size: None, ..train }, out)
        }
        Command::PretrainG { train } => {
            if let Some(n) = train.steps {
                cfg.training.budgets.pretrain_g = n;
            }
            train_stage(&cfg, &home, Stage::PretrainG, &train, out)
        }
        Command::PretrainF { train } => {
            if let Some(n) = train.steps {
                cfg.training.budgets.pretrain_f = n;
            }
            train_stage(&cfg, &home, Stage::PretrainF, &train, out)
        }
        Command::Finetune {
            train,
            lambda,
            warm_steps,
        } => {
            if let Some(n) = train.steps {
                cfg.training.budgets.joint = n;
            }
            if let Some(n) = warm_steps {
                cfg.training.budgets.f_warm = n;
            }
            if let Some(l) = lambda {
                cfg.training.lambda = l;
            }
            train_stage(&cfg, &home, Stage::JointFinetune, &train, out)
        }
        Command::Eval {
            pred,
            gold,
            limit,
            respond,
        } => match (pred, gold) {
            (Some(p), Some(g)) => eval_files(&home, &p, &g, out),
            _ => eval_model(&home, limit, &respond_options(&respond, common.seed), out),
        },
        Command::Generate {
            context_file,
            out: dir,
            respond,
        } => generate(
            &home,
            &context_file,
            &dir.unwrap_or_else(|| home.generated()),
            &respond_options(&respond, common.seed),
            out,
        ),
        Command::Serve { port, host, ui_dir } => crate::server::serve(&home, &host, port, ui_dir),
    }
}

pub fn respond_options(args: &RespondArgs, seed: Option<u64>) -> RespondOptions {
    let d = RespondOptions::default();
    RespondOptions {
        pure_text: args.pure_text,
        beam: args.beam.unwrap_or(d.beam),
        n_samples: args.n_samples.unwrap_or(d.n_samples),
        temperature: args.temperature.unwrap_or(d.temperature),
        seed: seed.unwrap_or(d.seed),
        max_new: d.max_new,
    }
}

fn synth_data(cfg: &CliConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let corpora = generate_synthetic_for(&cfg.synthetic, cfg.training.codec.height)?;
    corpora.write(dir)?;
    writeln!(
        out,
        "{}",
        json!({
            "out": dir,
            "dialogues": corpora.dialogues.all().count(),
            "text_dialogues": corpora.text_dialogues.all().count(),
            "pairs": corpora.pairs.all().count(),
        })
    )?;
    Ok(())
}

fn read_corpora(dir: &Path) -> Result<Corpora> {
    Corpora::read(dir).with_context(|| format!("reading corpora from {} (run `synth-data` first)", dir.display()))
}

fn load_vocab(home: &Home) -> Result<Vocab> {
    let path = home.vocab();
    Vocab::load(&path).with_context(|| format!("loading {} (run `tokenizer-train` first)", path.display()))
}

/// The run checkpoint when there is one, else fresh parameters. Stage
/// budgets and optimizer settings always come from `cfg`.
fn open_state(cfg: &CliConfig, home: &Home, fresh: bool) -> Result<RunState> {
    let path = home.run_checkpoint();
    if !fresh && path.exists() {
        let mut state = RunState::load_expecting(&path, &cfg.training)
            .with_context(|| format!("loading {}", path.display()))?;
        state.config = cfg.training.clone();
        return Ok(state);
    }
    Ok(RunState::new(cfg.training.clone(), load_vocab(home)?)?)
}

fn load_state(home: &Home) -> Result<RunState> {
    let path = home.run_checkpoint();
    if !path.exists() {
        bail!("no checkpoint at {} (train the model first)", path.display());
    }
    RunState::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn train_stage(cfg: &CliConfig, home: &Home, stage: Stage, train: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(lr) = train.lr {
        cfg.training.lr = lr;
    }
    if let Some(b) = train.batch_size {
        cfg.training.batch_size = b;
    }
    cfg.training.validate()?;
    let corpora = read_corpora(&home.data())?;
    let mut state = open_state(&cfg, home, train.fresh)?;
    if matches!(stage, Stage::PretrainF | Stage::JointFinetune) && !state.progress.pretrain_v.finished {
        bail!("the codec is not trained yet (run `codec-train` first)");
    }
    // a finished stage is run again from the current parameters
    let p = &mut state.progress;
    match stage {
        Stage::PretrainG if p.pretrain_g.finished => p.pretrain_g = PhaseProgress::default(),
        Stage::PretrainV if p.pretrain_v.finished => p.pretrain_v = PhaseProgress::default(),
        Stage::PretrainF if p.pretrain_f.finished => p.pretrain_f = PhaseProgress::default(),
        Stage::JointFinetune if p.joint.finished => {
            p.f_warm = PhaseProgress::default();
            p.joint = PhaseProgress::default();
        }
        _ => {}
    }
    let log_path = home.metrics_log();
    std::fs::create_dir_all(log_path.parent().expect("log dir"))?;
    let mut log_file = OpenOptions::new().create(true).append(true).open(&log_path)?;
    let mut sink = |r: &LogRecord| {
        if let Ok(line) = serde_json::to_string(r) {
            let _ = writeln!(log_file, "{line}");
        }
        if r.val_loss.is_some() {
            info!("{} step {} loss {:.4} val {:.4}", r.stage, r.step, r.loss_total, r.val_loss.unwrap_or(f64::NAN));
        }
    };
    info!("running {stage}");
    let report: StageReport = run_stage(
        &mut state,
        stage,
        &corpora,
        &mut RunOptions {
            out_dir: Some(home.checkpoints()),
            log: Some(&mut sink),
            ..RunOptions::default()
        },
    )?;
    std::fs::create_dir_all(home.checkpoints())?;
    state.save(&home.run_checkpoint())?;
    writeln!(out, "{}", serde_json::to_string(&report)?)?;
    Ok(())
}

fn load_dialogues(path: &Path) -> Result<Vec<mdrg_core::data::MultimodalDialogue>> {
    let mut ds = load_photochat_format(path).with_context(|| format!("loading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for d in &mut ds {
        if d.response.images().any(|r| r.image_path.is_some()) {
            attach_pixels(d, base)?;
        }
    }
    Ok(ds)
}

fn eval_files(home: &Home, pred: &Path, gold: &Path, out: &mut dyn Write) -> Result<()> {
    let gold = load_dialogues(gold)?;
    let by_id: std::collections::HashMap<String, _> =
        load_dialogues(pred)?.into_iter().map(|d| (d.id.clone(), d)).collect();
    let mut preds = Vec::with_capacity(gold.len());
    for g in &gold {
        let p = by_id
            .get(&g.id)
            .with_context(|| format!("no prediction for dialogue `{}`", g.id))?;
        preds.push(prediction_from_dialogue(p));
    }
    let report = match RunState::load(&home.run_checkpoint()) {
        Ok(state) => {
            if let Some(c) = &state.classifier {
                attach_class_match(&mut preds, c);
            }
            score_predictions(&state, &gold, &preds)?
        }
        Err(_) => text_report(&gold, &preds)?,
    };
    writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn eval_model(
    home: &Home,
    limit: Option<usize>,
    opts: &RespondOptions,
    out: &mut dyn Write,
) -> Result<()> {
    let state = load_state(home)?;
    let corpora = read_corpora(&home.data())?;
    let test: Vec<_> = corpora.dialogues.test.iter().take(limit.unwrap_or(usize::MAX)).cloned().collect();
    if test.is_empty() {
        bail!("the test split is empty");
    }
    let (report, preds) = evaluate(&state, &test, opts)?;
    let dir = home.eval_dir();
    write_predictions(&dir, &test, &preds)?;
    write_report(&dir, &report)?;
    writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

/// `metrics.json` and the plain-text table `metrics.txt`.
pub fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(report)?)?;
    std::fs::write(dir.join("metrics.txt"), report.to_table())?;
    eprint!("{}", report.to_table());
    Ok(())
}

fn generate(home: &Home, contexts: &Path, dir: &Path, opts: &RespondOptions, out: &mut dyn Write) -> Result<()> {
    let state = load_state(home)?;
    let agent = state.agent();
    let opts = RespondOptions {
        max_new: state.config.max_response,
        ..opts.clone()
    };
    let contexts = load_contexts(contexts).with_context(|| format!("loading {}", contexts.display()))?;
    std::fs::create_dir_all(dir)?;
    for (i, (id, ctx)) in contexts.iter().enumerate() {
        let resp = agent.respond(
            ctx,
            &RespondOptions {
                seed: opts.seed.wrapping_add(1000 * i as u64),
                ..opts.clone()
            },
        )?;
        let mut segments = Vec::new();
        let mut n = 0;
        for seg in &resp.segments {
            match seg {
                ResponseSegment::Text(t) => segments.push(json!({"kind": "text", "text": t})),
                ResponseSegment::Image(g) => {
                    let mut topk: Vec<PathBuf> = Vec::new();
                    for (k, img) in g.ranked.iter().enumerate() {
                        let p = dir.join(format!("{id}-{n}-{k}.png"));
                        img.save_png(&p)?;
                        topk.push(p);
                    }
                    segments.push(json!({
                        "kind": "image",
                        "description": g.description,
                        "image_path": topk[0],
                        "topk": topk,
                        "scores": g.scores,
                    }));
                    n += 1;
                }
            }
        }
        writeln!(out, "{}", json!({"id": id, "segments": segments}))?;
    }
    Ok(())
}
