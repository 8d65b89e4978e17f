//! Staged low-resource training: generator on text-only dialogues, codec on
//! images, translator on description/image pairs, then a joint fine-tune
//! of generator and translator with the codec frozen.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agent::{Agent, RespondOptions};
use crate::checkpoint::Checkpoint;
use crate::classifier::{ClassifierConfig, ShapeClassifier};
use crate::codec::{train_codec, CodecConfig, CodecTrainConfig, VqModel};
use crate::data::{Corpora, DialogueContext, MultimodalDialogue, Segment, ShapeSpec, TextDialogue, Utterance};
use crate::error::{Error, Result};
use crate::eval::{self, ImageScores, MetricsReport, TextScores, DEFAULT_IS_SPLITS};
use crate::generator::{build_target, flatten_context, g_example, text_target, SpanKind};
use crate::image::ImageTensor;
use crate::optim::{clip_grad_norm, Adam};
use crate::scorer::{DualEncoder, DualEncoderConfig, MatchScorer, PrototypeScorer};
use crate::seq::{SeqExample, SeqModelConfig, SeqParams};
use crate::tensor::{ParamSet, Scalar};
use crate::tokenizer::{TokenId, Vocab, DEFAULT_VOCAB_SIZE};
use crate::translator::{description_tokens, JointStream, StreamLayout, DEFAULT_MAX_DESCRIPTION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainG,
    PretrainV,
    PretrainF,
    JointFinetune,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::PretrainG, Stage::PretrainV, Stage::PretrainF, Stage::JointFinetune];

    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainG => "pretrain_g",
            Stage::PretrainV => "pretrain_v",
            Stage::PretrainF => "pretrain_f",
            Stage::JointFinetune => "joint_finetune",
        }
    }

    fn code(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSize {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageBudgets {
    pub pretrain_g: u64,
    pub pretrain_f: u64,
    /// Translator-only steps at the start of the joint stage.
    pub f_warm: u64,
    /// Generator + translator steps after the warm phase.
    pub joint: u64,
}

impl Default for StageBudgets {
    fn default() -> Self {
        Self {
            pretrain_g: 1200,
            pretrain_f: 1200,
            f_warm: 240,
            joint: 400,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub seed: u64,
    /// Weight of the translator loss in the joint objective.
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
    pub vocab_size: usize,
    pub generator: ModelSize,
    pub generator_max_len: usize,
    pub max_response: usize,
    pub translator: ModelSize,
    pub max_description: usize,
    pub codec: CodecConfig,
    pub codec_train: CodecTrainConfig,
    pub scorer: DualEncoderConfig,
    pub classifier: ClassifierConfig,
    pub budgets: StageBudgets,
    pub eval_every: u64,
    pub patience: usize,
    /// Cap on validation examples per evaluation.
    pub max_val_examples: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lambda: 0.2,
            lr: 1e-3,
            batch_size: 16,
            grad_clip: Some(1.0),
            vocab_size: DEFAULT_VOCAB_SIZE,
            generator: ModelSize {
                layers: 2,
                heads: 4,
                hidden: 64,
            },
            generator_max_len: 96,
            max_response: 40,
            translator: ModelSize {
                layers: 2,
                heads: 4,
                hidden: 64,
            },
            max_description: DEFAULT_MAX_DESCRIPTION,
            codec: CodecConfig::default(),
            codec_train: CodecTrainConfig::default(),
            scorer: DualEncoderConfig::default(),
            classifier: ClassifierConfig::default(),
            budgets: StageBudgets::default(),
            eval_every: 50,
            patience: 5,
            max_val_examples: 200,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if self.max_response + 3 > self.generator_max_len {
            return Err(Error::Config("max_response leaves no room for context".into()));
        }
        self.codec.validate()?;
        self.generator_config(self.vocab_size).validate()?;
        self.translator_config(self.vocab_size).validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn window(&self) -> Window {
        Window {
            max_len: self.generator_max_len,
            max_response: self.max_response,
        }
    }

    pub fn generator_config(&self, text_vocab: usize) -> SeqModelConfig {
        SeqModelConfig {
            vocab_size: text_vocab,
            layers: self.generator.layers,
            heads: self.generator.heads,
            hidden: self.generator.hidden,
            max_len: self.generator_max_len,
        }
    }

    pub fn layout(&self, text_vocab: usize) -> StreamLayout {
        StreamLayout {
            text_vocab,
            codebook_size: self.codec.codebook_size,
            image_len: self.codec.cells(),
            max_description: self.max_description,
        }
    }

    pub fn translator_config(&self, text_vocab: usize) -> SeqModelConfig {
        let layout = self.layout(text_vocab);
        SeqModelConfig {
            vocab_size: layout.vocab_size(),
            layers: self.translator.layers,
            heads: self.translator.heads,
            hidden: self.translator.hidden,
            max_len: layout.max_len(),
        }
    }
}

/// How a context and a response share one generator input. The context
/// always gets the room left by the longest response, as at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub max_len: usize,
    pub max_response: usize,
}

impl Window {
    pub fn context_room(&self) -> usize {
        self.max_len - self.max_response - 2
    }

    /// `[BOS] context [SEP] target`, the target cut to `max_response`.
    pub fn example(&self, ctx: &DialogueContext, target: &[TokenId], v: &Vocab) -> Result<SeqExample> {
        let t = &target[..target.len().min(self.max_response)];
        let c = flatten_context(ctx, v, self.context_room())?;
        Ok(g_example(&c, t))
    }
}

/// `L_G + lambda * L_F`.
pub fn joint_loss(loss_g: f64, loss_f: f64, lambda: f64) -> Result<f64> {
    if !(loss_g.is_finite() && loss_f.is_finite() && lambda.is_finite()) {
        return Err(Error::NonFinite(format!(
            "joint loss inputs L_G={loss_g}, L_F={loss_f}, lambda={lambda}"
        )));
    }
    Ok(loss_g + lambda * loss_f)
}

/// Early-stopping and step bookkeeping for one training phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseProgress {
    pub step: u64,
    pub best_val: Option<f64>,
    pub best_step: Option<u64>,
    pub bad_evals: usize,
    pub stopped: bool,
    pub finished: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub pretrain_g: PhaseProgress,
    pub pretrain_v: PhaseProgress,
    pub pretrain_f: PhaseProgress,
    pub f_warm: PhaseProgress,
    pub joint: PhaseProgress,
}

/// Everything a run owns: parameters, optimizer moments, counters.
#[derive(Clone, Debug)]
pub struct RunState {
    pub config: TrainingConfig,
    pub vocab: Vocab,
    pub generator: SeqParams<f32>,
    pub g_opt: Adam<SeqParams<f32>>,
    pub translator: SeqParams<f32>,
    pub f_opt: Adam<SeqParams<f32>>,
    pub codec: VqModel<f32>,
    pub codec_frozen: bool,
    pub scorer: Option<DualEncoder>,
    pub classifier: Option<ShapeClassifier>,
    pub progress: Progress,
    /// Best-validation snapshots of the phase in flight.
    pub best_generator: Option<SeqParams<f32>>,
    pub best_translator: Option<SeqParams<f32>>,
}

/// Every text string in the corpora, for vocabulary training.
pub fn corpus_text(c: &Corpora) -> Vec<String> {
    let mut out = Vec::new();
    for d in c.text_dialogues.train.iter() {
        out.extend(d.turns.iter().cloned());
    }
    for p in c.pairs.train.iter() {
        out.push(p.description.clone());
    }
    for d in c.dialogues.train.iter() {
        for u in &d.context.turns {
            match &u.content {
                crate::data::UtteranceContent::Text(t) => out.push(t.clone()),
                crate::data::UtteranceContent::Image(r) => out.push(r.description.clone()),
            }
        }
        for s in &d.response.segments {
            match s {
                Segment::Text(t) => out.push(t.clone()),
                Segment::Image(r) => out.push(r.description.clone()),
            }
        }
    }
    out
}

impl RunState {
    /// Fresh parameters for every model, given a trained vocabulary.
    pub fn new(config: TrainingConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let v = vocab.size();
        let generator = SeqParams::init(config.generator_config(v), config.seed ^ 0x9e)?;
        let translator = SeqParams::init(config.translator_config(v), config.seed ^ 0xf1)?;
        let codec = VqModel::init(config.codec.clone(), config.codec_train.seed)?;
        Ok(Self {
            g_opt: Adam::new(&generator),
            f_opt: Adam::new(&translator),
            config,
            vocab,
            generator,
            translator,
            codec,
            codec_frozen: false,
            scorer: None,
            classifier: None,
            progress: Progress::default(),
            best_generator: None,
            best_translator: None,
        })
    }

    pub fn layout(&self) -> StreamLayout {
        self.config.layout(self.vocab.size())
    }

    /// Inference bundle. Falls back to the prototype scorer when no dual
    /// encoder has been trained.
    pub fn agent(&self) -> Agent {
        let scorer: Box<dyn MatchScorer> = match &self.scorer {
            Some(s) => Box::new(s.clone()),
            None => Box::new(PrototypeScorer::synthetic(self.config.codec.height)),
        };
        Agent {
            vocab: self.vocab.clone(),
            generator: self.generator.clone(),
            translator: self.translator.clone(),
            codec: self.codec.clone(),
            layout: self.layout(),
            scorer,
            classifier: self.classifier.clone(),
        }
    }

    // -----------------------------------------------------------------
    // checkpoints

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = json!({
            "format": "mdrg-run",
            "training": self.config,
            "vocab": serde_json::from_str::<serde_json::Value>(&self.vocab.to_json()).expect("vocab json"),
            "generator": self.generator.config,
            "translator": self.translator.config,
            "codec": self.codec.config,
            "codec_frozen": self.codec_frozen,
            "progress": self.progress,
            "adam_steps": {"generator": self.g_opt.step, "translator": self.f_opt.step},
            "has_scorer": self.scorer.is_some(),
            "has_classifier": self.classifier.is_some(),
            "has_best": {"generator": self.best_generator.is_some(), "translator": self.best_translator.is_some()},
        });
        let mut ck = Checkpoint::new(meta);
        ck.insert_params("g.", &self.generator);
        ck.insert_params("g_adam.m.", &self.g_opt.m);
        ck.insert_params("g_adam.v.", &self.g_opt.v);
        ck.insert_params("f.", &self.translator);
        ck.insert_params("f_adam.m.", &self.f_opt.m);
        ck.insert_params("f_adam.v.", &self.f_opt.v);
        ck.insert_params("codec.", &self.codec);
        if let Some(s) = &self.scorer {
            ck.insert_params("scorer.", &s.params);
        }
        if let Some(c) = &self.classifier {
            ck.insert_params("classifier.", &c.params);
        }
        if let Some(b) = &self.best_generator {
            ck.insert_params("best_g.", b);
        }
        if let Some(b) = &self.best_translator {
            ck.insert_params("best_f.", b);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.config;
        if meta["format"] != "mdrg-run" {
            return Err(Error::Checkpoint("not a run checkpoint".into()));
        }
        let field = |k: &str| -> Result<serde_json::Value> {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("metadata field `{k}` missing")))
        };
        let config: TrainingConfig = serde_json::from_value(field("training")?)?;
        let vocab = Vocab::from_json(&field("vocab")?.to_string())?;
        let mut state = RunState::new(config, vocab)?;
        let stored_g: SeqModelConfig = serde_json::from_value(field("generator")?)?;
        let stored_f: SeqModelConfig = serde_json::from_value(field("translator")?)?;
        let stored_codec: CodecConfig = serde_json::from_value(field("codec")?)?;
        if stored_g != state.generator.config || stored_f != state.translator.config || stored_codec != state.codec.config
        {
            return Err(Error::Checkpoint(
                "model configs recorded in the checkpoint disagree with its training config".into(),
            ));
        }
        ck.load_params("g.", &mut state.generator)?;
        ck.load_params("g_adam.m.", &mut state.g_opt.m)?;
        ck.load_params("g_adam.v.", &mut state.g_opt.v)?;
        ck.load_params("f.", &mut state.translator)?;
        ck.load_params("f_adam.m.", &mut state.f_opt.m)?;
        ck.load_params("f_adam.v.", &mut state.f_opt.v)?;
        ck.load_params("codec.", &mut state.codec)?;
        state.g_opt.step = meta["adam_steps"]["generator"].as_u64().unwrap_or(0);
        state.f_opt.step = meta["adam_steps"]["translator"].as_u64().unwrap_or(0);
        state.codec_frozen = meta["codec_frozen"].as_bool().unwrap_or(false);
        state.progress = serde_json::from_value(field("progress")?)?;
        if meta["has_scorer"].as_bool() == Some(true) {
            let mut s = DualEncoder::init(state.vocab.clone(), state.config.scorer.dim, 0);
            ck.load_params("scorer.", &mut s.params)?;
            state.scorer = Some(s);
        }
        if meta["has_classifier"].as_bool() == Some(true) {
            let mut c = ShapeClassifier::init(state.config.classifier.hidden, 0);
            ck.load_params("classifier.", &mut c.params)?;
            state.classifier = Some(c);
        }
        if meta["has_best"]["generator"].as_bool() == Some(true) {
            let mut b = state.generator.clone();
            ck.load_params("best_g.", &mut b)?;
            state.best_generator = Some(b);
        }
        if meta["has_best"]["translator"].as_bool() == Some(true) {
            let mut b = state.translator.clone();
            ck.load_params("best_f.", &mut b)?;
            state.best_translator = Some(b);
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Loads a checkpoint and checks its model shapes against `expected`.
    pub fn load_expecting(path: &Path, expected: &TrainingConfig) -> Result<Self> {
        let state = Self::load(path)?;
        let v = state.vocab.size();
        let checks = [
            ("generator", expected.generator_config(v) == state.generator.config),
            ("translator", expected.translator_config(v) == state.translator.config),
            ("codec", expected.codec == state.codec.config),
        ];
        for (what, ok) in checks {
            if !ok {
                return Err(Error::Checkpoint(format!(
                    "{} config in {} does not match the requested configuration",
                    what,
                    path.display()
                )));
            }
        }
        Ok(state)
    }
}

// ---------------------------------------------------------------------
// examples

/// A joint fine-tuning item: the generator example, plus a translator
/// stream when the response shares an image.
#[derive(Clone, Debug, PartialEq)]
pub struct JointItem {
    pub g: SeqExample,
    pub f: Option<SeqExample>,
}

pub fn text_dialogue_example(d: &TextDialogue, v: &Vocab, window: Window) -> Result<SeqExample> {
    let ctx = DialogueContext {
        turns: d
            .context()
            .iter()
            .enumerate()
            .map(|(i, t)| Utterance::text(if i % 2 == 0 { "A" } else { "B" }, t.clone()))
            .collect(),
    };
    window.example(&ctx, &text_target(d.response(), v).tokens, v)
}

pub fn pair_stream(
    description: &str,
    image: &ImageTensor,
    v: &Vocab,
    codec: &VqModel<f32>,
    layout: &StreamLayout,
) -> Result<SeqExample> {
    let c = description_tokens(layout, &v.encode(description));
    let s = codec.tokenize(image)?;
    Ok(JointStream::build(layout, &c, &s)?.example())
}

pub fn joint_item(
    d: &MultimodalDialogue,
    v: &Vocab,
    codec: &VqModel<f32>,
    layout: &StreamLayout,
    window: Window,
) -> Result<JointItem> {
    let target = build_target(&d.response, v)?;
    let g = window.example(&d.context, &target.tokens, v)?;
    let f = match d.response.images().next() {
        Some(r) => {
            let px = r
                .pixels
                .as_deref()
                .ok_or_else(|| Error::Image(format!("pixels for `{}` are not loaded", r.description)))?;
            Some(pair_stream(&r.description, px, v, codec, layout)?)
        }
        None => None,
    };
    Ok(JointItem { g, f })
}

// ---------------------------------------------------------------------
// joint step

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemLoss {
    pub loss_g: f64,
    /// Absent for text-only items.
    pub loss_f: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLoss {
    pub loss_g: f64,
    pub loss_f: Option<f64>,
    pub total: f64,
    pub items: Vec<ItemLoss>,
}

/// Losses and gradients of `L_G + lambda * L_F` for both models. `L_G` is
/// pooled over every item's target positions, `L_F` over the streams of
/// image-bearing items only. With `lambda == 0` the translator gradient is
/// exactly zero and is not computed.
pub fn joint_gradients<T: Scalar>(
    generator: &SeqParams<T>,
    translator: &SeqParams<T>,
    batch: &[JointItem],
    lambda: f64,
) -> Result<(JointLoss, SeqParams<T>, SeqParams<T>)> {
    let g_total: usize = batch.iter().map(|it| it.g.scored()).sum();
    if g_total == 0 {
        return Err(Error::EmptyMask);
    }
    let f_total: usize = batch.iter().filter_map(|it| it.f.as_ref()).map(SeqExample::scored).sum();
    let mut g_grads = generator.zeros_like();
    let mut f_grads = translator.zeros_like();
    let mut items = Vec::with_capacity(batch.len());
    let (mut g_sum, mut f_sum) = (0.0, 0.0);
    for it in batch {
        let n = it.g.scored();
        let (s, _) = generator.accumulate_batch(
            std::slice::from_ref(&it.g),
            T::lit(n as f64 / g_total as f64),
            &mut g_grads,
        )?;
        g_sum += s;
        let loss_f = match &it.f {
            Some(f) if lambda > 0.0 => {
                let m = f.scored();
                let (s, _) = translator.accumulate_batch(
                    std::slice::from_ref(f),
                    T::lit(lambda * m as f64 / f_total as f64),
                    &mut f_grads,
                )?;
                f_sum += s;
                Some(s / m as f64)
            }
            Some(f) => {
                let l = translator.batch_nll(std::slice::from_ref(f))?;
                f_sum += l * f.scored() as f64;
                Some(l)
            }
            None => None,
        };
        items.push(ItemLoss {
            loss_g: s / n as f64,
            loss_f,
        });
    }
    let loss_g = g_sum / g_total as f64;
    let loss_f = (f_total > 0).then(|| f_sum / f_total as f64);
    let total = joint_loss(loss_g, loss_f.unwrap_or(0.0), lambda)?;
    Ok((
        JointLoss {
            loss_g,
            loss_f,
            total,
            items,
        },
        g_grads,
        f_grads,
    ))
}

fn clip<P: ParamSet<f32>>(grads: &mut P, clip: Option<f64>) {
    if let Some(c) = clip {
        clip_grad_norm(grads, c);
    }
}

/// One optimizer step on both models for the joint objective. The codec is
/// never touched; with `lambda == 0` the translator is left as is.
pub fn joint_finetune_step(state: &mut RunState, batch: &[JointItem]) -> Result<JointLoss> {
    let lambda = state.config.lambda;
    let (loss, mut g_grads, mut f_grads) = joint_gradients(&state.generator, &state.translator, batch, lambda)?;
    clip(&mut g_grads, state.config.grad_clip);
    state.g_opt.update(&mut state.generator, &g_grads, state.config.lr)?;
    if lambda > 0.0 && loss.loss_f.is_some() {
        clip(&mut f_grads, state.config.grad_clip);
        state.f_opt.update(&mut state.translator, &f_grads, state.config.lr)?;
    }
    Ok(loss)
}

fn seq_step(
    params: &mut SeqParams<f32>,
    opt: &mut Adam<SeqParams<f32>>,
    batch: &[SeqExample],
    cfg: &TrainingConfig,
) -> Result<f64> {
    let (loss, mut grads) = params.batch_loss_and_grad(batch)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss}")));
    }
    clip(&mut grads, cfg.grad_clip);
    opt.update(params, &grads, cfg.lr)?;
    Ok(loss)
}

// ---------------------------------------------------------------------
// stages

/// One JSON-lines record of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub struct LogRecord {
    pub step: u64,
    pub stage: Stage,
    #[serde(rename = "loss_G")]
    pub loss_g: Option<f64>,
    #[serde(rename = "loss_F")]
    pub loss_f: Option<f64>,
    pub loss_total: f64,
    pub val_loss: Option<f64>,
}

/// Where stage output goes.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Receives `best.ckpt` at every validation improvement.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many steps of the stage in total (for interruption).
    pub stop_at: Option<u64>,
    pub log: Option<&'a mut dyn FnMut(&LogRecord)>,
}

impl RunOptions<'_> {
    fn emit(&mut self, r: LogRecord) {
        if let Some(f) = self.log.as_mut() {
            f(&r);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub steps_run: u64,
    pub finished: bool,
    pub initial_val: Option<f64>,
    pub best_val: Option<f64>,
    pub final_train_loss: Option<f64>,
}

/// Batch indices for `(seed, stage, step)`, independent of history.
pub fn batch_indices(seed: u64, stage: u64, step: u64, n: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stage << 40) ^ step);
    (0..batch_size).map(|_| rng.random_range(0..n)).collect()
}

fn capped<T: Clone>(items: &[T], n: usize) -> Vec<T> {
    items.iter().take(n).cloned().collect()
}

fn require(name: &str, n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::MissingCorpus(name.into()))
    } else {
        Ok(())
    }
}

enum Val {
    Improved,
    Worse,
}

fn note_validation(p: &mut PhaseProgress, val: f64, patience: usize) -> Val {
    if p.best_val.is_none_or(|b| val < b) {
        p.best_val = Some(val);
        p.best_step = Some(p.step);
        p.bad_evals = 0;
        Val::Improved
    } else {
        p.bad_evals += 1;
        if p.bad_evals >= patience {
            p.stopped = true;
        }
        Val::Worse
    }
}

/// Which models a sequence phase trains.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Phase {
    PretrainG,
    PretrainF,
    FWarm,
    Joint,
}

impl Phase {
    fn stage(self) -> Stage {
        match self {
            Phase::PretrainG => Stage::PretrainG,
            Phase::PretrainF => Stage::PretrainF,
            Phase::FWarm | Phase::Joint => Stage::JointFinetune,
        }
    }

    fn code(self) -> u64 {
        match self {
            Phase::FWarm => 10,
            p => p.stage().code(),
        }
    }

    fn budget(self, b: &StageBudgets) -> u64 {
        match self {
            Phase::PretrainG => b.pretrain_g,
            Phase::PretrainF => b.pretrain_f,
            Phase::FWarm => b.f_warm,
            Phase::Joint => b.joint,
        }
    }

    fn progress(self, p: &mut Progress) -> &mut PhaseProgress {
        match self {
            Phase::PretrainG => &mut p.pretrain_g,
            Phase::PretrainF => &mut p.pretrain_f,
            Phase::FWarm => &mut p.f_warm,
            Phase::Joint => &mut p.joint,
        }
    }

    fn trains_g(self) -> bool {
        matches!(self, Phase::PretrainG | Phase::Joint)
    }

    fn trains_f(self) -> bool {
        !matches!(self, Phase::PretrainG)
    }
}

/// Prepared training and validation examples for a phase.
struct PhaseData {
    train: Vec<JointItem>,
    dev: Vec<JointItem>,
}

fn phase_data(state: &RunState, corpora: &Corpora, phase: Phase) -> Result<PhaseData> {
    let cfg = &state.config;
    let v = &state.vocab;
    let window = cfg.window();
    let layout = state.layout();
    let cap = cfg.max_val_examples;
    match phase {
        Phase::PretrainG => {
            require("text dialogues (train)", corpora.text_dialogues.train.len())?;
            let conv = |d: &TextDialogue| -> Result<JointItem> {
                Ok(JointItem {
                    g: text_dialogue_example(d, v, window)?,
                    f: None,
                })
            };
            Ok(PhaseData {
                train: corpora.text_dialogues.train.iter().map(conv).collect::<Result<_>>()?,
                dev: capped(&corpora.text_dialogues.dev, cap).iter().map(conv).collect::<Result<_>>()?,
            })
        }
        Phase::PretrainF => {
            require("description-image pairs (train)", corpora.pairs.train.len())?;
            let conv = |p: &crate::data::DescriptionImagePair| -> Result<JointItem> {
                let ex = pair_stream(&p.description, &p.image, v, &state.codec, &layout)?;
                Ok(JointItem { g: ex, f: None })
            };
            Ok(PhaseData {
                train: corpora.pairs.train.iter().map(conv).collect::<Result<_>>()?,
                dev: capped(&corpora.pairs.dev, cap).iter().map(conv).collect::<Result<_>>()?,
            })
        }
        Phase::FWarm | Phase::Joint => {
            require("multimodal dialogues (train)", corpora.dialogues.train.len())?;
            let conv = |d: &MultimodalDialogue| joint_item(d, v, &state.codec, &layout, window);
            let mut train: Vec<JointItem> = corpora.dialogues.train.iter().map(conv).collect::<Result<_>>()?;
            let mut dev: Vec<JointItem> =
                capped(&corpora.dialogues.dev, cap).iter().map(conv).collect::<Result<_>>()?;
            if phase == Phase::FWarm {
                // translator-only: keep the image streams
                let only_f = |items: Vec<JointItem>| -> Vec<JointItem> {
                    items
                        .into_iter()
                        .filter_map(|it| it.f.map(|f| JointItem { g: f, f: None }))
                        .collect()
                };
                train = only_f(train);
                dev = only_f(dev);
                require("image-bearing multimodal dialogues", train.len())?;
            }
            Ok(PhaseData { train, dev })
        }
    }
}

fn validation_loss(state: &RunState, phase: Phase, dev: &[JointItem]) -> Result<Option<f64>> {
    if dev.is_empty() {
        return Ok(None);
    }
    let single: Vec<SeqExample> = dev.iter().map(|it| it.g.clone()).collect();
    Ok(Some(match phase {
        Phase::PretrainG => state.generator.batch_nll(&single)?,
        Phase::PretrainF | Phase::FWarm => state.translator.batch_nll(&single)?,
        Phase::Joint => {
            let lg = state.generator.batch_nll(&single)?;
            let fs: Vec<SeqExample> = dev.iter().filter_map(|it| it.f.clone()).collect();
            let lf = if fs.is_empty() {
                0.0
            } else {
                state.translator.batch_nll(&fs)?
            };
            joint_loss(lg, lf, state.config.lambda)?
        }
    }))
}

fn run_phase(state: &mut RunState, corpora: &Corpora, phase: Phase, opts: &mut RunOptions) -> Result<StageReport> {
    let budget = phase.budget(&state.config.budgets);
    let stage = phase.stage();
    if phase.progress(&mut state.progress).finished {
        return Ok(StageReport {
            stage,
            steps_run: 0,
            finished: true,
            initial_val: None,
            best_val: phase.progress(&mut state.progress).best_val,
            final_train_loss: None,
        });
    }
    let data = phase_data(state, corpora, phase)?;
    let cfg = state.config.clone();
    let mut report = StageReport {
        stage,
        steps_run: 0,
        finished: false,
        initial_val: None,
        best_val: None,
        final_train_loss: None,
    };
    if phase.progress(&mut state.progress).step == 0 {
        report.initial_val = validation_loss(state, phase, &data.dev)?;
    }
    // stage-level step number for logs and interruption
    let offset = if phase == Phase::Joint { cfg.budgets.f_warm } else { 0 };
    loop {
        let p = phase.progress(&mut state.progress);
        if p.step >= budget || p.stopped {
            break;
        }
        if opts.stop_at.is_some_and(|s| offset + p.step >= s) {
            return Ok(report);
        }
        let step = p.step;
        let idx = batch_indices(cfg.seed, phase.code(), step, data.train.len(), cfg.batch_size);
        let batch: Vec<JointItem> = idx.iter().map(|&i| data.train[i].clone()).collect();
        let (loss_g, loss_f, total) = match phase {
            Phase::PretrainG => {
                let ex: Vec<SeqExample> = batch.into_iter().map(|it| it.g).collect();
                let l = seq_step(&mut state.generator, &mut state.g_opt, &ex, &cfg)?;
                (Some(l), None, l)
            }
            Phase::PretrainF | Phase::FWarm => {
                let ex: Vec<SeqExample> = batch.into_iter().map(|it| it.g).collect();
                let l = seq_step(&mut state.translator, &mut state.f_opt, &ex, &cfg)?;
                (None, Some(l), l)
            }
            Phase::Joint => {
                let l = joint_finetune_step(state, &batch)?;
                (Some(l.loss_g), l.loss_f, l.total)
            }
        };
        report.steps_run += 1;
        report.final_train_loss = Some(total);
        let p = phase.progress(&mut state.progress);
        p.step += 1;
        let step_no = p.step;
        let mut val_loss = None;
        if step_no % cfg.eval_every == 0 || step_no == budget {
            if let Some(val) = validation_loss(state, phase, &data.dev)? {
                val_loss = Some(val);
                let p = phase.progress(&mut state.progress);
                if let Val::Improved = note_validation(p, val, cfg.patience) {
                    if phase.trains_g() {
                        state.best_generator = Some(state.generator.clone());
                    }
                    if phase.trains_f() {
                        state.best_translator = Some(state.translator.clone());
                    }
                    if let Some(dir) = &opts.out_dir {
                        std::fs::create_dir_all(dir)?;
                        state.save(&dir.join("best.ckpt"))?;
                    }
                }
            }
        }
        opts.emit(LogRecord {
            step: offset + step_no,
            stage,
            loss_g,
            loss_f,
            loss_total: total,
            val_loss,
        });
    }
    // restore the best validation snapshot of whatever this phase trained
    if phase.trains_g() {
        if let Some(b) = state.best_generator.take() {
            state.generator = b;
        }
    }
    if phase.trains_f() {
        if let Some(b) = state.best_translator.take() {
            state.translator = b;
        }
    }
    let p = phase.progress(&mut state.progress);
    p.finished = true;
    report.finished = true;
    report.best_val = p.best_val;
    Ok(report)
}

fn pretrain_v(state: &mut RunState, corpora: &Corpora, opts: &mut RunOptions) -> Result<StageReport> {
    if state.progress.pretrain_v.finished {
        return Ok(StageReport {
            stage: Stage::PretrainV,
            steps_run: 0,
            finished: true,
            initial_val: None,
            best_val: None,
            final_train_loss: None,
        });
    }
    if state.codec_frozen {
        return Err(Error::Config("the codec is frozen".into()));
    }
    require("description-image pairs (train)", corpora.pairs.train.len())?;
    let cfg = state.config.clone();
    let images: Vec<ImageTensor> = corpora.pairs.train.iter().map(|p| p.image.clone()).collect();
    let mut last = None;
    let mut records = Vec::new();
    let codec = train_codec(&images, cfg.codec.clone(), &cfg.codec_train, |step, loss| {
        last = Some(loss.total);
        records.push(LogRecord {
            step: step as u64 + 1,
            stage: Stage::PretrainV,
            loss_g: None,
            loss_f: None,
            loss_total: loss.total,
            val_loss: None,
        });
    })?;
    for r in records {
        opts.emit(r);
    }
    state.codec = codec;
    let val = if corpora.pairs.dev.is_empty() {
        None
    } else {
        let mut s = 0.0;
        for p in &corpora.pairs.dev {
            s += state.codec.reconstruct(&p.image)?.mse(&p.image);
        }
        Some(s / corpora.pairs.dev.len() as f64)
    };
    state.scorer = Some(DualEncoder::train(state.vocab.clone(), &corpora.pairs.train, &cfg.scorer)?);
    let labelled: Vec<(ImageTensor, crate::data::Shape)> = corpora
        .pairs
        .train
        .iter()
        .filter_map(|p| ShapeSpec::shape_in(&p.description).map(|s| (p.image.clone(), s)))
        .collect();
    if !labelled.is_empty() {
        state.classifier = Some(ShapeClassifier::train(&labelled, &cfg.classifier)?);
    }
    state.progress.pretrain_v.step = cfg.codec_train.steps as u64;
    state.progress.pretrain_v.best_val = val;
    state.progress.pretrain_v.finished = true;
    Ok(StageReport {
        stage: Stage::PretrainV,
        steps_run: cfg.codec_train.steps as u64,
        finished: true,
        initial_val: None,
        best_val: val,
        final_train_loss: last,
    })
}

/// Runs (or resumes) one stage. The joint stage freezes the codec and runs
/// the translator-only warm phase before the joint phase.
pub fn run_stage(state: &mut RunState, stage: Stage, corpora: &Corpora, opts: &mut RunOptions) -> Result<StageReport> {
    match stage {
        Stage::PretrainG => run_phase(state, corpora, Phase::PretrainG, opts),
        Stage::PretrainV => pretrain_v(state, corpora, opts),
        Stage::PretrainF => run_phase(state, corpora, Phase::PretrainF, opts),
        Stage::JointFinetune => {
            state.codec_frozen = true;
            let before = state.codec.to_bytes();
            let warm = run_phase(state, corpora, Phase::FWarm, opts)?;
            if !warm.finished {
                return Ok(StageReport {
                    stage,
                    ..warm
                });
            }
            let joint = run_phase(state, corpora, Phase::Joint, opts)?;
            if state.codec.to_bytes() != before {
                return Err(Error::Config("codec parameters changed while frozen".into()));
            }
            Ok(StageReport {
                steps_run: warm.steps_run + joint.steps_run,
                initial_val: warm.initial_val.or(joint.initial_val),
                ..joint
            })
        }
    }
}

/// Trains a vocabulary on the corpora and runs every stage in order.
pub fn run_all(config: TrainingConfig, corpora: &Corpora, opts: &mut RunOptions) -> Result<(RunState, Vec<StageReport>)> {
    let vocab = Vocab::train(corpus_text(corpora), config.vocab_size)?;
    let mut state = RunState::new(config, vocab)?;
    let mut reports = Vec::new();
    for stage in Stage::ALL {
        reports.push(run_stage(&mut state, stage, corpora, opts)?);
    }
    Ok((state, reports))
}

// ---------------------------------------------------------------------
// evaluation

/// One evaluated dialogue.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub gold_intent: bool,
    pub pred_intent: bool,
    pub text: String,
    pub descriptions: Vec<String>,
    /// Top-ranked image per description.
    pub images: Vec<ImageTensor>,
    /// Classifier label equals the shape named by the description.
    pub class_match: Vec<bool>,
}

impl Prediction {
    /// As a dialogue whose response holds the generated segments.
    pub fn to_dialogue(&self, context: &DialogueContext) -> MultimodalDialogue {
        let mut segments = Vec::new();
        if !self.text.is_empty() {
            segments.push(Segment::Text(self.text.clone()));
        }
        for (i, d) in self.descriptions.iter().enumerate() {
            let mut r = crate::data::ImageRef::described(d.clone());
            if let Some(img) = self.images.get(i) {
                r.image_path = Some(format!("images/{}-{i}.png", self.id));
                r.pixels = Some(std::sync::Arc::new(img.clone()));
            }
            segments.push(Segment::Image(r));
        }
        if segments.is_empty() {
            segments.push(Segment::Text(String::new()));
        }
        MultimodalDialogue {
            id: self.id.clone(),
            context: context.clone(),
            response: crate::data::MultimodalResponse {
                speaker: crate::agent::AGENT.into(),
                segments,
            },
        }
    }
}

fn gold_text(d: &MultimodalDialogue) -> String {
    d.response
        .segments
        .iter()
        .filter_map(|s| match s {
            Segment::Text(t) => Some(t.as_str()),
            Segment::Image(_) => None,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Target positions of one span kind, for per-kind perplexity.
fn span_example(d: &MultimodalDialogue, v: &Vocab, window: Window, kind: SpanKind) -> Result<Option<SeqExample>> {
    let mut target = build_target(&d.response, v)?;
    target.tokens.truncate(window.max_response);
    let ex = window.example(&d.context, &target.tokens, v)?;
    let start = ex.tokens.len() - target.tokens.len();
    let mut mask = vec![false; ex.tokens.len()];
    for s in target.spans.iter().filter(|s| s.kind == kind) {
        for i in s.start..s.end.min(target.tokens.len()) {
            mask[start + i] = true;
        }
    }
    if kind == SpanKind::Text {
        // the closing EOS belongs to the text response
        for s in target.spans.iter().filter(|s| s.kind == SpanKind::End) {
            if s.start < target.tokens.len() {
                mask[start + s.start] = true;
            }
        }
    }
    Ok(mask.iter().any(|&m| m).then_some(SeqExample { tokens: ex.tokens, mask }))
}

/// Generates a response for every dialogue and scores intent, text,
/// descriptions and images.
pub fn evaluate(
    state: &RunState,
    dialogues: &[MultimodalDialogue],
    opts: &RespondOptions,
) -> Result<(MetricsReport, Vec<Prediction>)> {
    let agent = state.agent();
    let mut preds = Vec::with_capacity(dialogues.len());
    for (i, d) in dialogues.iter().enumerate() {
        let resp = agent.respond(
            &d.context,
            &RespondOptions {
                seed: opts.seed.wrapping_add(1000 * i as u64),
                max_new: state.config.max_response,
                ..opts.clone()
            },
        )?;
        let images: Vec<ImageTensor> = resp.images().map(|g| g.top().clone()).collect();
        let descriptions: Vec<String> = resp.images().map(|g| g.description.clone()).collect();
        let class_match = descriptions
            .iter()
            .zip(&images)
            .map(|(desc, img)| match (&agent.classifier, ShapeSpec::shape_in(desc)) {
                (Some(c), Some(shape)) => c.predict(img) == shape,
                _ => false,
            })
            .collect();
        preds.push(Prediction {
            id: d.id.clone(),
            gold_intent: d.response.has_image(),
            pred_intent: resp.generated.shares_image(),
            text: resp.generated.parsed.text(),
            descriptions,
            images,
            class_match,
        });
    }
    let report = score_predictions(state, dialogues, &preds)?;
    Ok((report, preds))
}

/// Metrics for already generated predictions against gold dialogues.
pub fn score_predictions(
    state: &RunState,
    dialogues: &[MultimodalDialogue],
    preds: &[Prediction],
) -> Result<MetricsReport> {
    let mut report = text_report(dialogues, preds)?;
    let window = state.config.window();
    let v = &state.vocab;
    let mut text_ex = Vec::new();
    let mut desc_ex = Vec::new();
    for d in dialogues {
        text_ex.extend(span_example(d, v, window, SpanKind::Text)?);
        desc_ex.extend(span_example(d, v, window, SpanKind::Description)?);
    }
    if !text_ex.is_empty() {
        report.response.ppl = Some(eval::ppl(&state.generator, &text_ex)?);
    }
    if !desc_ex.is_empty() {
        report.description.ppl = Some(eval::ppl(&state.generator, &desc_ex)?);
    }

    let generated: Vec<&ImageTensor> = preds.iter().flat_map(|p| &p.images).collect();
    let mut image = ImageScores {
        count: generated.len(),
        ..ImageScores::default()
    };
    if !generated.is_empty() {
        let matches: Vec<bool> = preds.iter().flat_map(|p| p.class_match.iter().copied()).collect();
        image.class_match = Some(matches.iter().filter(|&&m| m).count() as f64 / matches.len() as f64);
        let real: Vec<ImageTensor> = dialogues
            .iter()
            .flat_map(|d| d.response.images().filter_map(|r| r.pixels.as_deref().cloned()))
            .collect();
        if !real.is_empty() {
            let feats = |imgs: &mut dyn Iterator<Item = &ImageTensor>| -> Result<Vec<Vec<f64>>> {
                imgs.map(|i| state.codec.pooled_features(i)).collect()
            };
            let a = feats(&mut generated.iter().copied())?;
            let b = feats(&mut real.iter())?;
            image.fid = Some(eval::fid(&a, &b)?);
        }
        if let Some(c) = &state.classifier {
            let probs: Vec<Vec<f64>> = generated.iter().map(|i| c.probabilities(i)).collect();
            let (m, s) = eval::inception_score(&probs, DEFAULT_IS_SPLITS)?;
            image.is_mean = Some(m);
            image.is_std = Some(s);
        }
    }
    report.image = image;
    let mut backends = BTreeMap::new();
    backends.insert("features".into(), "codec-encoder-pooled".into());
    backends.insert(
        "classifier".into(),
        if state.classifier.is_some() { "shape-mlp" } else { "none" }.into(),
    );
    backends.insert(
        "reranker".into(),
        if state.scorer.is_some() { "dual-encoder" } else { "prototype-mse" }.into(),
    );
    report.backends = backends;
    Ok(report)
}

/// Model-free part of the report: intent and overlap metrics.
pub fn text_report(dialogues: &[MultimodalDialogue], preds: &[Prediction]) -> Result<MetricsReport> {
    if dialogues.len() != preds.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} dialogues",
            preds.len(),
            dialogues.len()
        )));
    }
    let golds: Vec<bool> = dialogues.iter().map(|d| d.response.has_image()).collect();
    let pi: Vec<bool> = preds.iter().map(|p| p.pred_intent).collect();
    let mut report = MetricsReport {
        intent: eval::intent_f1(&pi, &golds)?,
        ..MetricsReport::default()
    };
    let (mut th, mut tr) = (Vec::new(), Vec::new());
    let (mut dh, mut dr) = (Vec::new(), Vec::new());
    for (d, p) in dialogues.iter().zip(preds) {
        let gt = gold_text(d);
        if !gt.trim().is_empty() {
            th.push(p.text.clone());
            tr.push(gt);
        }
        if let Some(r) = d.response.images().next() {
            dh.push(p.descriptions.first().cloned().unwrap_or_default());
            dr.push(r.description.clone());
        }
    }
    if !th.is_empty() {
        report.response = TextScores::compute(&th, &tr)?;
    }
    if !dh.is_empty() {
        report.description = TextScores::compute(&dh, &dr)?;
    }
    Ok(report)
}

/// Labels every predicted image with whether the classifier agrees with
/// the shape its description names.
pub fn attach_class_match(preds: &mut [Prediction], classifier: &ShapeClassifier) {
    for p in preds {
        p.class_match = p
            .descriptions
            .iter()
            .zip(&p.images)
            .map(|(d, img)| ShapeSpec::shape_in(d).is_some_and(|s| classifier.predict(img) == s))
            .collect();
    }
}

/// Writes `predictions.jsonl` in the dialogue format plus one PNG per
/// predicted image under `images/`.
pub fn write_predictions(dir: &Path, dialogues: &[MultimodalDialogue], preds: &[Prediction]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut out = Vec::with_capacity(preds.len());
    for (d, p) in dialogues.iter().zip(preds) {
        let pd = p.to_dialogue(&d.context);
        for r in pd.response.images() {
            if let (Some(path), Some(px)) = (&r.image_path, &r.pixels) {
                px.save_png(&dir.join(path))?;
            }
        }
        out.push(pd);
    }
    let path = dir.join("predictions.jsonl");
    crate::data::write_photochat_format(&path, &out)?;
    Ok(path)
}

/// Reads predictions back from a dialogue JSONL file written by
/// [`Prediction::to_dialogue`].
pub fn prediction_from_dialogue(d: &MultimodalDialogue) -> Prediction {
    let descriptions: Vec<String> = d.response.images().map(|r| r.description.clone()).collect();
    let text = gold_text(d);
    Prediction {
        id: d.id.clone(),
        gold_intent: false,
        pred_intent: !descriptions.is_empty(),
        text,
        descriptions,
        images: d.response.images().filter_map(|r| r.pixels.as_deref().cloned()).collect(),
        class_match: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_loss_formula() {
        assert!((joint_loss(1.0, 2.0, 0.2).unwrap() - 1.4).abs() < 1e-15);
        assert_eq!(joint_loss(1.5, 7.0, 0.0).unwrap(), 1.5);
        assert_eq!(joint_loss(1.5, 0.0, 0.7).unwrap(), 1.5);
        assert!(joint_loss(f64::NAN, 0.0, 0.2).is_err());
    }

    #[test]
    fn batch_indices_depend_only_on_key() {
        let a = batch_indices(1, 2, 3, 100, 8);
        assert_eq!(a, batch_indices(1, 2, 3, 100, 8));
        assert_ne!(a, batch_indices(1, 2, 4, 100, 8));
        assert!(a.iter().all(|&i| i < 100));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainingConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.lambda, 0.2);
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        let json = serde_json::to_string(&TrainingConfig::default()).unwrap();
        let back: TrainingConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, TrainingConfig::default());
    }

    #[test]
    fn log_record_field_names() {
        let r = LogRecord {
            step: 3,
            stage: Stage::JointFinetune,
            loss_g: Some(1.0),
            loss_f: None,
            loss_total: 1.0,
            val_loss: None,
        };
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["stage"], "joint_finetune");
        assert_eq!(v["loss_G"], 1.0);
        assert!(v["loss_F"].is_null());
        for k in ["step", "loss_total", "val_loss"] {
            assert!(v.get(k).is_some());
        }
    }
}
