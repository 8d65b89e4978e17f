#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use mdrg_cli::config::CliConfig;
use mdrg_core::classifier::ClassifierConfig;
use mdrg_core::codec::{CodecConfig, CodecTrainConfig};
use mdrg_core::data::SyntheticWorldConfig;
use mdrg_core::pipeline::{ModelSize, StageBudgets, TrainingConfig};
use mdrg_core::scorer::DualEncoderConfig;
use tempfile::TempDir;

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn mdrg(args: &[&str]) -> Run {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("mdrg").chain(args.iter().copied());
    let code = mdrg_cli::run_with(argv, &mut out, &mut err);
    Run {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

/// Runs `args` and panics with stderr unless the command succeeded.
pub fn ok(args: &[&str]) -> String {
    let r = mdrg(args);
    assert_eq!(r.code, 0, "mdrg {args:?} failed: {}", r.stderr);
    r.stdout
}

pub fn tiny_config() -> CliConfig {
    let small = ModelSize {
        layers: 1,
        heads: 2,
        hidden: 16,
    };
    CliConfig {
        home: None,
        synthetic: SyntheticWorldConfig {
            seed: 3,
            n_dialogues: 60,
            n_text_dialogues: 60,
            n_pairs: 48,
            image_size: 16,
        },
        training: TrainingConfig {
            vocab_size: 300,
            generator: small.clone(),
            translator: small,
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
            scorer: DualEncoderConfig {
                steps: 20,
                ..Default::default()
            },
            classifier: ClassifierConfig {
                steps: 20,
                ..Default::default()
            },
            // enough for the generator to learn when to share an image
            budgets: StageBudgets {
                pretrain_g: 150,
                pretrain_f: 60,
                f_warm: 10,
                joint: 300,
            },
            lr: 5e-3,
            batch_size: 8,
            eval_every: 25,
            max_val_examples: 8,
            ..TrainingConfig::default()
        },
    }
}

pub fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string_pretty(&tiny_config()).unwrap()).unwrap();
    path
}

pub struct Trained {
    _dir: TempDir,
    pub home: PathBuf,
    pub config: PathBuf,
}

impl Trained {
    /// `mdrg --config .. --home .. <args>`
    pub fn args<'a>(&'a self, args: &[&'a str]) -> Vec<&'a str> {
        let mut v = vec![
            "--config",
            self.config.to_str().unwrap(),
            "--home",
            self.home.to_str().unwrap(),
        ];
        v.extend_from_slice(args);
        v
    }
}

/// A home directory taken through every stage with the tiny config,
/// built once per test binary.
pub fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let t = Trained {
            home: dir.path().join("home"),
            config: write_config(dir.path()),
            _dir: dir,
        };
        for stage in [
            "synth-data",
            "tokenizer-train",
            "codec-train",
            "pretrain-g",
            "pretrain-f",
            "finetune",
        ] {
            ok(&t.args(&[stage]));
        }
        t
    })
}
