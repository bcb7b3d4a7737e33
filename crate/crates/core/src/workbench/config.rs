//! `key = value` settings files covering data generation, model, training,
//! decoding and experiment plans.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use super::Setup;
use crate::data::SyntheticConfig;
use crate::model::GenerateFrom;
use crate::search::DecodeSettings;
use crate::tokenizer::{R2lMerges, VocabKind};
use crate::trainer::{StageKind, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("unknown config key `{key}` on line {line}")]
    UnknownKey { line: usize, key: String },
    #[error("config key `{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("config file {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub train: TrainConfig,
    pub decode: DecodeSettings,
    pub data: SyntheticConfig,
    pub r2l_merges: R2lMerges,
    pub setups: Vec<Setup>,
    pub targets: Vec<VocabKind>,
    pub seeds: Vec<u64>,
    /// Regularizer weight per target kind for `joint_reg`.
    pub lambda_char: f64,
    pub lambda_bpe: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            train: TrainConfig::default(),
            decode: DecodeSettings::default(),
            data: SyntheticConfig::default(),
            r2l_merges: R2lMerges::Separate,
            setups: vec![Setup::Forward],
            targets: vec![VocabKind::Char],
            seeds: vec![0],
            lambda_char: 1.0,
            lambda_bpe: 1e-4,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| ConfigError::Value {
        key: key.to_string(),
        msg: format!("cannot parse `{v}`: {e}"),
    })
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = v
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(ConfigError::Value {
            key: key.to_string(),
            msg: "empty list".into(),
        });
    }
    Ok(items)
}

fn parse_opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    if v == "none" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn r2l_str(m: R2lMerges) -> &'static str {
    match m {
        R2lMerges::Separate => "separate",
        R2lMerges::Shared => "shared",
    }
}

impl Settings {
    pub const KEYS: &'static [&'static str] = &[
        "alpha",
        "lambda",
        "lambda_char",
        "lambda_bpe",
        "gamma",
        "distance",
        "omega_input",
        "omega_grad",
        "batch_size",
        "patience",
        "eps_init",
        "eps_decay",
        "rho",
        "stages",
        "seed",
        "max_epochs",
        "target",
        "bpe_merges",
        "r2l_merges",
        "clip",
        "val_metric",
        "log_val_wer",
        "epoch_checkpoints",
        "feat_dim",
        "enc_layers",
        "enc_units",
        "enc_proj",
        "enc_subsample",
        "att_dim",
        "conv_channels",
        "conv_width",
        "dec_units",
        "emb_dim",
        "init_scale",
        "generate_from",
        "beam",
        "max_len_ratio",
        "utterances",
        "letters",
        "min_words",
        "max_words",
        "lexicon_size",
        "min_word_len",
        "max_word_len",
        "min_frames",
        "max_frames",
        "noise",
        "data_seed",
        "setups",
        "targets",
        "seeds",
    ];

    /// Applies one assignment. `lambda` sets both per-target weights.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        let d = &mut t.dims;
        let s = &mut self.data;
        match key {
            "alpha" => t.loss.alpha = parse(key, v)?,
            "lambda" => {
                let l: f64 = parse(key, v)?;
                self.lambda_char = l;
                self.lambda_bpe = l;
            }
            "lambda_char" => self.lambda_char = parse(key, v)?,
            "lambda_bpe" => self.lambda_bpe = parse(key, v)?,
            "gamma" => t.loss.gamma = parse(key, v)?,
            "distance" => t.loss.distance = parse(key, v)?,
            "omega_input" => t.loss.omega_input = parse(key, v)?,
            "omega_grad" => t.loss.omega_grad = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "patience" => t.patience = parse(key, v)?,
            "eps_init" => t.eps_init = parse(key, v)?,
            "eps_decay" => t.eps_decay = parse(key, v)?,
            "rho" => t.rho = parse(key, v)?,
            "stages" => t.stages = parse_list::<StageKind>(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "max_epochs" => t.max_epochs = parse(key, v)?,
            "target" => t.target = parse(key, v)?,
            "bpe_merges" => t.bpe_merges = parse(key, v)?,
            "r2l_merges" => {
                self.r2l_merges = match v {
                    "separate" => R2lMerges::Separate,
                    "shared" => R2lMerges::Shared,
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            msg: format!("expected separate or shared, got `{v}`"),
                        })
                    }
                }
            }
            "clip" => t.clip = parse_opt(key, v)?,
            "val_metric" => t.metric = parse(key, v)?,
            "log_val_wer" => t.log_val_wer = parse(key, v)?,
            "epoch_checkpoints" => t.epoch_checkpoints = parse(key, v)?,
            "feat_dim" => {
                d.feat_dim = parse(key, v)?;
                s.feat_dim = d.feat_dim;
            }
            "enc_layers" => d.enc_layers = parse(key, v)?,
            "enc_units" => d.enc_units = parse(key, v)?,
            "enc_proj" => d.enc_proj = parse_opt(key, v)?,
            "enc_subsample" => d.enc_subsample = parse(key, v)?,
            "att_dim" => d.att_dim = parse(key, v)?,
            "conv_channels" => d.conv_channels = parse(key, v)?,
            "conv_width" => d.conv_width = parse(key, v)?,
            "dec_units" => d.dec_units = parse(key, v)?,
            "emb_dim" => d.emb_dim = parse(key, v)?,
            "init_scale" => d.init_scale = parse(key, v)?,
            "generate_from" => {
                d.generate_from = match v {
                    "current" => GenerateFrom::Current,
                    "previous" => GenerateFrom::Previous,
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            msg: format!("expected current or previous, got `{v}`"),
                        })
                    }
                }
            }
            "beam" => self.decode.beam = parse(key, v)?,
            "max_len_ratio" => self.decode.max_len_ratio = parse(key, v)?,
            "utterances" => s.utterances = parse(key, v)?,
            "letters" => s.letters = parse(key, v)?,
            "min_words" => s.min_words = parse(key, v)?,
            "max_words" => s.max_words = parse(key, v)?,
            "lexicon_size" => s.lexicon_size = parse(key, v)?,
            "min_word_len" => s.min_word_len = parse(key, v)?,
            "max_word_len" => s.max_word_len = parse(key, v)?,
            "min_frames" => s.min_frames = parse(key, v)?,
            "max_frames" => s.max_frames = parse(key, v)?,
            "noise" => s.noise = parse(key, v)?,
            "data_seed" => s.seed = parse(key, v)?,
            "setups" => self.setups = parse_list(key, v)?,
            "targets" => self.targets = parse_list(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: 0,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Parses assignments on top of the defaults. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Settings, ConfigError> {
        let mut s = Settings::default();
        s.apply_text(text)?;
        Ok(s)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Line {
                    line: i + 1,
                    msg: format!("expected `key = value`, found `{line}`"),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            self.set(k, v).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line: i + 1, key },
                ConfigError::Value { key, msg } => ConfigError::Line {
                    line: i + 1,
                    msg: format!("`{key}`: {msg}"),
                },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Settings, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Settings::parse(&text)
    }

    /// Training config for one target kind, with the matching λ.
    pub fn train_for(&self, target: VocabKind, seed: u64) -> TrainConfig {
        let mut t = self.train.clone();
        t.target = target;
        t.seed = seed;
        t.loss.lambda = match target {
            VocabKind::Char => self.lambda_char,
            VocabKind::Bpe => self.lambda_bpe,
        };
        t
    }

    /// Every key with its current value; parsing the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let d = &t.dims;
        let s = &self.data;
        let opt = |o: Option<String>| o.unwrap_or_else(|| "none".into());
        let pairs: Vec<(&str, String)> = vec![
            ("alpha", t.loss.alpha.to_string()),
            ("lambda_char", self.lambda_char.to_string()),
            ("lambda_bpe", self.lambda_bpe.to_string()),
            ("gamma", t.loss.gamma.to_string()),
            ("distance", t.loss.distance.as_str().into()),
            ("omega_input", t.loss.omega_input.as_str().into()),
            ("omega_grad", t.loss.omega_grad.as_str().into()),
            ("batch_size", t.batch_size.to_string()),
            ("patience", t.patience.to_string()),
            ("eps_init", t.eps_init.to_string()),
            ("eps_decay", t.eps_decay.to_string()),
            ("rho", t.rho.to_string()),
            ("stages", join(&t.stages)),
            ("seed", t.seed.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("target", t.target.as_str().into()),
            ("bpe_merges", t.bpe_merges.to_string()),
            ("r2l_merges", r2l_str(self.r2l_merges).into()),
            ("clip", opt(t.clip.map(|c| c.to_string()))),
            ("val_metric", t.metric.as_str().into()),
            ("log_val_wer", t.log_val_wer.to_string()),
            ("epoch_checkpoints", t.epoch_checkpoints.to_string()),
            ("feat_dim", d.feat_dim.to_string()),
            ("enc_layers", d.enc_layers.to_string()),
            ("enc_units", d.enc_units.to_string()),
            ("enc_proj", opt(d.enc_proj.map(|c| c.to_string()))),
            ("enc_subsample", d.enc_subsample.to_string()),
            ("att_dim", d.att_dim.to_string()),
            ("conv_channels", d.conv_channels.to_string()),
            ("conv_width", d.conv_width.to_string()),
            ("dec_units", d.dec_units.to_string()),
            ("emb_dim", d.emb_dim.to_string()),
            ("init_scale", d.init_scale.to_string()),
            (
                "generate_from",
                match d.generate_from {
                    GenerateFrom::Current => "current".into(),
                    GenerateFrom::Previous => "previous".into(),
                },
            ),
            ("beam", self.decode.beam.to_string()),
            ("max_len_ratio", self.decode.max_len_ratio.to_string()),
            ("utterances", s.utterances.to_string()),
            ("letters", s.letters.to_string()),
            ("min_words", s.min_words.to_string()),
            ("max_words", s.max_words.to_string()),
            ("lexicon_size", s.lexicon_size.to_string()),
            ("min_word_len", s.min_word_len.to_string()),
            ("max_word_len", s.max_word_len.to_string()),
            ("min_frames", s.min_frames.to_string()),
            ("max_frames", s.max_frames.to_string()),
            ("noise", s.noise.to_string()),
            ("data_seed", s.seed.to_string()),
            (
                "setups",
                join(&self.setups.iter().map(|x| x.as_str()).collect::<Vec<_>>()),
            ),
            (
                "targets",
                join(&self.targets.iter().map(|x| x.as_str()).collect::<Vec<_>>()),
            ),
            ("seeds", join(&self.seeds)),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
