//! Run configuration: a TOML file flattened to dotted keys, then environment
//! overrides (`QUARTF_` + key in upper case, dots as underscores), then
//! `--set key=value` flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use quart_core::perturb::{PerturbOp, PerturbationSpec};
use quart_core::pipeline::{Group, ModelConfig, Stage, StageConfig};
use quart_core::quart::ContextMode;
use quart_core::seed::derive_seed;
use quart_core::streams::Modality;
use quart_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "QUARTF_";

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("run.seed", "master seed; every other seed is derived from it unless set"),
    ("run.precision", "f32 or f64"),
    ("run.threads", "worker threads for ablation runs, 0 = all cores"),
    ("model.video_tokens", "tokens in the video block"),
    ("model.audio_tokens", "tokens in the audio block"),
    ("model.sensor_tokens", "tokens in the sensor block"),
    ("model.embed_dim", "shared token width (also the decoder width)"),
    ("model.encoder_dim", "encoder output width"),
    ("model.projection_hidden", "hidden width of the projection MLPs"),
    ("model.quart_heads", "attention heads in the gating module"),
    ("model.pooling", "query pooling: mean, last or max"),
    ("model.lora_rank", "adapter rank"),
    ("decoder.layers", "decoder blocks"),
    ("decoder.heads", "decoder attention heads"),
    ("decoder.vocab", "vocabulary size"),
    ("decoder.mlp_hidden", "decoder MLP width"),
    ("decoder.max_answer_len", "longest generated answer"),
    ("streams.video_frames", "frames per video stream"),
    ("streams.audio_frames", "frames per audio stream"),
    ("streams.sensor_frames", "frames per sensor stream"),
    ("streams.video_dims", "channels per video frame"),
    ("streams.audio_dims", "channels per audio frame"),
    ("streams.sensor_dims", "channels per sensor frame"),
    ("streams.noise_std", "generator noise level"),
    ("streams.signal_amp", "generator signal amplitude"),
    ("data.train", "training dataset directory (generated when unset)"),
    ("data.eval", "evaluation dataset directory (generated when unset)"),
    ("data.n", "generated training samples"),
    ("data.eval_n", "generated evaluation samples"),
    ("data.seed", "training set seed"),
    ("data.eval_seed", "evaluation set seed"),
    ("stage1.steps", "stage I optimizer steps"),
    ("stage2.steps", "stage II optimizer steps"),
    ("stage3.steps", "stage III optimizer steps"),
    ("stage1.lr.projection", "stage I projection learning rate"),
    ("stage2.lr.quart", "stage II gating learning rate"),
    ("stage2.lr.lora", "stage II adapter learning rate"),
    ("stage3.lr.quart", "stage III gating learning rate"),
    ("stage3.lr.lora", "stage III adapter learning rate"),
    ("stage3.lambda", "relevance regularizer weight"),
    ("stage3.reg_sign", "as_written or sparsity"),
    ("train.batch_size", "samples per step"),
    ("train.context_mode", "gated or raw (stages II and III)"),
    ("train.clip_norm", "global gradient-norm clip, 0 = off"),
    ("train.cold_start", "let stages II and III start without a checkpoint"),
    ("optim.beta1", "first-moment decay"),
    ("optim.beta2", "second-moment decay"),
    ("optim.eps", "denominator epsilon"),
    ("optim.weight_decay", "decoupled weight decay"),
    ("perturb.seed", "perturbation seed for stage III and evaluation"),
    ("perturb.sigma_rel", "noise level relative to channel std"),
    ("perturb.video_ops", "comma-separated video op set"),
    ("perturb.audio_ops", "comma-separated audio op set"),
    ("perturb.sensor_ops", "comma-separated sensor op set"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::config("run.precision", format!("expected f32 or f64, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub n: usize,
    pub eval_n: usize,
    pub seed: u64,
    pub eval_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub threads: usize,
    pub model: ModelConfig,
    pub init_seed: u64,
    pub data: DataConfig,
    pub stages: [StageConfig; 3],
    pub perturb: PerturbationSpec,
}

/// Layered raw values, flattened to dotted keys.
#[derive(Clone, Debug, Default)]
pub struct Layers {
    pub values: BTreeMap<String, String>,
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) -> Result<()> {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out)?;
            }
        }
        toml::Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        toml::Value::Array(a) => {
            let parts: Vec<String> = a
                .iter()
                .map(|x| match x {
                    toml::Value::String(s) => Ok(s.clone()),
                    toml::Value::Integer(_) | toml::Value::Float(_) | toml::Value::Boolean(_) => Ok(x.to_string()),
                    _ => Err(Error::config(prefix, "nested arrays are not supported")),
                })
                .collect::<Result<_>>()?;
            out.insert(prefix.to_string(), parts.join(","));
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
    Ok(())
}

fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_uppercase().replace('.', "_"))
}

impl Layers {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let v: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        let mut values = BTreeMap::new();
        flatten("", &toml::Value::Table(v), &mut values)?;
        Ok(Layers { values })
    }

    /// Applies `QUARTF_*` variables; names that match no key are rejected.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        let known: BTreeMap<String, &str> = KEYS.iter().map(|(k, _)| (env_name(k), *k)).collect();
        for (name, value) in vars {
            if !name.starts_with(ENV_PREFIX) {
                continue;
            }
            match known.get(&name) {
                Some(key) => {
                    self.values.insert(key.to_string(), value);
                }
                None => return Err(Error::config(name, "unknown environment override")),
            }
        }
        Ok(())
    }

    pub fn apply_sets(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::config(s.as_str(), "expected key=value"))?;
            self.values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        if let Some(k) = self.values.keys().find(|k| !KEYS.iter().any(|(known, _)| known == k)) {
            return Err(Error::config(k.as_str(), "unknown key"));
        }
        let seed = match self.values.get("run.seed") {
            Some(v) => parse("run.seed", v)?,
            None => 0,
        };
        let mut cfg = RunConfig::defaults(seed);
        for (k, v) in &self.values {
            cfg.set(k, v)?;
        }
        cfg.stages[2].perturb = Some(cfg.perturb.clone());
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

/// Parses with the value type's own error, re-labelled with `key`.
fn parse_named<T: FromStr<Err = Error>>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|e| match e {
        Error::Config { detail, .. } => Error::config(key, detail),
        other => other,
    })
}

fn parse_ops(key: &str, v: &str) -> Result<Vec<PerturbOp>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_named(key, s))
        .collect()
}

fn modality_key(rest: &str, suffix: &str) -> Option<usize> {
    let name = rest.strip_suffix(suffix)?;
    Modality::ALL.iter().find(|m| m.name() == name).map(|m| m.index())
}

impl RunConfig {
    pub fn defaults(seed: u64) -> Self {
        let stages = [Stage::I, Stage::II, Stage::III]
            .map(|s| StageConfig::for_stage(s, derive_seed(seed, "stage", s as u64)));
        let perturb = PerturbationSpec::new(derive_seed(seed, "perturb", 0));
        let mut cfg = RunConfig {
            seed,
            precision: Precision::F32,
            threads: 0,
            model: ModelConfig::default(),
            init_seed: derive_seed(seed, "init", 0),
            data: DataConfig {
                train: None,
                eval: None,
                n: 1000,
                eval_n: 1000,
                seed: derive_seed(seed, "data.train", 0),
                eval_seed: derive_seed(seed, "data.eval", 0),
            },
            stages,
            perturb,
        };
        cfg.stages[2].perturb = Some(cfg.perturb.clone());
        cfg
    }

    pub fn stage(&self, s: Stage) -> &StageConfig {
        &self.stages[s as usize]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "run.seed" => {}
            "run.precision" => self.precision = parse_named(key, v)?,
            "run.threads" => self.threads = parse(key, v)?,
            "model.embed_dim" => {
                m.embed_dim = parse(key, v)?;
                m.decoder.embed_dim = m.embed_dim;
            }
            "model.encoder_dim" => m.encoder_dim = parse(key, v)?,
            "model.projection_hidden" => m.projection_hidden = parse(key, v)?,
            "model.quart_heads" => m.quart_heads = parse(key, v)?,
            "model.pooling" => m.pooling = parse_named(key, v)?,
            "model.lora_rank" => m.lora_rank = parse(key, v)?,
            "decoder.layers" => m.decoder.layers = parse(key, v)?,
            "decoder.heads" => m.decoder.heads = parse(key, v)?,
            "decoder.vocab" => m.decoder.vocab = parse(key, v)?,
            "decoder.mlp_hidden" => m.decoder.mlp_hidden = parse(key, v)?,
            "decoder.max_answer_len" => m.decoder.max_answer_len = parse(key, v)?,
            "streams.noise_std" => m.streams.noise_std = parse(key, v)?,
            "streams.signal_amp" => m.streams.signal_amp = parse(key, v)?,
            "data.train" => self.data.train = Some(PathBuf::from(v)),
            "data.eval" => self.data.eval = Some(PathBuf::from(v)),
            "data.n" => self.data.n = parse(key, v)?,
            "data.eval_n" => self.data.eval_n = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.eval_seed" => self.data.eval_seed = parse(key, v)?,
            "stage1.steps" => self.stages[0].steps = parse(key, v)?,
            "stage2.steps" => self.stages[1].steps = parse(key, v)?,
            "stage3.steps" => self.stages[2].steps = parse(key, v)?,
            "stage1.lr.projection" => {
                self.stages[0].lr.insert(Group::Projection, parse(key, v)?);
            }
            "stage3.lambda" => self.stages[2].lambda = parse(key, v)?,
            "stage3.reg_sign" => self.stages[2].reg_sign = parse_named(key, v)?,
            "train.batch_size" => {
                let b = parse(key, v)?;
                self.stages.iter_mut().for_each(|s| s.batch_size = b);
            }
            "train.context_mode" => {
                let mode: ContextMode = parse_named(key, v)?;
                for s in &mut self.stages[1..] {
                    *s = s.clone().with_mode(mode);
                }
            }
            "train.clip_norm" => {
                let c: f64 = parse(key, v)?;
                let clip = (c > 0.0).then_some(c);
                self.stages.iter_mut().for_each(|s| s.clip_norm = clip);
            }
            "train.cold_start" => {
                let c = parse(key, v)?;
                self.stages.iter_mut().for_each(|s| s.cold_start = c);
            }
            "optim.beta1" => {
                let x = parse(key, v)?;
                self.stages.iter_mut().for_each(|s| s.optimizer.beta1 = x);
            }
            "optim.beta2" => {
                let x = parse(key, v)?;
                self.stages.iter_mut().for_each(|s| s.optimizer.beta2 = x);
            }
            "optim.eps" => {
                let x = parse(key, v)?;
                self.stages.iter_mut().for_each(|s| s.optimizer.eps = x);
            }
            "optim.weight_decay" => {
                let x = parse(key, v)?;
                self.stages.iter_mut().for_each(|s| s.optimizer.weight_decay = x);
            }
            "perturb.seed" => self.perturb.seed = parse(key, v)?,
            "perturb.sigma_rel" => self.perturb.sigma_rel = parse(key, v)?,
            _ => {
                if let Some(rest) = key.strip_prefix("model.") {
                    if let Some(i) = modality_key(rest, "_tokens") {
                        m.tokens.lengths[i] = parse(key, v)?;
                        return Ok(());
                    }
                }
                if let Some(rest) = key.strip_prefix("streams.") {
                    if let Some(i) = modality_key(rest, "_frames") {
                        m.streams.frames[i] = parse(key, v)?;
                        return Ok(());
                    }
                    if let Some(i) = modality_key(rest, "_dims") {
                        m.streams.dims[i] = parse(key, v)?;
                        return Ok(());
                    }
                }
                if let Some(rest) = key.strip_prefix("perturb.") {
                    if let Some(i) = modality_key(rest, "_ops") {
                        self.perturb.ops[i] = parse_ops(key, v)?;
                        return Ok(());
                    }
                }
                if let Some((stage, group)) = key.split_once(".lr.") {
                    let idx = match stage {
                        "stage2" => 1,
                        "stage3" => 2,
                        _ => return Err(Error::config(key, "unknown key")),
                    };
                    let g: Group = parse_named(key, group)?;
                    self.stages[idx].lr.insert(g, parse(key, v)?);
                    return Ok(());
                }
                return Err(Error::config(key, "unknown key"));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for s in &self.stages {
            s.validate().map_err(|e| match e {
                Error::Config { field, detail } => {
                    Error::config(field.replace("train.", &format!("stage{}.", s.stage as usize + 1)), detail)
                },
                other => other,
            })?;
        }
        self.perturb.validate()?;
        if self.data.n == 0 {
            return Err(Error::config("data.n", "must be positive"));
        }
        if self.data.eval_n == 0 {
            return Err(Error::config("data.eval_n", "must be positive"));
        }
        Ok(())
    }

    pub fn threads(&self) -> usize {
        if self.threads == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.threads
        }
    }
}
