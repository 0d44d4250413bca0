//! Three-stage training: projection alignment, gating plus LoRA, and
//! fine-tuning on mismatched inputs with the relevance entropy term.

mod checkpoint;
mod gradcheck;
mod model;
mod optim;
mod train;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::RegSign;
use crate::error::{Error, Result};
use crate::perturb::PerturbationSpec;
use crate::quart::ContextMode;

pub use checkpoint::{
    checkpoint_load, checkpoint_save, load_checkpoint_file, save_checkpoint_file, Checkpoint, CheckpointHeader,
    StageRecord, CHECKPOINT_VERSION,
};
pub use gradcheck::objective_grad_check;
pub use model::{encode_sample, EncodedSample, Model, ModelConfig, ModalityMask, Prediction};
pub use optim::{adamw_step, AdamState, AdamW};
pub use train::{batch_indices, run_stage, JsonlSink, MetricsSink, Start, StepMetrics};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    I,
    II,
    III,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::I => "I",
            Stage::II => "II",
            Stage::III => "III",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "1" => Ok(Stage::I),
            "II" | "2" => Ok(Stage::II),
            "III" | "3" => Ok(Stage::III),
            _ => Err(Error::config("train.stage", format!("unknown stage `{s}`"))),
        }
    }
}

/// Parameter groups, keyed by name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Encoder,
    Projection,
    Quart,
    Decoder,
    Lora,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Encoder, Group::Projection, Group::Quart, Group::Decoder, Group::Lora];

    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Projection => "projection",
            Group::Quart => "quart",
            Group::Decoder => "decoder",
            Group::Lora => "lora",
        }
    }

    pub fn of(param: &str) -> Option<Group> {
        let prefix = param.split('.').next()?;
        Group::ALL.into_iter().find(|g| g.name() == prefix)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::config("train.trainable", format!("unknown parameter group `{s}`")))
    }
}

/// What the decoder is conditioned on while computing the task loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossConditioning {
    #[serde(rename = "on_Z")]
    OnZ,
    #[serde(rename = "on_C")]
    OnC,
}

impl LossConditioning {
    pub fn name(self) -> &'static str {
        match self {
            LossConditioning::OnZ => "on_Z",
            LossConditioning::OnC => "on_C",
        }
    }

    pub fn mode(self) -> ContextMode {
        match self {
            LossConditioning::OnZ => ContextMode::Raw,
            LossConditioning::OnC => ContextMode::Gated,
        }
    }
}

impl FromStr for LossConditioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on_Z" | "on_z" => Ok(LossConditioning::OnZ),
            "on_C" | "on_c" => Ok(LossConditioning::OnC),
            _ => Err(Error::config("train.loss_conditioning", format!("expected on_Z or on_C, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub trainable: BTreeSet<Group>,
    pub frozen: BTreeSet<Group>,
    pub lambda: f64,
    pub reg_sign: RegSign,
    pub context_mode: ContextMode,
    pub loss_conditioning: LossConditioning,
    pub lr: BTreeMap<Group, f64>,
    pub optimizer: AdamW,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub perturb: Option<PerturbationSpec>,
    /// Allows stages II and III to start without a prior checkpoint.
    pub cold_start: bool,
}

impl StageConfig {
    /// Defaults for `stage`.
    pub fn for_stage(stage: Stage, seed: u64) -> Self {
        let trainable: BTreeSet<Group> = match stage {
            Stage::I => [Group::Projection].into(),
            Stage::II | Stage::III => [Group::Quart, Group::Lora].into(),
        };
        let frozen = Group::ALL.into_iter().filter(|g| !trainable.contains(g)).collect();
        StageConfig {
            stage,
            trainable,
            frozen,
            lambda: if stage == Stage::III { 0.001 } else { 0.0 },
            reg_sign: RegSign::AsWritten,
            context_mode: ContextMode::Gated,
            loss_conditioning: LossConditioning::OnC,
            lr: [
                (Group::Projection, 1e-3),
                (Group::Quart, if stage == Stage::III { 1e-3 } else { 3e-3 }),
                (Group::Lora, if stage == Stage::III { 1e-3 } else { 3e-3 }),
                (Group::Decoder, 1e-5),
                (Group::Encoder, 1e-5),
            ]
            .into(),
            optimizer: AdamW::default(),
            clip_norm: None,
            steps: match stage {
                Stage::I => 500,
                Stage::II => 2000,
                Stage::III => 1000,
            },
            batch_size: 16,
            seed,
            perturb: (stage == Stage::III).then(|| PerturbationSpec::new(seed)),
            cold_start: false,
        }
    }

    /// Sets both the context mode and the matching loss conditioning.
    pub fn with_mode(mut self, mode: ContextMode) -> Self {
        self.context_mode = mode;
        self.loss_conditioning = match mode {
            ContextMode::Raw => LossConditioning::OnZ,
            ContextMode::Gated => LossConditioning::OnC,
        };
        self
    }

    pub fn lr_for(&self, g: Group) -> f64 {
        self.lr.get(&g).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(g) = self.trainable.intersection(&self.frozen).next() {
            return Err(Error::config("train.trainable", format!("group {g} is both trainable and frozen")));
        }
        if let Some(g) = Group::ALL
            .into_iter()
            .find(|g| !self.trainable.contains(g) && !self.frozen.contains(g))
        {
            return Err(Error::config("train.frozen", format!("group {g} is neither trainable nor frozen")));
        }
        let expected: BTreeSet<Group> = match self.stage {
            Stage::I => [Group::Projection].into(),
            Stage::II | Stage::III => [Group::Quart, Group::Lora].into(),
        };
        if self.trainable != expected {
            let names: Vec<_> = expected.iter().map(|g| g.name()).collect();
            return Err(Error::config(
                "train.trainable",
                format!("stage {} trains exactly {{{}}}", self.stage, names.join(", ")),
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("train.lambda", "must be a finite non-negative number"));
        }
        if self.stage != Stage::III && self.lambda != 0.0 {
            return Err(Error::config(
                "train.lambda",
                format!("stage {} runs with lambda = 0, got {}", self.stage, self.lambda),
            ));
        }
        if self.loss_conditioning.mode() != self.context_mode {
            return Err(Error::config(
                "train.loss_conditioning",
                format!(
                    "{} does not match context mode {:?}",
                    self.loss_conditioning.name(),
                    self.context_mode
                ),
            ));
        }
        if self.stage == Stage::III {
            match &self.perturb {
                Some(p) => p.validate()?,
                None => return Err(Error::config("perturb", "stage III needs a perturbation spec")),
            }
        } else if self.perturb.is_some() {
            return Err(Error::config("perturb", "only stage III perturbs its batches"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        for g in &self.trainable {
            if !(self.lr_for(*g) > 0.0) {
                return Err(Error::config(format!("train.lr.{g}"), "learning rate must be positive"));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("train.clip_norm", "must be positive"));
            }
        }
        self.optimizer.validate()
    }
}
