//! Synthetic synchronized video/audio/sensor streams, their encoders and
//! projection heads, and assembly into one token matrix.

mod dataset;
mod encode;
mod generate;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{load_dataset, read_manifest, save_dataset, Dataset, DatasetMeta, ManifestRecord, DATASET_VERSION};
pub use encode::{
    assemble, assemble_nodes, encode, project, project_nodes, BlockLayout, EncoderParams,
    ProjectionNodes, ProjectionParams, TokenSequence,
};
pub use generate::{gen_sample, generate_dataset, rule_answer, stream_class, StreamConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Audio,
    Sensor,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Video, Modality::Audio, Modality::Sensor];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Video => "video",
            Modality::Audio => "audio",
            Modality::Sensor => "sensor",
        }
    }

    pub fn letter(self) -> char {
        match self {
            Modality::Video => 'V',
            Modality::Audio => 'A',
            Modality::Sensor => 'S',
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One modality's frames, `len x dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RawStream {
    modality: Modality,
    frames: Vec<f64>,
    len: usize,
    dim: usize,
    pub sample_rate: f64,
}

impl RawStream {
    pub fn new(modality: Modality, len: usize, dim: usize, frames: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(Error::Input(format!("{modality} stream needs at least one frame and channel")));
        }
        if frames.len() != len * dim {
            return Err(Error::dim("raw_stream", &[len, dim], &[frames.len()]));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("{modality} stream has non-finite values")));
        }
        Ok(RawStream {
            modality,
            frames,
            len,
            dim,
            sample_rate,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frames(&self) -> &[f64] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    /// Same modality and geometry with new frame values.
    pub fn with_frames(&self, frames: Vec<f64>) -> Result<Self> {
        RawStream::new(self.modality, self.len, self.dim, frames, self.sample_rate)
    }

    pub fn bit_eq(&self, other: &RawStream) -> bool {
        self.modality == other.modality
            && self.len == other.len
            && self.dim == other.dim
            && self
                .frames
                .iter()
                .zip(&other.frames)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Question families. Each plants the answer into its relevant streams and a
/// different answer into every other stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "visual-action")]
    VisualAction,
    #[serde(rename = "sound-source")]
    SoundSource,
    #[serde(rename = "motion-only")]
    MotionOnly,
    #[serde(rename = "fall-impact")]
    FallImpact,
    #[serde(rename = "speech-gesture")]
    SpeechGesture,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::VisualAction,
        Scenario::SoundSource,
        Scenario::MotionOnly,
        Scenario::FallImpact,
        Scenario::SpeechGesture,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Scenario::VisualAction => "visual-action",
            Scenario::SoundSource => "sound-source",
            Scenario::MotionOnly => "motion-only",
            Scenario::FallImpact => "fall-impact",
            Scenario::SpeechGesture => "speech-gesture",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Ground-truth relevant modalities, in canonical order.
    pub fn relevant(self) -> &'static [Modality] {
        match self {
            Scenario::VisualAction => &[Modality::Video],
            Scenario::SoundSource => &[Modality::Audio],
            Scenario::MotionOnly => &[Modality::Sensor],
            Scenario::FallImpact => &[Modality::Audio, Modality::Sensor],
            Scenario::SpeechGesture => &[Modality::Video, Modality::Audio],
        }
    }

    pub fn depends_on(self, m: Modality) -> bool {
        self.relevant().contains(&m)
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.id() == s)
            .ok_or_else(|| Error::config("scenario", format!("unknown scenario `{s}`")))
    }
}

/// Token ids of the shared decoder vocabulary.
pub mod vocab {
    use super::{Modality, Scenario};

    pub const PAD: usize = 0;
    /// Terminates an answer.
    pub const EOA: usize = 1;
    pub const CAPTION: usize = 2;
    const MODALITY_BASE: usize = 3;
    pub const ANSWER_BASE: usize = 6;
    pub const NUM_ANSWERS: usize = 4;
    pub const ASK: usize = 10;
    const TOPIC_BASE: usize = 11;
    pub const PHRASINGS: usize = 2;
    const FILLER_BASE: usize = 21;
    pub const FILLERS: usize = 8;
    /// Smallest vocabulary that holds every reserved id.
    pub const MIN_VOCAB: usize = FILLER_BASE + FILLERS;

    pub fn modality_token(m: Modality) -> usize {
        MODALITY_BASE + m.index()
    }

    pub fn answer_token(class: usize) -> usize {
        ANSWER_BASE + class
    }

    pub fn answer_class(token: usize) -> Option<usize> {
        (ANSWER_BASE..ANSWER_BASE + NUM_ANSWERS)
            .contains(&token)
            .then(|| token - ANSWER_BASE)
    }

    pub fn topic_token(s: Scenario, phrasing: usize) -> usize {
        TOPIC_BASE + s.index() * PHRASINGS + phrasing
    }

    pub fn filler_token(i: usize) -> usize {
        FILLER_BASE + i
    }

    pub fn answer_tokens() -> Vec<usize> {
        (0..NUM_ANSWERS).map(answer_token).collect()
    }
}

/// Synchronized streams plus a question, its answer, and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub sample_id: u64,
    pub video: RawStream,
    pub audio: RawStream,
    pub sensor: RawStream,
    pub query_tokens: Vec<usize>,
    pub answer_tokens: Vec<usize>,
    pub relevant_modality: Vec<Modality>,
    pub scenario: Scenario,
    pub seed: u64,
    /// Class planted into each stream, in `Modality::ALL` order.
    pub stream_classes: [usize; 3],
}

impl MultimodalSample {
    pub fn stream(&self, m: Modality) -> &RawStream {
        match m {
            Modality::Video => &self.video,
            Modality::Audio => &self.audio,
            Modality::Sensor => &self.sensor,
        }
    }

    pub fn stream_mut(&mut self, m: Modality) -> &mut RawStream {
        match m {
            Modality::Video => &mut self.video,
            Modality::Audio => &mut self.audio,
            Modality::Sensor => &mut self.sensor,
        }
    }

    pub fn answer_class(&self) -> usize {
        vocab::answer_class(self.answer_tokens[0]).expect("answer token in closed set")
    }

    pub fn bit_eq(&self, other: &MultimodalSample) -> bool {
        Modality::ALL
            .iter()
            .all(|&m| self.stream(m).bit_eq(other.stream(m)))
            && self.query_tokens == other.query_tokens
            && self.answer_tokens == other.answer_tokens
            && self.relevant_modality == other.relevant_modality
            && self.scenario == other.scenario
            && self.seed == other.seed
            && self.stream_classes == other.stream_classes
    }
}
