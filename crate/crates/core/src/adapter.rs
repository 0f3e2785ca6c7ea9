//! The white-box model contract the attack is written against.
//!
//! An adapter exposes exactly two capabilities: a teacher-forced likelihood
//! with its gradient with respect to the input audio, and greedy
//! task-conditioned decoding. The decoder prompt is owned by the adapter; the
//! only decoder-side choice a caller makes is the [`TaskTag`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::Waveform;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("audio has {frames} frames, adapter accepts at most {max}")]
    AudioTooLong { frames: usize, max: usize },
    #[error("audio has {frames} frames, adapter needs at least {min}")]
    AudioTooShort { frames: usize, min: usize },
    #[error("audio sampled at {got} Hz, adapter expects {expected} Hz")]
    SampleRate { got: u32, expected: u32 },
    #[error("token id {token} at position {position} outside vocabulary of {vocab}")]
    OutOfVocabulary {
        token: u32,
        position: usize,
        vocab: usize,
    },
    #[error("empty target sequence")]
    EmptyTarget,
    #[error("task {0} not supported by this adapter")]
    UnsupportedTask(TaskTag),
    #[error("unknown adapter id {0:?}")]
    UnknownAdapter(String),
    #[error("failed to load adapter: {0}")]
    Load(String),
}

/// Decoder task selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskTag {
    #[serde(rename = "tc")]
    Transcribe,
    #[serde(rename = "tl")]
    Translate,
}

impl TaskTag {
    pub const ALL: [TaskTag; 2] = [TaskTag::Transcribe, TaskTag::Translate];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskTag::Transcribe => "tc",
            TaskTag::Translate => "tl",
        }
    }
}

impl fmt::Display for TaskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tc" | "transcribe" => Ok(TaskTag::Transcribe),
            "tl" | "translate" => Ok(TaskTag::Translate),
            other => Err(format!("unknown task {other:?}, expected tc or tl")),
        }
    }
}

/// Output token ids. Sequences produced by decoding end with the adapter's
/// end token unless the length cap was hit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

/// Negative log-likelihood of a target and its gradient with respect to
/// every input audio frame.
#[derive(Debug, Clone, PartialEq)]
pub struct NllGrad {
    pub nll: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: TokenSequence,
    /// NLL of each emitted token under the model at the step it was chosen.
    pub step_nll: Vec<f64>,
    /// False when decoding stopped at the length cap instead of the end token.
    pub terminated: bool,
}

impl Decoded {
    pub fn total_nll(&self) -> f64 {
        self.step_nll.iter().sum()
    }
}

/// Static properties an adapter declares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterInfo {
    pub id: String,
    pub vocab_size: usize,
    pub sample_rate: u32,
    pub max_audio_frames: usize,
    pub tasks: Vec<TaskTag>,
    pub source_lang: String,
}

/// Contract every attackable multi-task speech model implements.
///
/// Implementations must be deterministic for fixed inputs and model state.
/// Instances are not assumed safe for concurrent calls.
pub trait SpeechModel {
    fn info(&self) -> AdapterInfo;

    /// `-sum_m log P(y_m | y_<m, audio, task)` over every token of `target`,
    /// with one gradient entry per audio frame.
    fn teacher_forced_nll(
        &self,
        audio: &Waveform,
        target: &TokenSequence,
        task: TaskTag,
    ) -> Result<NllGrad, AdapterError>;

    /// Forward-only variant of [`SpeechModel::teacher_forced_nll`].
    fn nll(
        &self,
        audio: &Waveform,
        target: &TokenSequence,
        task: TaskTag,
    ) -> Result<f64, AdapterError> {
        self.teacher_forced_nll(audio, target, task).map(|r| r.nll)
    }

    /// Greedy autoregressive decoding under the given task.
    fn decode(&self, audio: &Waveform, task: TaskTag) -> Result<Decoded, AdapterError>;

    /// Text rendering of a token sequence, with special tokens dropped.
    fn render(&self, tokens: &TokenSequence) -> String;

    /// Checksum of the model parameters, used to assert the attack never
    /// modifies the model.
    fn param_checksum(&self) -> u64;
}

/// Shared argument validation for adapters.
pub fn check_audio(
    audio: &Waveform,
    info: &AdapterInfo,
    min_frames: usize,
) -> Result<(), AdapterError> {
    if audio.sample_rate() != info.sample_rate {
        return Err(AdapterError::SampleRate {
            got: audio.sample_rate(),
            expected: info.sample_rate,
        });
    }
    if audio.len() > info.max_audio_frames {
        return Err(AdapterError::AudioTooLong {
            frames: audio.len(),
            max: info.max_audio_frames,
        });
    }
    if audio.len() < min_frames {
        return Err(AdapterError::AudioTooShort {
            frames: audio.len(),
            min: min_frames,
        });
    }
    Ok(())
}

pub fn check_target(target: &TokenSequence, vocab: usize) -> Result<(), AdapterError> {
    if target.is_empty() {
        return Err(AdapterError::EmptyTarget);
    }
    match target.0.iter().position(|&t| t as usize >= vocab) {
        Some(position) => Err(AdapterError::OutOfVocabulary {
            token: target.0[position],
            position,
            vocab,
        }),
        None => Ok(()),
    }
}

type Loader = Box<dyn Fn(&Path) -> Result<Box<dyn SpeechModel>, AdapterError> + Send + Sync>;

/// Maps adapter ids (as used on the command line) to checkpoint loaders.
pub struct AdapterRegistry {
    loaders: BTreeMap<String, Loader>,
}

impl AdapterRegistry {
    pub fn empty() -> Self {
        Self {
            loaders: BTreeMap::new(),
        }
    }

    /// Registry with the built-in `toy` adapter.
    pub fn with_builtin() -> Self {
        let mut r = Self::empty();
        r.register("toy", |path| {
            crate::toy::ToyModel::load(path)
                .map(|m| Box::new(m) as Box<dyn SpeechModel>)
                .map_err(|e| AdapterError::Load(e.to_string()))
        });
        r
    }

    pub fn register<F>(&mut self, id: &str, loader: F)
    where
        F: Fn(&Path) -> Result<Box<dyn SpeechModel>, AdapterError> + Send + Sync + 'static,
    {
        self.loaders.insert(id.to_string(), Box::new(loader));
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.loaders.keys().map(String::as_str)
    }

    pub fn load(&self, id: &str, checkpoint: &Path) -> Result<Box<dyn SpeechModel>, AdapterError> {
        let loader = self
            .loaders
            .get(id)
            .ok_or_else(|| AdapterError::UnknownAdapter(id.to_string()))?;
        loader(checkpoint)
    }
}

impl Default for AdapterRegistry {
    fn default() -> Self {
        Self::with_builtin()
    }
}
