//! Universal prepended adversarial audio segments that override the task
//! setting of multi-task speech models, plus the evaluation suite used to
//! measure them.
//!
//! The pipeline: [`toy`] provides a small trainable multi-task model behind
//! the [`adapter::SpeechModel`] contract; [`attack`] learns a single segment
//! that, prepended to any utterance, pushes the model from transcription to
//! translation; [`metrics`] and [`analysis`] score the result.

pub mod adapter;
pub mod analysis;
pub mod attack;
pub mod audio;
pub mod manifest;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod toy;

pub use adapter::{
    AdapterError, AdapterInfo, AdapterRegistry, Decoded, NllGrad, SpeechModel, TaskTag,
    TokenSequence,
};
pub use audio::{AdversarialSegment, AudioError, SegmentMeta, Waveform};
pub use manifest::{ManifestEntry, Split};
