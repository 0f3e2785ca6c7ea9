//! Universal prepend attack: target generation on clean audio, then
//! projected adaptive-moment descent on the transcribe-mode NLL of those
//! targets with the segment prepended.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterError, SpeechModel, TaskTag, TokenSequence};
use crate::audio::{
    f32_budget, prepend, save_segment, AdversarialSegment, AudioError, SegmentMeta, Waveform,
};
use crate::optim::{Adam, AdamParams};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("no targets for utterance {0}")]
    MissingTarget(String),
    #[error("targets were decoded by a different model (checksum {targets:#x}, attacked model {model:#x})")]
    TargetModelMismatch { targets: u64, model: u64 },
    #[error("step {step}: non-finite {what}")]
    NonFinite { step: u64, what: &'static str },
    #[error("utterance {id}: {source}")]
    Adapter {
        id: String,
        #[source]
        source: AdapterError,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Named attack strengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Weak,
    Mid,
    Strong,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Weak, Preset::Mid, Preset::Strong];

    pub fn epsilon(self) -> f64 {
        match self {
            Preset::Weak => 0.02,
            Preset::Mid => 0.2,
            Preset::Strong => 2.0,
        }
    }

    pub fn duration_secs(self) -> f64 {
        match self {
            Preset::Weak | Preset::Mid => 0.64,
            Preset::Strong => 5.12,
        }
    }

    /// Segment length at the given sample rate (10,240 / 81,920 at 16 kHz).
    pub fn segment_frames(self, sample_rate: u32) -> usize {
        (self.duration_secs() * f64::from(sample_rate)).round() as usize
    }

    pub fn learning_rate(self) -> f64 {
        match self {
            Preset::Weak | Preset::Mid => 1e-3,
            Preset::Strong => 1e-2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Weak => "weak",
            Preset::Mid => "mid",
            Preset::Strong => "strong",
        }
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "weak" | "w" => Ok(Preset::Weak),
            "mid" | "m" => Ok(Preset::Mid),
            "strong" | "s" => Ok(Preset::Strong),
            other => Err(format!("unknown preset {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitMode {
    Zeros,
    /// Uniform in `[-scale * epsilon, scale * epsilon]`.
    UniformNoise {
        scale: f64,
    },
}

/// How per-utterance NLLs are combined within a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Mean of per-utterance sequence NLLs.
    PerUtterance,
    /// Total NLL over total target tokens.
    PerToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub segment_frames: usize,
    pub sample_rate: u32,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub init: InitMode,
    pub reduction: Reduction,
    pub seed: u64,
    /// Steps between checkpoints and best-segment evaluations; 0 disables.
    pub checkpoint_every: u64,
    pub preset: Option<Preset>,
}

impl AttackConfig {
    pub fn from_preset(preset: Preset, sample_rate: u32) -> Self {
        Self {
            epsilon: preset.epsilon(),
            segment_frames: preset.segment_frames(sample_rate),
            sample_rate,
            steps: 500,
            batch_size: 16,
            learning_rate: preset.learning_rate(),
            init: InitMode::UniformNoise { scale: 0.1 },
            reduction: Reduction::PerUtterance,
            seed: 0,
            checkpoint_every: 100,
            preset: Some(preset),
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |m: &str| Err(AttackError::InvalidConfig(m.to_string()));
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return bad("epsilon must be finite and non-negative");
        }
        if self.segment_frames == 0 {
            return bad("segment_frames must be positive");
        }
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if let InitMode::UniformNoise { scale } = self.init {
            if !(0.0..=1.0).contains(&scale) {
                return bad("init noise scale must be in [0, 1]");
            }
        }
        if let Some(p) = self.preset {
            if self.epsilon != p.epsilon()
                || self.segment_frames != p.segment_frames(self.sample_rate)
            {
                return bad("preset fields overridden; drop the preset name for custom budgets");
            }
        }
        Ok(())
    }
}

/// An utterance the attack trains or is evaluated on.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub audio: Waveform,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub id: String,
    pub tokens: TokenSequence,
}

/// Translate-mode decodes of clean training utterances.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TargetSet {
    pub targets: Vec<Target>,
    /// Utterances the adapter failed on, with the reason.
    pub excluded: Vec<(String, String)>,
    /// Parameter checksum of the model that decoded the targets.
    pub model_checksum: Option<u64>,
}

impl TargetSet {
    pub fn get(&self, id: &str) -> Option<&TokenSequence> {
        self.targets.iter().find(|t| t.id == id).map(|t| &t.tokens)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), AttackError> {
        write_jsonl(path, &self.targets)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, AttackError> {
        let text = fs::read_to_string(path).map_err(|source| AttackError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut targets = Vec::new();
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let t: Target = serde_json::from_str(line).map_err(|e| {
                AttackError::InvalidConfig(format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            targets.push(t);
        }
        Ok(Self {
            targets,
            ..Self::default()
        })
    }
}

/// `y_tl = decode(x, tl)` on clean audio for every utterance. Failures are
/// logged and excluded.
pub fn generate_targets(model: &dyn SpeechModel, utterances: &[Utterance]) -> TargetSet {
    if utterances.is_empty() {
        log::warn!("generate_targets called with an empty training set");
    }
    let mut set = TargetSet {
        model_checksum: Some(model.param_checksum()),
        ..TargetSet::default()
    };
    for u in utterances {
        match model.decode(&u.audio, TaskTag::Translate) {
            Ok(d) => set.targets.push(Target {
                id: u.id.clone(),
                tokens: d.tokens,
            }),
            Err(e) => {
                log::warn!("excluding {} from targets: {e}", u.id);
                set.excluded.push((u.id.clone(), e.to_string()));
            }
        }
    }
    set
}

/// One batch element: clean audio plus its translate-mode target.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub id: &'a str,
    pub audio: &'a Waveform,
    pub target: &'a TokenSequence,
}

/// Batch loss and gradient with respect to the segment samples.
pub fn batch_objective(
    model: &dyn SpeechModel,
    segment: &AdversarialSegment,
    batch: &[BatchItem<'_>],
    reduction: Reduction,
) -> Result<(f64, Vec<f64>), AttackError> {
    if batch.is_empty() {
        return Err(AttackError::EmptyBatch);
    }
    let t = segment.frames();
    let mut grad = vec![0.0; t];
    let mut total = 0.0;
    let w = match reduction {
        Reduction::PerUtterance => 1.0 / batch.len() as f64,
        Reduction::PerToken => {
            1.0 / batch.iter().map(|b| b.target.len()).sum::<usize>().max(1) as f64
        }
    };
    for item in batch {
        let x = prepend(segment, item.audio)?;
        let r = model
            .teacher_forced_nll(&x, item.target, TaskTag::Transcribe)
            .map_err(|source| AttackError::Adapter {
                id: item.id.to_string(),
                source,
            })?;
        total += w * r.nll;
        for (g, v) in grad.iter_mut().zip(&r.grad[..t]) {
            *g += w * v;
        }
    }
    Ok((total, grad))
}

/// Optimizer state for the segment.
#[derive(Debug, Clone)]
pub struct SegmentOptimizer {
    adam: Adam,
    reduction: Reduction,
}

impl SegmentOptimizer {
    pub fn new(frames: usize, reduction: Reduction) -> Self {
        Self {
            adam: Adam::new(frames, AdamParams::default()),
            reduction,
        }
    }

    /// One projected descent step on the batch NLL in transcribe mode.
    /// Only the segment is updated. Returns the pre-step batch loss.
    pub fn step(
        &mut self,
        model: &dyn SpeechModel,
        segment: &mut AdversarialSegment,
        batch: &[BatchItem<'_>],
        learning_rate: f64,
    ) -> Result<f64, AttackError> {
        let step = self.adam.steps_taken() + 1;
        let (loss, grad) = batch_objective(model, segment, batch, self.reduction)?;
        if !loss.is_finite() {
            return Err(AttackError::NonFinite { step, what: "loss" });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(AttackError::NonFinite {
                step,
                what: "gradient",
            });
        }
        let dir = self.adam.direction(&grad);
        let updated: Vec<f32> = segment
            .samples()
            .iter()
            .zip(&dir)
            .map(|(&s, d)| (f64::from(s) - learning_rate * d) as f32)
            .collect();
        segment.set_samples(updated)?;
        Ok(loss)
    }
}

/// Stand-alone form of a single step with a fresh optimizer state.
pub fn attack_step(
    model: &dyn SpeechModel,
    segment: &AdversarialSegment,
    batch: &[BatchItem<'_>],
    learning_rate: f64,
) -> Result<AdversarialSegment, AttackError> {
    let mut out = segment.clone();
    SegmentOptimizer::new(segment.frames(), Reduction::PerUtterance).step(
        model,
        &mut out,
        batch,
        learning_rate,
    )?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub mean_nll: f64,
    pub linf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub step: u64,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
    pub batches: Vec<BatchLog>,
    /// Full training-set mean NLL at each evaluation point `(step, nll)`.
    pub evaluations: Vec<(u64, f64)>,
    /// Step whose segment was returned.
    pub best_step: u64,
}

impl TrainingTrace {
    pub fn write(&self, dir: &Path) -> Result<(), AttackError> {
        write_jsonl(&dir.join("trace.jsonl"), &self.rows)?;
        write_jsonl(&dir.join("batches.jsonl"), &self.batches)
    }

    /// Every id that appeared in any training batch.
    pub fn batch_ids(&self) -> HashSet<&str> {
        self.batches
            .iter()
            .flat_map(|b| b.ids.iter().map(String::as_str))
            .collect()
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), AttackError> {
    let io = |source| AttackError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r).expect("row serializes")).map_err(io)?;
    }
    f.flush().map_err(io)
}

/// Where to persist intermediate state.
#[derive(Debug, Clone, Default)]
pub struct CheckpointSink {
    pub dir: Option<PathBuf>,
}

pub fn initial_segment(
    config: &AttackConfig,
    meta: SegmentMeta,
) -> Result<AdversarialSegment, AttackError> {
    let samples = match config.init {
        InitMode::Zeros => vec![0.0f32; config.segment_frames],
        InitMode::UniformNoise { scale } => {
            let bound = f64::from(f32_budget(config.epsilon)) * scale;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x1417);
            (0..config.segment_frames)
                .map(|_| {
                    if bound > 0.0 {
                        rng.gen_range(-bound..=bound) as f32
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    };
    Ok(AdversarialSegment::projected(
        samples,
        config.sample_rate,
        config.epsilon,
        meta,
    )?)
}

/// Mean transcribe-mode NLL of the targets with the segment prepended.
pub fn mean_nll(
    model: &dyn SpeechModel,
    segment: &AdversarialSegment,
    items: &[BatchItem<'_>],
) -> Result<f64, AttackError> {
    let mut total = 0.0;
    for item in items {
        let x = prepend(segment, item.audio)?;
        total += model
            .nll(&x, item.target, TaskTag::Transcribe)
            .map_err(|source| AttackError::Adapter {
                id: item.id.to_string(),
                source,
            })?;
    }
    Ok(total / items.len().max(1) as f64)
}

/// Learns one segment over `utterances` (the training split).
///
/// Mini-batches come from a seeded shuffle. Every `checkpoint_every` steps
/// (and at the end) the segment is scored on the whole training set; the
/// best-scoring segment is returned. When `sink.dir` is set, the segment
/// and trace are written there at each checkpoint, so a failed run keeps
/// its progress.
pub fn train_universal_segment(
    model: &dyn SpeechModel,
    config: &AttackConfig,
    utterances: &[Utterance],
    targets: &TargetSet,
    sink: &CheckpointSink,
) -> Result<(AdversarialSegment, TrainingTrace), AttackError> {
    config.validate()?;
    let checksum = model.param_checksum();
    if let Some(t) = targets.model_checksum.filter(|&t| t != checksum) {
        return Err(AttackError::TargetModelMismatch {
            targets: t,
            model: checksum,
        });
    }
    let info = model.info();
    let meta = |steps| SegmentMeta {
        model_id: info.id.clone(),
        source_lang: info.source_lang.clone(),
        steps,
    };
    let mut items = Vec::new();
    for u in utterances {
        match targets.get(&u.id) {
            Some(t) => items.push(BatchItem {
                id: &u.id,
                audio: &u.audio,
                target: t,
            }),
            None if targets.excluded.iter().any(|(id, _)| id == &u.id) => {}
            None => return Err(AttackError::MissingTarget(u.id.clone())),
        }
    }
    let mut segment = initial_segment(config, meta(0))?;
    let mut trace = TrainingTrace::default();
    if config.steps == 0 || items.is_empty() {
        if items.is_empty() && config.steps > 0 {
            log::warn!("no training utterances with targets; returning the initial segment");
        }
        return Ok((segment, trace));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut cursor = order.len();
    let mut opt = SegmentOptimizer::new(segment.frames(), config.reduction);
    let mut best = (mean_nll(model, &segment, &items)?, segment.clone(), 0u64);
    trace.evaluations.push((0, best.0));

    let persist = |seg: &AdversarialSegment, trace: &TrainingTrace| -> Result<(), AttackError> {
        if let Some(dir) = &sink.dir {
            save_segment(seg, &dir.join("checkpoint"))?;
            trace.write(dir)?;
        }
        Ok(())
    };

    for step in 1..=config.steps {
        let b = config.batch_size.min(items.len());
        let mut batch = Vec::with_capacity(b);
        for _ in 0..b {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(items[order[cursor]]);
            cursor += 1;
        }
        let loss = match opt.step(model, &mut segment, &batch, config.learning_rate) {
            Ok(l) => l,
            Err(e) => {
                persist(&segment, &trace)?;
                return Err(e);
            }
        };
        segment.meta = meta(step);
        let linf = segment.linf();
        debug_assert!(linf <= config.epsilon);
        trace.rows.push(TraceRow {
            step,
            mean_nll: loss,
            linf,
        });
        trace.batches.push(BatchLog {
            step,
            ids: batch.iter().map(|b| b.id.to_string()).collect(),
        });
        let at_checkpoint = config.checkpoint_every > 0 && step % config.checkpoint_every == 0;
        if at_checkpoint || step == config.steps {
            let score = mean_nll(model, &segment, &items)?;
            trace.evaluations.push((step, score));
            log::info!("attack step {step}: batch nll {loss:.4}, train nll {score:.4}");
            if score < best.0 {
                best = (score, segment.clone(), step);
            }
            persist(&segment, &trace)?;
        }
    }
    trace.best_step = best.2;
    Ok((best.1, trace))
}
