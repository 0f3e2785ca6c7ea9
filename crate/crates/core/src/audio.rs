//! Raw-float waveforms, the prepend operation, l-infinity projection and the
//! segment file format (`<name>.f32le` payload + `<name>.json` sidecar).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_like::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("sample rate mismatch: segment is {segment} Hz, audio is {audio} Hz")]
    SampleRateMismatch { segment: u32, audio: u32 },
    #[error("sample rate must be positive")]
    ZeroSampleRate,
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("epsilon must be a finite non-negative number, got {0}")]
    BadEpsilon(f64),
    #[error("segment sample {index} has magnitude {value} above epsilon {epsilon}")]
    BudgetViolation {
        index: usize,
        value: f64,
        epsilon: f64,
    },
    #[error("payload holds {payload} frames but sidecar declares {declared}")]
    FrameCountMismatch { payload: usize, declared: usize },
    #[error("payload length {0} bytes is not a multiple of 4")]
    TruncatedPayload(usize),
    #[error("corrupt segment sidecar {path}: {source}")]
    CorruptSidecar {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported wav format: {0}")]
    UnsupportedWav(String),
    #[error("wav error in {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AudioError + '_ {
    move |source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Sampled audio in the raw float domain. No normalization is ever applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::ZeroSampleRate);
        }
        check_finite(&samples)?;
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(frames: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; frames],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

fn check_finite<F: Float>(samples: &[F]) -> Result<(), AudioError> {
    match samples.iter().position(|s| !s.is_finite()) {
        Some(i) => Err(AudioError::NonFinite(i)),
        None => Ok(()),
    }
}

/// Provenance carried alongside a trained segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SegmentMeta {
    pub model_id: String,
    pub source_lang: String,
    pub steps: u64,
}

/// The trainable prepend audio. Samples are held at binary32 precision, the
/// precision of the on-disk payload, and always satisfy `max|s| <= epsilon`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialSegment {
    samples: Vec<f32>,
    sample_rate: u32,
    epsilon: f64,
    pub meta: SegmentMeta,
}

impl AdversarialSegment {
    /// Builds a segment, rejecting samples outside the amplitude budget.
    pub fn new(
        samples: Vec<f32>,
        sample_rate: u32,
        epsilon: f64,
        meta: SegmentMeta,
    ) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::ZeroSampleRate);
        }
        check_epsilon(epsilon)?;
        check_finite(&samples)?;
        if let Some((index, value)) = samples
            .iter()
            .enumerate()
            .map(|(i, s)| (i, f64::from(s.abs())))
            .find(|&(_, v)| v > epsilon)
        {
            return Err(AudioError::BudgetViolation {
                index,
                value,
                epsilon,
            });
        }
        Ok(Self {
            samples,
            sample_rate,
            epsilon,
            meta,
        })
    }

    /// Builds a segment from arbitrary finite samples by projecting them
    /// into the budget first.
    pub fn projected(
        mut samples: Vec<f32>,
        sample_rate: u32,
        epsilon: f64,
        meta: SegmentMeta,
    ) -> Result<Self, AudioError> {
        check_epsilon(epsilon)?;
        check_finite(&samples)?;
        clamp_in_place(&mut samples, f32_budget(epsilon));
        Self::new(samples, sample_rate, epsilon, meta)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn frames(&self) -> usize {
        self.samples.len()
    }

    pub fn linf(&self) -> f64 {
        linf_norm(&self.samples)
    }

    /// Replaces the samples, projecting onto the budget.
    pub fn set_samples(&mut self, mut samples: Vec<f32>) -> Result<(), AudioError> {
        check_finite(&samples)?;
        clamp_in_place(&mut samples, f32_budget(self.epsilon));
        self.samples = samples;
        Ok(())
    }

    pub fn to_waveform(&self) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|&s| f64::from(s)).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

fn check_epsilon(epsilon: f64) -> Result<(), AudioError> {
    if epsilon.is_finite() && epsilon >= 0.0 {
        Ok(())
    } else {
        Err(AudioError::BadEpsilon(epsilon))
    }
}

/// Largest binary32 value not exceeding `epsilon`; clamping at it keeps the
/// budget exact when compared in double precision.
pub fn f32_budget(epsilon: f64) -> f32 {
    let b = epsilon as f32;
    if f64::from(b) > epsilon && b > 0.0 {
        f32::from_bits(b.to_bits() - 1)
    } else {
        b
    }
}

fn clamp_in_place<F: Float>(samples: &mut [F], bound: F) {
    for s in samples.iter_mut() {
        *s = s.max(-bound).min(bound);
    }
}

pub fn linf_norm<F: Float>(samples: &[F]) -> f64 {
    samples.iter().map(|s| s.abs().to_f64()).fold(0.0, f64::max)
}

/// Concatenates the segment and the audio in the raw sample domain.
pub fn prepend(segment: &AdversarialSegment, audio: &Waveform) -> Result<Waveform, AudioError> {
    if segment.sample_rate != audio.sample_rate {
        return Err(AudioError::SampleRateMismatch {
            segment: segment.sample_rate,
            audio: audio.sample_rate,
        });
    }
    let mut samples = Vec::with_capacity(segment.frames() + audio.len());
    samples.extend(segment.samples.iter().map(|&s| f64::from(s)));
    samples.extend_from_slice(&audio.samples);
    Ok(Waveform {
        samples,
        sample_rate: audio.sample_rate,
    })
}

/// Element-wise clamp to `[-epsilon, epsilon]`.
pub fn project_linf<F: Float>(samples: &[F], epsilon: F) -> Result<Vec<F>, AudioError> {
    let eps = epsilon.to_f64();
    check_epsilon(eps)?;
    check_finite(samples)?;
    let mut out = samples.to_vec();
    clamp_in_place(&mut out, epsilon);
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    frames: usize,
    sample_rate: u32,
    epsilon: f64,
    model_id: String,
    source_lang: String,
    steps: u64,
}

/// The two files making up a stored segment, derived from a stem path.
pub fn segment_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("f32le"), stem.with_extension("json"))
}

/// Writes `<stem>.f32le` and `<stem>.json`.
pub fn save_segment(segment: &AdversarialSegment, stem: &Path) -> Result<(), AudioError> {
    let (payload_path, sidecar_path) = segment_paths(stem);
    let mut payload = Vec::with_capacity(segment.frames() * 4);
    for s in &segment.samples {
        payload.extend_from_slice(&s.to_le_bytes());
    }
    fs::write(&payload_path, payload).map_err(io_err(&payload_path))?;
    let sidecar = Sidecar {
        frames: segment.frames(),
        sample_rate: segment.sample_rate,
        epsilon: segment.epsilon,
        model_id: segment.meta.model_id.clone(),
        source_lang: segment.meta.source_lang.clone(),
        steps: segment.meta.steps,
    };
    let mut f = fs::File::create(&sidecar_path).map_err(io_err(&sidecar_path))?;
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    f.write_all(text.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(io_err(&sidecar_path))?;
    Ok(())
}

/// Reads a segment written by [`save_segment`]. Accepts either the stem or
/// the path of one of the two files.
pub fn load_segment(path: &Path) -> Result<AdversarialSegment, AudioError> {
    let (payload_path, sidecar_path) = segment_paths(path);
    let text = fs::read_to_string(&sidecar_path).map_err(io_err(&sidecar_path))?;
    let sidecar: Sidecar =
        serde_json::from_str(&text).map_err(|source| AudioError::CorruptSidecar {
            path: sidecar_path.clone(),
            source,
        })?;
    let bytes = fs::read(&payload_path).map_err(io_err(&payload_path))?;
    if bytes.len() % 4 != 0 {
        return Err(AudioError::TruncatedPayload(bytes.len()));
    }
    let samples: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if samples.len() != sidecar.frames {
        return Err(AudioError::FrameCountMismatch {
            payload: samples.len(),
            declared: sidecar.frames,
        });
    }
    AdversarialSegment::new(
        samples,
        sidecar.sample_rate,
        sidecar.epsilon,
        SegmentMeta {
            model_id: sidecar.model_id,
            source_lang: sidecar.source_lang,
            steps: sidecar.steps,
        },
    )
}

/// Reads a mono PCM WAV. 16-bit integer samples are divided by 32768;
/// float32 samples are taken as-is.
pub fn read_wav(path: &Path) -> Result<Waveform, AudioError> {
    let wav_err = |source| AudioError::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(AudioError::UnsupportedWav(format!(
            "{} channels",
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(AudioError::UnsupportedWav(format!("{fmt:?} {bits}-bit")));
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a mono float32 WAV.
pub fn write_wav(path: &Path, audio: &Waveform) -> Result<(), AudioError> {
    let wav_err = |source| AudioError::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &audio.samples {
        writer.write_sample(s as f32).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

/// Minimal float abstraction so projection and norms work on both the f32
/// segment payload and f64 waveforms.
pub mod num_like {
    pub trait Float: Copy + PartialOrd + std::ops::Neg<Output = Self> {
        fn is_finite(self) -> bool;
        fn abs(self) -> Self;
        fn max(self, other: Self) -> Self;
        fn min(self, other: Self) -> Self;
        fn to_f64(self) -> f64;
    }

    macro_rules! impl_float {
        ($t:ty) => {
            impl Float for $t {
                fn is_finite(self) -> bool {
                    <$t>::is_finite(self)
                }
                fn abs(self) -> Self {
                    <$t>::abs(self)
                }
                fn max(self, other: Self) -> Self {
                    <$t>::max(self, other)
                }
                fn min(self, other: Self) -> Self {
                    <$t>::min(self, other)
                }
                fn to_f64(self) -> f64 {
                    self as f64
                }
            }
        };
    }

    impl_float!(f32);
    impl_float!(f64);
}
