//! Synthetic tone-chip utterances with parallel "transcript" and
//! "translation" token sequences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ToyError;
use crate::audio::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::manifest::Split;

pub const MIN_SYMBOLS: usize = 3;
pub const MAX_SYMBOLS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub alphabet_size: usize,
    pub chip_length: usize,
    pub sample_rate: u32,
    pub tone_frequencies: Vec<f64>,
    /// `mapping[source_symbol] = target_symbol`
    pub mapping: Vec<usize>,
    pub noise_std: f64,
    pub amplitude_range: (f64, f64),
    pub train_fraction: f64,
    pub source_lang: String,
    pub target_lang: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::with_alphabet(10)
    }
}

impl SyntheticSpec {
    /// Tones at 500 Hz + 300 Hz * k, reversed symbol mapping.
    pub fn with_alphabet(alphabet_size: usize) -> Self {
        Self {
            alphabet_size,
            chip_length: 800,
            sample_rate: DEFAULT_SAMPLE_RATE,
            tone_frequencies: (0..alphabet_size)
                .map(|k| 500.0 + 300.0 * k as f64)
                .collect(),
            mapping: (0..alphabet_size).rev().collect(),
            noise_std: 0.02,
            amplitude_range: (0.3, 0.7),
            train_fraction: 0.8,
            source_lang: "src".into(),
            target_lang: "en".into(),
        }
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        let bad = |m: &str| Err(ToyError::InvalidSpec(m.to_string()));
        if self.alphabet_size == 0 {
            return bad("alphabet_size must be positive");
        }
        if self.chip_length == 0 || self.sample_rate == 0 {
            return bad("chip_length and sample_rate must be positive");
        }
        if self.tone_frequencies.len() != self.alphabet_size {
            return bad("need exactly one tone frequency per symbol");
        }
        let nyquist = f64::from(self.sample_rate) / 2.0;
        for (i, &f) in self.tone_frequencies.iter().enumerate() {
            if !(f > 0.0 && f < nyquist) {
                return bad(&format!("tone {i} at {f} Hz outside (0, {nyquist})"));
            }
            if self.tone_frequencies[..i].contains(&f) {
                return bad(&format!("tone frequency {f} Hz repeated"));
            }
        }
        if self.mapping.len() != self.alphabet_size {
            return bad("mapping must cover every source symbol");
        }
        let mut seen = vec![false; self.alphabet_size];
        for &m in &self.mapping {
            if m >= self.alphabet_size || seen[m] {
                return bad("mapping is not a bijection");
            }
            seen[m] = true;
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative");
        }
        let (lo, hi) = self.amplitude_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad("amplitude_range must satisfy 0 < lo <= hi");
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return bad("train_fraction must be in [0, 1]");
        }
        Ok(())
    }

    pub fn map_symbols(&self, source: &[usize]) -> Vec<usize> {
        source.iter().map(|&s| self.mapping[s]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUtterance {
    pub id: String,
    pub audio: Waveform,
    /// Source symbol indices, `0..alphabet_size`.
    pub source: Vec<usize>,
    /// Mapped target symbol indices.
    pub target: Vec<usize>,
    pub split: Split,
}

/// Renders a source symbol sequence as transcript text.
pub fn source_text(symbols: &[usize]) -> String {
    symbols
        .iter()
        .map(|s| format!("s{s}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Renders a target symbol sequence as translation text.
pub fn target_text(symbols: &[usize]) -> String {
    symbols
        .iter()
        .map(|s| format!("t{s}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Tone chips for the given symbols, plus Gaussian noise.
pub fn synthesize<R: Rng>(spec: &SyntheticSpec, symbols: &[usize], rng: &mut R) -> Waveform {
    let sr = f64::from(spec.sample_rate);
    let mut samples = Vec::with_capacity(symbols.len() * spec.chip_length);
    let (lo, hi) = spec.amplitude_range;
    for &s in symbols {
        let amp = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let w = std::f64::consts::TAU * spec.tone_frequencies[s] / sr;
        samples.extend((0..spec.chip_length).map(|n| amp * (w * n as f64 + phase).sin()));
    }
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).expect("valid noise std");
        for v in samples.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    Waveform::new(samples, spec.sample_rate).expect("synthesized audio is finite")
}

/// Deterministic dataset of `n` utterances; the first
/// `round(train_fraction * n)` are the train split.
pub fn generate_synthetic_dataset(
    spec: &SyntheticSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<SyntheticUtterance>, ToyError> {
    spec.validate()?;
    if n == 0 {
        return Err(ToyError::EmptyDataset);
    }
    let n_train = (spec.train_fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| {
            let len = rng.gen_range(MIN_SYMBOLS..=MAX_SYMBOLS);
            let source: Vec<usize> = (0..len)
                .map(|_| rng.gen_range(0..spec.alphabet_size))
                .collect();
            let audio = synthesize(spec, &source, &mut rng);
            SyntheticUtterance {
                id: format!("utt{i:05}"),
                target: spec.map_symbols(&source),
                source,
                audio,
                split: if i < n_train {
                    Split::Train
                } else {
                    Split::Test
                },
            }
        })
        .collect())
}
