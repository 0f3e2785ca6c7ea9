//! Shared fixtures for the criterion benches.

use taskflip::attack::{initial_segment, AttackConfig, Preset, Target};
use taskflip::toy::{
    generate_synthetic_dataset, SyntheticSpec, SyntheticUtterance, ToyModel, ToyModelConfig,
};
use taskflip::{AdversarialSegment, SegmentMeta, TaskTag, TokenSequence};

/// An untrained toy model with a handful of utterances and
/// translate-mode targets. Timing does not depend on the weights.
pub struct Fixture {
    pub model: ToyModel,
    pub data: Vec<SyntheticUtterance>,
    pub targets: Vec<Target>,
}

impl Fixture {
    pub fn new(n: usize) -> Self {
        let spec = SyntheticSpec::with_alphabet(10);
        let data = generate_synthetic_dataset(&spec, n, 0).expect("valid spec");
        let model = ToyModel::new(ToyModelConfig::default(), spec).expect("valid config");
        let vocab = *model.vocab();
        let targets = data
            .iter()
            .map(|u| Target {
                id: u.id.clone(),
                tokens: TokenSequence(vocab.encode(&u.target, TaskTag::Translate)),
            })
            .collect();
        Self {
            model,
            data,
            targets,
        }
    }

    pub fn segment(&self, preset: Preset) -> AdversarialSegment {
        let config = AttackConfig::from_preset(preset, 16_000);
        initial_segment(&config, SegmentMeta::default()).expect("valid preset")
    }
}

/// Space-separated words `w{i % vocab}` with a pseudo-random stride.
pub fn words(n: usize, vocab: usize, salt: usize) -> String {
    (0..n)
        .map(|i| format!("w{}", (i * 7 + salt * 13 + i * i * salt) % vocab))
        .collect::<Vec<_>>()
        .join(" ")
}
