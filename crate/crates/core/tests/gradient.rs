use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskflip::toy::{generate_synthetic_dataset, SyntheticSpec, ToyModel, ToyModelConfig};
use taskflip::{SpeechModel, TaskTag, TokenSequence, Waveform};

const PROBES: usize = 32;
const H: f64 = 1e-5;

/// Relative error `|fd - an| / max(|fd|, |an|)` over the probed frames.
fn probe(
    model: &ToyModel,
    audio: &Waveform,
    target: &TokenSequence,
    task: TaskTag,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let an = model.teacher_forced_nll(audio, target, task).unwrap().grad;
    assert_eq!(an.len(), audio.len());
    let mut fd = Vec::with_capacity(PROBES);
    let mut picked = Vec::with_capacity(PROBES);
    for _ in 0..PROBES {
        let i = rng.gen_range(0..audio.len());
        let at = |delta: f64| {
            let mut s = audio.samples().to_vec();
            s[i] += delta;
            let w = Waveform::new(s, audio.sample_rate()).unwrap();
            model.nll(&w, target, task).unwrap()
        };
        fd.push((at(H) - at(-H)) / (2.0 * H));
        picked.push(an[i]);
    }
    let diff = fd
        .iter()
        .zip(&picked)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = fd
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(picked.iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn setup() -> (ToyModel, Vec<taskflip::toy::SyntheticUtterance>) {
    let spec = SyntheticSpec::with_alphabet(6);
    let data = generate_synthetic_dataset(&spec, 12, 3).unwrap();
    let model = ToyModel::new(ToyModelConfig::default(), spec).unwrap();
    (model, data)
}

#[test]
fn input_gradient_matches_central_differences() {
    let (model, data) = setup();
    let vocab = *model.vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (k, u) in data.iter().enumerate() {
        // even: the attack objective (translation tokens under the
        // transcribe prompt); odd: plain transcription
        let target = if k % 2 == 0 {
            TokenSequence(vocab.encode(&u.target, TaskTag::Translate))
        } else {
            TokenSequence(vocab.encode(&u.source, TaskTag::Transcribe))
        };
        let task = TaskTag::Transcribe;
        let err = probe(&model, &u.audio, &target, task, &mut rng);
        assert!(err < 1e-3, "{}: relative error {err:e}", u.id);
    }
}

#[test]
fn gradient_through_loud_prefix() {
    let (model, data) = setup();
    let vocab = *model.vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let prefix: Vec<f64> = (0..4000).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let u = &data[0];
    let audio = Waveform::new(
        [prefix, u.audio.samples().to_vec()].concat(),
        u.audio.sample_rate(),
    )
    .unwrap();
    let target = TokenSequence(vocab.encode(&u.target, TaskTag::Translate));
    let err = probe(&model, &audio, &target, TaskTag::Transcribe, &mut rng);
    assert!(err < 1e-3, "relative error {err:e}");
}

#[test]
fn forward_only_nll_matches_gradient_pass() {
    let (model, data) = setup();
    let vocab = *model.vocab();
    for u in &data[..4] {
        let t = TokenSequence(vocab.encode(&u.source, TaskTag::Transcribe));
        let full = model
            .teacher_forced_nll(&u.audio, &t, TaskTag::Transcribe)
            .unwrap();
        let fwd = model.nll(&u.audio, &t, TaskTag::Transcribe).unwrap();
        assert!((full.nll - fwd).abs() <= 1e-9 * full.nll.abs().max(1.0));
    }
}
