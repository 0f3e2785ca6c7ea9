use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use taskflip::attack::{batch_objective, BatchItem, Preset, Reduction};
use taskflip::audio::prepend;
use taskflip::metrics::{corpus_bleu, wer_text};
use taskflip::{SpeechModel, TaskTag};
use taskflip_bench::{words, Fixture};

fn metrics(c: &mut Criterion) {
    let refs: Vec<String> = (0..100).map(|i| words(25, 40, i)).collect();
    let hyps: Vec<String> = (0..100).map(|i| words(28, 40, i + 1)).collect();
    c.bench_function("wer/25_words", |b| {
        b.iter(|| wer_text(black_box(&refs[0]), black_box(&hyps[0])).unwrap())
    });
    c.bench_function("bleu/100_sentences", |b| {
        b.iter(|| corpus_bleu(black_box(&refs), black_box(&hyps)).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let f = Fixture::new(4);
    let u = &f.data[0];
    let t = &f.targets[0].tokens;
    c.bench_function("toy/decode", |b| {
        b.iter(|| {
            f.model
                .decode(black_box(&u.audio), TaskTag::Transcribe)
                .unwrap()
        })
    });
    c.bench_function("toy/nll", |b| {
        b.iter(|| {
            f.model
                .nll(black_box(&u.audio), t, TaskTag::Transcribe)
                .unwrap()
        })
    });
    c.bench_function("toy/nll_and_grad", |b| {
        b.iter(|| {
            f.model
                .teacher_forced_nll(black_box(&u.audio), t, TaskTag::Transcribe)
                .unwrap()
        })
    });
}

fn attack(c: &mut Criterion) {
    let f = Fixture::new(8);
    let batch: Vec<BatchItem> = f
        .data
        .iter()
        .zip(&f.targets)
        .map(|(u, t)| BatchItem {
            id: &u.id,
            audio: &u.audio,
            target: &t.tokens,
        })
        .collect();
    let mut g = c.benchmark_group("attack/batch_objective_8");
    g.sample_size(20);
    for preset in [Preset::Weak, Preset::Strong] {
        let seg = f.segment(preset);
        g.bench_with_input(
            BenchmarkId::from_parameter(preset.as_str()),
            &seg,
            |b, seg| {
                b.iter(|| batch_objective(&f.model, seg, &batch, Reduction::PerUtterance).unwrap())
            },
        );
    }
    g.finish();
    let seg = f.segment(Preset::Strong);
    c.bench_function("audio/prepend_strong", |b| {
        b.iter(|| prepend(black_box(&seg), &f.data[0].audio).unwrap())
    });
}

criterion_group!(benches, metrics, model, attack);
criterion_main!(benches);
