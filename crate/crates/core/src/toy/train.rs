//! Deterministic training loop for the toy model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::frontend::Features;
use super::model::{ToyModel, ToyModelConfig};
use super::{SyntheticSpec, SyntheticUtterance, ToyError};
use crate::adapter::TaskTag;
use crate::optim::{Adam, AdamParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCheck {
    pub step: usize,
    pub loss: f64,
    pub sequence_accuracy_tc: f64,
    pub sequence_accuracy_tl: f64,
    pub token_accuracy_tc: f64,
    pub token_accuracy_tl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// True when held-out accuracy reached the target on both tasks before
    /// the step cap.
    pub converged: bool,
    pub heldout_utterances: usize,
    pub checks: Vec<TrainCheck>,
}

impl TrainReport {
    pub fn last(&self) -> Option<&TrainCheck> {
        self.checks.last()
    }
}

struct Example {
    feats: Features,
    tc: Vec<u32>,
    tl: Vec<u32>,
}

/// Sequence and token accuracy of greedy decoding on `examples`.
fn accuracy(model: &ToyModel, examples: &[Example]) -> (f64, f64, f64, f64) {
    let mut seq = [0usize; 2];
    let mut tok = [0usize; 2];
    let mut tok_total = [0usize; 2];
    for ex in examples {
        let enc = model.encode(ex.feats.clone());
        for (i, (task, want)) in [(TaskTag::Transcribe, &ex.tc), (TaskTag::Translate, &ex.tl)]
            .into_iter()
            .enumerate()
        {
            let got = model.greedy(&enc, task).tokens.0;
            if &got == want {
                seq[i] += 1;
            }
            tok[i] += want.iter().zip(&got).filter(|(a, b)| a == b).count();
            tok_total[i] += want.len();
        }
    }
    let n = examples.len().max(1) as f64;
    (
        seq[0] as f64 / n,
        seq[1] as f64 / n,
        tok[0] as f64 / tok_total[0].max(1) as f64,
        tok[1] as f64 / tok_total[1].max(1) as f64,
    )
}

/// Trains until held-out sequence accuracy reaches
/// `config.target_accuracy` on both tasks or `config.max_steps` is hit.
/// Non-convergence is reported in the returned model's [`TrainReport`] and
/// logged as a warning.
pub fn train_toy_model(
    config: ToyModelConfig,
    spec: SyntheticSpec,
    dataset: &[SyntheticUtterance],
) -> Result<ToyModel, ToyError> {
    if dataset.is_empty() {
        return Err(ToyError::EmptyDataset);
    }
    let mut model = ToyModel::new(config.clone(), spec.clone())?;
    let vocab = *model.vocab();
    let mut examples = Vec::with_capacity(dataset.len());
    for u in dataset {
        if u.audio.sample_rate() != spec.sample_rate {
            return Err(ToyError::BadUtterance {
                id: u.id.clone(),
                reason: format!("sample rate {} Hz", u.audio.sample_rate()),
            });
        }
        if u.source
            .iter()
            .chain(&u.target)
            .any(|&s| s >= spec.alphabet_size)
        {
            return Err(ToyError::BadUtterance {
                id: u.id.clone(),
                reason: "symbol outside alphabet".into(),
            });
        }
        examples.push(Example {
            feats: model.frontend().forward(u.audio.samples()),
            tc: vocab.encode(&u.source, TaskTag::Transcribe),
            tl: vocab.encode(&u.target, TaskTag::Translate),
        });
    }
    let n_heldout = if examples.len() >= 2 {
        ((examples.len() as f64 * config.heldout_fraction).round() as usize)
            .clamp(1, examples.len() - 1)
    } else {
        0
    };
    let heldout = examples.split_off(examples.len() - n_heldout);
    let train = examples;
    let eval_set: &[Example] = if heldout.is_empty() { &train } else { &heldout };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_70e1);
    let mut opt = Adam::new(model.n_params(), AdamParams::default());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut checks = Vec::new();
    let mut converged = false;
    let mut steps = 0;
    let mut running_loss = 0.0;
    let mut loss_count = 0usize;

    while steps < config.max_steps {
        let mut grad = vec![0.0; model.n_params()];
        let b = config.batch_size.min(train.len());
        let mut batch_loss = 0.0;
        for _ in 0..b {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &train[order[cursor]];
            cursor += 1;
            let (feats, labels) = augment(&model, &config, &spec, ex, &mut rng);
            let enc = model.encode(feats);
            let n = labels.len() as f64;
            let vad_grad: Vec<f64> = enc
                .activity
                .iter()
                .zip(&labels)
                .map(|(a, l)| config.vad_weight * (a - l) / (n * b as f64))
                .collect();
            batch_loss += config.vad_weight
                * enc
                    .activity
                    .iter()
                    .zip(&labels)
                    .map(|(a, l)| bce(*a, *l))
                    .sum::<f64>()
                / n;
            for (i, (task, tokens)) in [(TaskTag::Transcribe, &ex.tc), (TaskTag::Translate, &ex.tl)]
                .into_iter()
                .enumerate()
            {
                let scale = 1.0 / (2.0 * b as f64 * tokens.len() as f64);
                let (nll, _) = model.teacher_forced(
                    &enc,
                    tokens,
                    task,
                    scale,
                    Some(&mut grad),
                    false,
                    (i == 0).then_some(vad_grad.as_slice()),
                );
                batch_loss += nll / (2.0 * tokens.len() as f64);
            }
        }
        clip(&mut grad, config.grad_clip);
        opt.step(&mut model.params, &grad, config.learning_rate);
        steps += 1;
        running_loss += batch_loss / b as f64;
        loss_count += 1;

        if steps % config.eval_every == 0 || steps == config.max_steps {
            let (sa_tc, sa_tl, ta_tc, ta_tl) = accuracy(&model, eval_set);
            let check = TrainCheck {
                step: steps,
                loss: running_loss / loss_count as f64,
                sequence_accuracy_tc: sa_tc,
                sequence_accuracy_tl: sa_tl,
                token_accuracy_tc: ta_tc,
                token_accuracy_tl: ta_tl,
            };
            log::info!(
                "step {steps}: loss {:.4} heldout seq acc tc {:.3} tl {:.3}",
                check.loss,
                sa_tc,
                sa_tl
            );
            checks.push(check);
            running_loss = 0.0;
            loss_count = 0;
            converged = sa_tc >= config.target_accuracy && sa_tl >= config.target_accuracy;
            if converged && steps >= config.min_steps {
                break;
            }
        }
    }
    if !converged {
        log::warn!(
            "toy model did not reach {:.0}% held-out accuracy within {} steps; model is degraded",
            config.target_accuracy * 100.0,
            config.max_steps
        );
    }
    model.set_training_report(TrainReport {
        steps,
        converged,
        heldout_utterances: heldout.len(),
        checks,
    });
    Ok(model)
}

fn bce(a: f64, label: f64) -> f64 {
    let a = a.clamp(1e-12, 1.0 - 1e-12);
    -(label * a.ln() + (1.0 - label) * (1.0 - a).ln())
}

/// Optionally prepends and appends non-speech frames (quiet or loud
/// broadband noise) so the model learns to ignore them. Returns features and per-frame speech labels.
fn augment(
    model: &ToyModel,
    config: &ToyModelConfig,
    spec: &SyntheticSpec,
    ex: &Example,
    rng: &mut ChaCha8Rng,
) -> (Features, Vec<f64>) {
    let speech = ex.feats.n_frames;
    if config.max_pad_frames == 0 || !rng.gen_bool(config.pad_probability.clamp(0.0, 1.0)) {
        return (ex.feats.clone(), vec![1.0; speech]);
    }
    let lead = rng.gen_range(1..=config.max_pad_frames);
    let tail = rng.gen_range(0..=config.max_pad_frames / 8);
    let loud = rng.gen_bool(config.loud_pad_probability.clamp(0.0, 1.0));
    let max_std = if loud {
        config.loud_noise_max
    } else {
        config.pad_noise_max
    };
    let std = rng.gen_range(0.0..=max_std.max(spec.noise_std));
    let mut quiet = |frames: usize| {
        let mut x = vec![0.0; frames * config.frame_len];
        if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("valid std");
            for v in x.iter_mut() {
                *v = normal.sample(rng);
            }
        }
        model.frontend().forward(&x)
    };
    let head = quiet(lead);
    let back = quiet(tail);
    let feats = head.concat(&ex.feats).concat(&back);
    let mut labels = vec![0.0; lead];
    labels.extend(std::iter::repeat_n(1.0, speech));
    labels.extend(std::iter::repeat_n(0.0, tail));
    (feats, labels)
}

fn clip(grad: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}
