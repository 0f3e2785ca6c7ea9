//! Small encoder-decoder with a task-conditioned autoregressive decoder.
//!
//! Encoder: fixed tone front-end, then a per-frame tanh MLP producing frame
//! states `z_t`. A voice-activity head `a_t = sigmoid(v . z_t + b)` drives a
//! running position `p_t` (in chips); decode step `m` reads the frames near
//! position `m + 0.5` through a Gaussian pointer.
//!
//! The prompt `embed(start) + embed(lang) + embed(task)` does not feed the
//! decoder directly. It queries one softmax attention whose memory holds
//! the prompt itself plus every audio frame, and the pooled summary `g` is
//! the decoder's only view of the task.
//!
//! Decoder step input: `[embed(prev), pointer context, pointer mass, g]`,
//! with `prev = start` at the first step.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::frontend::{Features, FrontEnd, FrontEndConfig};
use super::nn::{dot, log_softmax, sigmoid, Act, Dense, Layout, Matrix, Span};
use super::train::TrainReport;
use super::{SyntheticSpec, ToyError, Vocab};
use crate::adapter::{
    check_audio, check_target, AdapterError, AdapterInfo, Decoded, NllGrad, SpeechModel, TaskTag,
    TokenSequence,
};
use crate::audio::Waveform;

const CHECKPOINT_FORMAT: &str = "taskflip-toy-checkpoint";
const CHECKPOINT_VERSION: u32 = 2;
const POINTER_SMOOTHING: f64 = 0.1;
const POINTER_CUTOFF: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_hidden: usize,
    pub decoder_layers: usize,
    pub key_dim: usize,
    pub frame_len: usize,
    /// Gaussian pointer width, in chips.
    pub pointer_width: f64,
    pub max_decode_len: usize,
    pub max_audio_secs: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Training continues to at least this many steps even once accurate.
    pub min_steps: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub target_accuracy: f64,
    pub heldout_fraction: f64,
    /// Probability of padding a training utterance with leading quiet frames.
    pub pad_probability: f64,
    pub max_pad_frames: usize,
    pub pad_noise_max: f64,
    /// Fraction of padded examples whose padding is loud broadband noise.
    pub loud_pad_probability: f64,
    pub loud_noise_max: f64,
    pub vad_weight: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            encoder_layers: 2,
            decoder_hidden: 64,
            decoder_layers: 1,
            key_dim: 16,
            frame_len: 160,
            pointer_width: 0.2,
            max_decode_len: 16,
            max_audio_secs: 30.0,
            learning_rate: 3e-3,
            batch_size: 32,
            min_steps: 1000,
            max_steps: 4000,
            eval_every: 100,
            target_accuracy: 0.98,
            heldout_fraction: 0.1,
            pad_probability: 0.5,
            max_pad_frames: 96,
            pad_noise_max: 0.05,
            loud_pad_probability: 0.5,
            loud_noise_max: 1.0,
            vad_weight: 0.5,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self, spec: &SyntheticSpec) -> Result<(), ToyError> {
        let bad = |m: &str| Err(ToyError::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.decoder_hidden == 0 || self.key_dim == 0 {
            return bad("layer widths must be positive");
        }
        if !(1..=2).contains(&self.encoder_layers) || !(1..=2).contains(&self.decoder_layers) {
            return bad("encoder and decoder use one or two layers");
        }
        if self.frame_len == 0 || !spec.chip_length.is_multiple_of(self.frame_len) {
            return bad("frame_len must divide chip_length");
        }
        if !(self.pointer_width > 0.0) {
            return bad("pointer_width must be positive");
        }
        if self.max_decode_len == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("max_decode_len, batch_size and eval_every must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Arch {
    embed: Span,
    encoder: Vec<Dense>,
    vad: Dense,
    query: Matrix,
    key: Matrix,
    value: Matrix,
    decoder: Vec<Dense>,
    output: Dense,
    n_params: usize,
}

impl Arch {
    fn new(cfg: &ToyModelConfig, feat_dim: usize, vocab: usize) -> Self {
        let d = cfg.d_model;
        let mut l = Layout::default();
        let embed = l.alloc(vocab * d);
        let mut encoder = Vec::new();
        let mut n_in = feat_dim;
        for _ in 0..cfg.encoder_layers {
            encoder.push(Dense::new(&mut l, n_in, d, Act::Tanh));
            n_in = d;
        }
        let vad = Dense::new(&mut l, d, 1, Act::Linear);
        let query = Matrix::new(&mut l, cfg.key_dim, d);
        let key = Matrix::new(&mut l, cfg.key_dim, d);
        let value = Matrix::new(&mut l, d, d);
        let mut decoder = Vec::new();
        let mut n_in = 3 * d + 1;
        for _ in 0..cfg.decoder_layers {
            decoder.push(Dense::new(&mut l, n_in, cfg.decoder_hidden, Act::Tanh));
            n_in = cfg.decoder_hidden;
        }
        let output = Dense::new(&mut l, n_in, vocab, Act::Linear);
        Self {
            embed,
            encoder,
            vad,
            query,
            key,
            value,
            decoder,
            output,
            n_params: l.total(),
        }
    }
}

/// Frame-level encoder outputs for one utterance.
pub(crate) struct Encoded {
    pub feats: Features,
    /// `layers[0]` is the feature matrix, `layers[i]` the output of encoder
    /// layer `i - 1`; each `[n_frames][width]`.
    layers: Vec<Vec<f64>>,
    pub activity: Vec<f64>,
    positions: Vec<f64>,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl Encoded {
    fn z(&self) -> &[f64] {
        self.layers.last().expect("at least one layer")
    }
}

struct Glance {
    prompt: Vec<f64>,
    query: Vec<f64>,
    prompt_key: Vec<f64>,
    prompt_value: Vec<f64>,
    /// Attention over the audio frames, then the prompt slot last.
    weights: Vec<f64>,
    summary: Vec<f64>,
}

struct StepCache {
    input: Vec<f64>,
    hidden: Vec<Vec<f64>>,
    log_probs: Vec<f64>,
}

/// Gradients flowing back into the encoder side from the decoder.
struct EncoderGrads {
    dz: Vec<f64>,
    dact: Vec<f64>,
    dpos: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ToyModelConfig,
    spec: SyntheticSpec,
    vocab: Vocab,
    arch: Arch,
    frontend: FrontEnd,
    pub(crate) params: Vec<f64>,
    training: Option<TrainReport>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ToyModelConfig,
    spec: SyntheticSpec,
    training: Option<TrainReport>,
    params: Vec<f64>,
}

impl ToyModel {
    /// Freshly initialized (untrained) model.
    pub fn new(config: ToyModelConfig, spec: SyntheticSpec) -> Result<Self, ToyError> {
        spec.validate()?;
        config.validate(&spec)?;
        let vocab = Vocab::new(spec.alphabet_size);
        let frontend = FrontEnd::new(FrontEndConfig {
            sample_rate: spec.sample_rate,
            frame_len: config.frame_len,
            bin_frequencies: spec.tone_frequencies.clone(),
        });
        let arch = Arch::new(&config, frontend.dim(), vocab.size());
        let mut params = vec![0.0; arch.n_params];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for e in arch.embed.of_mut(&mut params) {
            *e = rand::Rng::gen_range(&mut rng, -0.5..0.5);
        }
        for layer in arch.encoder.iter().chain(arch.decoder.iter()) {
            layer.init(&mut params, &mut rng);
        }
        arch.vad.init(&mut params, &mut rng);
        arch.output.init(&mut params, &mut rng);
        for m in [&arch.query, &arch.key, &arch.value] {
            m.init(&mut params, &mut rng);
        }
        Ok(Self {
            config,
            spec,
            vocab,
            arch,
            frontend,
            params,
            training: None,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn training_report(&self) -> Option<&TrainReport> {
        self.training.as_ref()
    }

    pub(crate) fn set_training_report(&mut self, r: TrainReport) {
        self.training = Some(r);
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn frontend(&self) -> &FrontEnd {
        &self.frontend
    }

    fn chip_frames(&self) -> f64 {
        (self.spec.chip_length / self.config.frame_len) as f64
    }

    /// Pointer mass of one fully aligned chip; normalizes the mass feature.
    fn reference_mass(&self) -> f64 {
        let c = self.chip_frames();
        (0..c as usize)
            .map(|j| {
                let u = ((j as f64 + 0.5) / c - 0.5) / self.config.pointer_width;
                (-0.5 * u * u).exp()
            })
            .sum()
    }

    pub fn save(&self, path: &Path) -> Result<(), ToyError> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            spec: self.spec.clone(),
            training: self.training.clone(),
            params: self.params.clone(),
        };
        let text = serde_json::to_string(&ck)?;
        fs::write(path, text).map_err(|e| ToyError::Io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self, ToyError> {
        let text =
            fs::read_to_string(path).map_err(|e| ToyError::Io(path.display().to_string(), e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(ToyError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let mut model = Self::new(ck.config, ck.spec)?;
        if ck.params.len() != model.params.len() {
            return Err(ToyError::Checkpoint(format!(
                "checkpoint has {} parameters, architecture needs {}",
                ck.params.len(),
                model.params.len()
            )));
        }
        model.params = ck.params;
        model.training = ck.training;
        Ok(model)
    }

    // ---- encoder ---------------------------------------------------------

    pub(crate) fn encode(&self, feats: Features) -> Encoded {
        let p = &self.params;
        let d = self.config.d_model;
        let n = feats.n_frames;
        let mut layers = vec![feats.values.clone()];
        for layer in &self.arch.encoder {
            let prev = layers.last().unwrap();
            let mut out = vec![0.0; n * layer.n_out];
            for t in 0..n {
                layer.forward(
                    p,
                    &prev[t * layer.n_in..(t + 1) * layer.n_in],
                    &mut out[t * layer.n_out..(t + 1) * layer.n_out],
                );
            }
            layers.push(out);
        }
        let z = layers.last().unwrap();
        let c = self.chip_frames();
        let mut activity = vec![0.0; n];
        let mut positions = vec![0.0; n];
        let mut keys = vec![0.0; n * self.config.key_dim];
        let mut values = vec![0.0; n * d];
        let mut running = 0.0;
        for t in 0..n {
            let zt = &z[t * d..(t + 1) * d];
            let mut pre = [0.0];
            self.arch.vad.forward(p, zt, &mut pre);
            let a = sigmoid(pre[0]);
            activity[t] = a;
            positions[t] = (running + 0.5 * a) / c;
            running += a;
            let kd = self.config.key_dim;
            self.arch.key.apply(p, zt, &mut keys[t * kd..(t + 1) * kd]);
            self.arch
                .value
                .apply(p, zt, &mut values[t * d..(t + 1) * d]);
        }
        Encoded {
            feats,
            layers,
            activity,
            positions,
            keys,
            values,
        }
    }

    fn glance(&self, enc: &Encoded, task: TaskTag) -> Glance {
        let p = &self.params;
        let d = self.config.d_model;
        let kd = self.config.key_dim;
        let mut prompt = vec![0.0; d];
        for tok in [Vocab::START, Vocab::LANG, self.vocab.task_token(task)] {
            for (a, e) in prompt.iter_mut().zip(self.embedding(tok)) {
                *a += e;
            }
        }
        let mut query = vec![0.0; kd];
        self.arch.query.apply(p, &prompt, &mut query);
        let mut prompt_key = vec![0.0; kd];
        self.arch.key.apply(p, &prompt, &mut prompt_key);
        let mut prompt_value = vec![0.0; d];
        self.arch.value.apply(p, &prompt, &mut prompt_value);
        let n = enc.feats.n_frames;
        let scale = 1.0 / (kd as f64).sqrt();
        let mut scores: Vec<f64> = (0..n)
            .map(|t| dot(&query, &enc.keys[t * kd..(t + 1) * kd]) * scale)
            .collect();
        scores.push(dot(&query, &prompt_key) * scale);
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let mut summary = vec![0.0; d];
        for (t, &w) in weights.iter().enumerate() {
            let v = if t < n {
                &enc.values[t * d..(t + 1) * d]
            } else {
                &prompt_value[..]
            };
            for (s, vi) in summary.iter_mut().zip(v) {
                *s += w * vi;
            }
        }
        Glance {
            prompt,
            query,
            prompt_key,
            prompt_value,
            weights,
            summary,
        }
    }

    fn embedding(&self, token: u32) -> &[f64] {
        let d = self.config.d_model;
        let e = self.arch.embed.of(&self.params);
        &e[token as usize * d..(token as usize + 1) * d]
    }

    /// Pointer kernel `k_t` for step `m`, zero outside the cutoff.
    fn pointer_kernel(&self, enc: &Encoded, step: usize) -> Vec<(usize, f64)> {
        let center = step as f64 + 0.5;
        let w = self.config.pointer_width;
        enc.positions
            .iter()
            .enumerate()
            .filter_map(|(t, &pt)| {
                let u = (pt - center) / w;
                (u.abs() < POINTER_CUTOFF).then(|| (t, (-0.5 * u * u).exp()))
            })
            .collect()
    }

    /// Pointer context and normalized mass for step `m`.
    fn pointer_read(&self, enc: &Encoded, step: usize) -> (Vec<f64>, f64) {
        let d = self.config.d_model;
        let z = enc.z();
        let mut ctx = vec![0.0; d];
        let mut mass = 0.0;
        for (t, k) in self.pointer_kernel(enc, step) {
            let w = enc.activity[t] * k;
            mass += w;
            for (c, zi) in ctx.iter_mut().zip(&z[t * d..(t + 1) * d]) {
                *c += w * zi;
            }
        }
        let denom = mass + POINTER_SMOOTHING;
        for c in ctx.iter_mut() {
            *c /= denom;
        }
        (ctx, mass / self.reference_mass())
    }

    fn step_forward(&self, enc: &Encoded, glance: &Glance, step: usize, prev: u32) -> StepCache {
        let (ctx, mass) = self.pointer_read(enc, step);
        let mut input = Vec::with_capacity(3 * self.config.d_model + 1);
        input.extend_from_slice(self.embedding(prev));
        input.extend_from_slice(&ctx);
        input.push(mass);
        input.extend_from_slice(&glance.summary);
        let mut hidden = Vec::new();
        let mut x = input.clone();
        for layer in &self.arch.decoder {
            let mut y = vec![0.0; layer.n_out];
            layer.forward(&self.params, &x, &mut y);
            hidden.push(y.clone());
            x = y;
        }
        let mut logits = vec![0.0; self.vocab.size()];
        self.arch.output.forward(&self.params, &x, &mut logits);
        StepCache {
            input,
            hidden,
            log_probs: log_softmax(&logits),
        }
    }

    // ---- backward --------------------------------------------------------

    /// Backward through one decoder step given `dlogits`. Returns the
    /// gradients for the pointer context and pointer mass, and accumulates
    /// summary and embedding gradients.
    fn step_backward(
        &self,
        cache: &StepCache,
        prev: u32,
        dlogits: &[f64],
        dsummary: &mut [f64],
        mut dparams: Option<&mut [f64]>,
    ) -> (Vec<f64>, f64) {
        let p = &self.params;
        let d = self.config.d_model;
        let last_in = cache.hidden.last().unwrap();
        let mut dx = vec![0.0; self.arch.output.n_in];
        self.arch
            .output
            .backward_pre(p, last_in, dlogits, dparams.as_deref_mut(), Some(&mut dx));
        for (i, layer) in self.arch.decoder.iter().enumerate().rev() {
            let x = if i == 0 {
                &cache.input
            } else {
                &cache.hidden[i - 1]
            };
            let mut dxi = vec![0.0; layer.n_in];
            layer.backward(
                p,
                x,
                &cache.hidden[i],
                &dx,
                dparams.as_deref_mut(),
                Some(&mut dxi),
            );
            dx = dxi;
        }
        if let Some(dp) = dparams {
            let off = self.arch.embed.offset + prev as usize * d;
            for (a, g) in dp[off..off + d].iter_mut().zip(&dx[0..d]) {
                *a += g;
            }
        }
        for (a, g) in dsummary.iter_mut().zip(&dx[2 * d + 1..3 * d + 1]) {
            *a += g;
        }
        (dx[d..2 * d].to_vec(), dx[2 * d])
    }

    fn pointer_backward(
        &self,
        enc: &Encoded,
        step: usize,
        dctx: &[f64],
        dmass: f64,
        grads: &mut EncoderGrads,
    ) {
        let d = self.config.d_model;
        let z = enc.z();
        let kernel = self.pointer_kernel(enc, step);
        let mut mass = 0.0;
        let mut weighted = vec![0.0; d];
        for &(t, k) in &kernel {
            let w = enc.activity[t] * k;
            mass += w;
            for (s, zi) in weighted.iter_mut().zip(&z[t * d..(t + 1) * d]) {
                *s += w * zi;
            }
        }
        let denom = mass + POINTER_SMOOTHING;
        // ctx = weighted / denom; mass_feature = mass / ref
        let dmass_total = dmass / self.reference_mass() - dot(dctx, &weighted) / (denom * denom);
        let width = self.config.pointer_width;
        let center = step as f64 + 0.5;
        for &(t, k) in &kernel {
            let zt = &z[t * d..(t + 1) * d];
            let a = enc.activity[t];
            let w = a * k;
            let dw = dot(dctx, zt) / denom + dmass_total;
            for (g, c) in grads.dz[t * d..(t + 1) * d].iter_mut().zip(dctx) {
                *g += w / denom * c;
            }
            grads.dact[t] += dw * k;
            let u = (enc.positions[t] - center) / width;
            grads.dpos[t] += dw * a * k * (-u / width);
        }
    }

    fn glance_backward(
        &self,
        enc: &Encoded,
        glance: &Glance,
        dsummary: &[f64],
        dprompt: &mut [f64],
        grads: &mut EncoderGrads,
        mut dparams: Option<&mut [f64]>,
    ) {
        let p = &self.params;
        let d = self.config.d_model;
        let kd = self.config.key_dim;
        let n = enc.feats.n_frames;
        let z = enc.z();
        let scale = 1.0 / (kd as f64).sqrt();
        let dweights: Vec<f64> = (0..=n)
            .map(|t| {
                let v = if t < n {
                    &enc.values[t * d..(t + 1) * d]
                } else {
                    &glance.prompt_value[..]
                };
                dot(dsummary, v)
            })
            .collect();
        let mean: f64 = glance
            .weights
            .iter()
            .zip(&dweights)
            .map(|(a, b)| a * b)
            .sum();
        let mut dquery = vec![0.0; kd];
        for t in 0..=n {
            let a = glance.weights[t];
            let dscore = a * (dweights[t] - mean) * scale;
            let kt = if t < n {
                &enc.keys[t * kd..(t + 1) * kd]
            } else {
                &glance.prompt_key[..]
            };
            for (q, k) in dquery.iter_mut().zip(kt) {
                *q += dscore * k;
            }
            let dkey: Vec<f64> = glance.query.iter().map(|q| dscore * q).collect();
            let dvalue: Vec<f64> = dsummary.iter().map(|g| a * g).collect();
            let (x, dx) = if t < n {
                (&z[t * d..(t + 1) * d], &mut grads.dz[t * d..(t + 1) * d])
            } else {
                (&glance.prompt[..], &mut dprompt[..])
            };
            self.arch
                .key
                .backward(p, x, &dkey, dparams.as_deref_mut(), Some(&mut *dx));
            self.arch
                .value
                .backward(p, x, &dvalue, dparams.as_deref_mut(), Some(dx));
        }
        self.arch
            .query
            .backward(p, &glance.prompt, &dquery, dparams, Some(dprompt));
    }

    /// Backward through activity, positions and the encoder stack. Returns
    /// the gradient with respect to the feature matrix.
    fn encoder_backward(
        &self,
        enc: &Encoded,
        mut grads: EncoderGrads,
        dvad_pre: Option<&[f64]>,
        mut dparams: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let p = &self.params;
        let d = self.config.d_model;
        let n = enc.feats.n_frames;
        let c = self.chip_frames();
        // p_t = (sum_{s<t} a_s + a_t / 2) / c
        let mut suffix = 0.0;
        for t in (0..n).rev() {
            grads.dact[t] += (0.5 * grads.dpos[t] + suffix) / c;
            suffix += grads.dpos[t];
        }
        let z = enc.z();
        for t in 0..n {
            let a = enc.activity[t];
            let mut dpre = grads.dact[t] * a * (1.0 - a);
            if let Some(extra) = dvad_pre {
                dpre += extra[t];
            }
            if dpre != 0.0 {
                self.arch.vad.backward_pre(
                    p,
                    &z[t * d..(t + 1) * d],
                    &[dpre],
                    dparams.as_deref_mut(),
                    Some(&mut grads.dz[t * d..(t + 1) * d]),
                );
            }
        }
        let mut dout = grads.dz;
        for (i, layer) in self.arch.encoder.iter().enumerate().rev() {
            let x = &enc.layers[i];
            let y = &enc.layers[i + 1];
            let mut din = vec![0.0; n * layer.n_in];
            for t in 0..n {
                layer.backward(
                    p,
                    &x[t * layer.n_in..(t + 1) * layer.n_in],
                    &y[t * layer.n_out..(t + 1) * layer.n_out],
                    &dout[t * layer.n_out..(t + 1) * layer.n_out],
                    dparams.as_deref_mut(),
                    Some(&mut din[t * layer.n_in..(t + 1) * layer.n_in]),
                );
            }
            dout = din;
        }
        dout
    }

    // ---- composite passes --------------------------------------------------

    /// Teacher-forced NLL over `target` (vocabulary ids), optionally
    /// accumulating `d(nll * loss_scale)/d(params)` and returning the
    /// gradient with respect to the features.
    pub(crate) fn teacher_forced(
        &self,
        enc: &Encoded,
        target: &[u32],
        task: TaskTag,
        loss_scale: f64,
        mut dparams: Option<&mut [f64]>,
        want_feature_grad: bool,
        dvad_pre: Option<&[f64]>,
    ) -> (f64, Option<Vec<f64>>) {
        let glance = self.glance(enc, task);
        let backward = dparams.is_some() || want_feature_grad;
        let d = self.config.d_model;
        let n = enc.feats.n_frames;
        let mut nll = 0.0;
        let mut grads = EncoderGrads {
            dz: vec![0.0; n * d],
            dact: vec![0.0; n],
            dpos: vec![0.0; n],
        };
        let mut dprompt = vec![0.0; d];
        let mut dsummary = vec![0.0; d];
        let mut prev = Vocab::START;
        for (m, &y) in target.iter().enumerate() {
            let cache = self.step_forward(enc, &glance, m, prev);
            nll -= cache.log_probs[y as usize];
            if backward {
                let mut dlogits: Vec<f64> = cache
                    .log_probs
                    .iter()
                    .map(|l| l.exp() * loss_scale)
                    .collect();
                dlogits[y as usize] -= loss_scale;
                let (dctx, dmass) = self.step_backward(
                    &cache,
                    prev,
                    &dlogits,
                    &mut dsummary,
                    dparams.as_deref_mut(),
                );
                self.pointer_backward(enc, m, &dctx, dmass, &mut grads);
            }
            prev = y;
        }
        if !backward {
            return (nll, None);
        }
        self.glance_backward(
            enc,
            &glance,
            &dsummary,
            &mut dprompt,
            &mut grads,
            dparams.as_deref_mut(),
        );
        if let Some(dp) = dparams.as_deref_mut() {
            for tok in [Vocab::START, Vocab::LANG, self.vocab.task_token(task)] {
                let off = self.arch.embed.offset + tok as usize * d;
                for (a, g) in dp[off..off + d].iter_mut().zip(&dprompt) {
                    *a += g;
                }
            }
        }
        let dfeat = self.encoder_backward(enc, grads, dvad_pre, dparams);
        (nll, want_feature_grad.then_some(dfeat))
    }

    pub(crate) fn greedy(&self, enc: &Encoded, task: TaskTag) -> Decoded {
        let glance = self.glance(enc, task);
        let mut prev = Vocab::START;
        let mut tokens = Vec::new();
        let mut step_nll = Vec::new();
        let mut terminated = false;
        for m in 0..self.config.max_decode_len {
            let cache = self.step_forward(enc, &glance, m, prev);
            let (best, lp) = cache.log_probs.iter().enumerate().fold(
                (0usize, f64::NEG_INFINITY),
                |acc, (i, &l)| if l > acc.1 { (i, l) } else { acc },
            );
            tokens.push(best as u32);
            step_nll.push(-lp);
            prev = best as u32;
            if prev == Vocab::END {
                terminated = true;
                break;
            }
        }
        Decoded {
            tokens: TokenSequence(tokens),
            step_nll,
            terminated,
        }
    }

    fn check(&self, audio: &Waveform) -> Result<(), AdapterError> {
        check_audio(audio, &self.info(), self.config.frame_len)
    }
}

impl SpeechModel for ToyModel {
    fn info(&self) -> AdapterInfo {
        AdapterInfo {
            id: "toy".into(),
            vocab_size: self.vocab.size(),
            sample_rate: self.spec.sample_rate,
            max_audio_frames: (self.config.max_audio_secs * f64::from(self.spec.sample_rate))
                as usize,
            tasks: TaskTag::ALL.to_vec(),
            source_lang: self.spec.source_lang.clone(),
        }
    }

    fn teacher_forced_nll(
        &self,
        audio: &Waveform,
        target: &TokenSequence,
        task: TaskTag,
    ) -> Result<NllGrad, AdapterError> {
        self.check(audio)?;
        check_target(target, self.vocab.size())?;
        let feats = self.frontend.forward(audio.samples());
        let enc = self.encode(feats);
        let (nll, dfeat) =
            self.teacher_forced(&enc, target.as_slice(), task, 1.0, None, true, None);
        let grad = self.frontend.backward(
            audio.samples(),
            &enc.feats,
            &dfeat.expect("feature gradient requested"),
        );
        Ok(NllGrad { nll, grad })
    }

    fn nll(
        &self,
        audio: &Waveform,
        target: &TokenSequence,
        task: TaskTag,
    ) -> Result<f64, AdapterError> {
        self.check(audio)?;
        check_target(target, self.vocab.size())?;
        let enc = self.encode(self.frontend.forward(audio.samples()));
        Ok(self
            .teacher_forced(&enc, target.as_slice(), task, 1.0, None, false, None)
            .0)
    }

    /// Audio shorter than one analysis frame (including empty audio) is
    /// rejected with [`AdapterError::AudioTooShort`].
    fn decode(&self, audio: &Waveform, task: TaskTag) -> Result<Decoded, AdapterError> {
        self.check(audio)?;
        let enc = self.encode(self.frontend.forward(audio.samples()));
        Ok(self.greedy(&enc, task))
    }

    fn render(&self, tokens: &TokenSequence) -> String {
        self.vocab.render(tokens.as_slice())
    }

    fn param_checksum(&self) -> u64 {
        // FNV-1a over the parameter bit patterns
        self.params.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, p| {
            p.to_bits()
                .to_le_bytes()
                .iter()
                .fold(h, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
        })
    }
}
