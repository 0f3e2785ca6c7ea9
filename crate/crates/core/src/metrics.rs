//! WER with an insertion/deletion/substitution breakdown, corpus BLEU and
//! target-language probability, plus the per-utterance evaluation loop.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{SpeechModel, TaskTag};
use crate::audio::{prepend, AdversarialSegment, Waveform};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("reference is empty; word error rate is undefined")]
    EmptyReference,
    #[error("{references} references but {hypotheses} hypotheses")]
    LengthMismatch {
        references: usize,
        hypotheses: usize,
    },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("language detector failed: {0}")]
    Detector(String),
}

/// Lowercases, drops every character that is neither alphanumeric nor
/// whitespace, and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EditOp {
    Match,
    Sub,
    Del,
    Ins,
}

/// Minimum-cost unit-weight alignment of `hyp` against `reference`.
///
/// Among equal-cost paths the backtrace prefers the diagonal (match or
/// substitution), then deletion, then insertion.
pub fn edit_alignment<T: PartialEq>(reference: &[T], hyp: &[T]) -> Vec<EditOp> {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(del).min(ins);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                ops.push(if same { EditOp::Match } else { EditOp::Sub });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            ops.push(EditOp::Del);
            i -= 1;
        } else {
            ops.push(EditOp::Ins);
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Edit counts of one hypothesis against its reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub ins: usize,
    pub del: usize,
    pub sub: usize,
    pub n_ref_words: usize,
}

impl WerBreakdown {
    pub fn distance(&self) -> usize {
        self.ins + self.del + self.sub
    }

    fn rate(&self, count: usize) -> f64 {
        100.0 * count as f64 / self.n_ref_words as f64
    }

    /// Word error rate in percent; may exceed 100.
    pub fn wer(&self) -> f64 {
        self.rate(self.distance())
    }

    pub fn ins_rate(&self) -> f64 {
        self.rate(self.ins)
    }

    pub fn del_rate(&self) -> f64 {
        self.rate(self.del)
    }

    pub fn sub_rate(&self) -> f64 {
        self.rate(self.sub)
    }
}

pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<WerBreakdown, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let mut b = WerBreakdown {
        n_ref_words: reference.len(),
        ..WerBreakdown::default()
    };
    for op in edit_alignment(reference, hypothesis) {
        match op {
            EditOp::Match => {}
            EditOp::Sub => b.sub += 1,
            EditOp::Del => b.del += 1,
            EditOp::Ins => b.ins += 1,
        }
    }
    Ok(b)
}

/// [`wer`] on normalized text.
pub fn wer_text(reference: &str, hypothesis: &str) -> Result<WerBreakdown, MetricError> {
    wer(&normalize(reference), &normalize(hypothesis))
}

pub const BLEU_ORDER: usize = 4;

/// Sufficient statistics of one sentence pair; corpus BLEU sums these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [usize; BLEU_ORDER],
    pub totals: [usize; BLEU_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn sentence(reference: &[String], hypothesis: &[String]) -> Self {
        let mut s = Self {
            hyp_len: hypothesis.len(),
            ref_len: reference.len(),
            ..Self::default()
        };
        for n in 1..=BLEU_ORDER {
            let r = ngram_counts(reference, n);
            for (g, c) in ngram_counts(hypothesis, n) {
                s.matches[n - 1] += c.min(r.get(g).copied().unwrap_or(0));
                s.totals[n - 1] += c;
            }
        }
        s
    }

    pub fn add(&mut self, other: &Self) {
        for n in 0..BLEU_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// BLEU in `[0, 100]`. Orders for which the hypotheses contain no
    /// n-grams at all (every sentence shorter than `n`) are left out of the
    /// geometric mean; any other zero precision gives 0.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut orders = 0;
        for n in 0..BLEU_ORDER {
            if self.totals[n] == 0 {
                continue;
            }
            if self.matches[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
            orders += 1;
        }
        let bp = if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        100.0 * bp * (log_sum / orders as f64).exp()
    }
}

fn ngram_counts(words: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if words.len() >= n {
        for g in words.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

pub fn corpus_bleu<R: AsRef<str>, H: AsRef<str>>(
    references: &[R],
    hypotheses: &[H],
) -> Result<f64, MetricError> {
    if references.len() != hypotheses.len() {
        return Err(MetricError::LengthMismatch {
            references: references.len(),
            hypotheses: hypotheses.len(),
        });
    }
    if references.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let mut total = BleuStats::default();
    for (r, h) in references.iter().zip(hypotheses) {
        total.add(&BleuStats::sentence(
            &normalize(r.as_ref()),
            &normalize(h.as_ref()),
        ));
    }
    Ok(total.score())
}

/// Language identification contract.
pub trait LangDetector {
    fn target_lang(&self) -> &str;

    /// Probability in `[0, 1]` that `text` is in the target language.
    fn p_target(&self, text: &str) -> Result<f64, MetricError>;
}

/// Detector for toy-model output: the fraction of words drawn from the
/// target alphabet (`t0`, `t1`, ...). Empty text scores 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyDetector {
    alphabet_size: usize,
    target_lang: String,
}

impl ToyDetector {
    pub fn new(alphabet_size: usize, target_lang: impl Into<String>) -> Self {
        Self {
            alphabet_size,
            target_lang: target_lang.into(),
        }
    }

    fn is_target_word(&self, w: &str) -> bool {
        w.strip_prefix('t')
            .filter(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|d| d.parse::<usize>().ok())
            .is_some_and(|k| k < self.alphabet_size)
    }
}

impl LangDetector for ToyDetector {
    fn target_lang(&self) -> &str {
        &self.target_lang
    }

    fn p_target(&self, text: &str) -> Result<f64, MetricError> {
        let words = normalize(text);
        if words.is_empty() {
            return Ok(0.0);
        }
        let hits = words.iter().filter(|w| self.is_target_word(w)).count();
        Ok(hits as f64 / words.len() as f64)
    }
}

pub fn p_target_lang(detector: &dyn LangDetector, text: &str) -> Result<f64, MetricError> {
    let p = detector.p_target(text)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(MetricError::Detector(format!(
            "probability {p} outside [0, 1]"
        )));
    }
    Ok(p)
}

/// One test utterance with its English reference translation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub id: String,
    pub audio: Waveform,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub hypothesis: String,
    pub reference: String,
    pub wer: Option<WerBreakdown>,
    pub bleu: Option<BleuStats>,
    pub p_en: Option<f64>,
    /// Set when decoding or scoring failed; such records are left out of
    /// aggregates.
    pub error: Option<String>,
}

impl EvalRecord {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Dataset-level row of the aggregate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub label: String,
    pub mode: TaskTag,
    pub n_scored: usize,
    pub n_failed: usize,
    /// Means of per-utterance rates, in percent.
    pub wer: f64,
    pub ins: f64,
    pub del: f64,
    pub sub: f64,
    pub bleu: f64,
    /// Neural metric slot; never computed here.
    pub comet: Option<f64>,
    /// Mean target-language probability in `[0, 1]`.
    pub p_en: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub records: Vec<EvalRecord>,
    pub aggregate: Aggregate,
}

pub fn aggregate(records: &[EvalRecord], label: &str, mode: TaskTag) -> Aggregate {
    let ok: Vec<&EvalRecord> = records.iter().filter(|r| r.is_ok()).collect();
    let n = ok.len().max(1) as f64;
    let mean = |f: &dyn Fn(&WerBreakdown) -> f64| {
        ok.iter().filter_map(|r| r.wer.as_ref()).map(f).sum::<f64>() / n
    };
    let mut stats = BleuStats::default();
    for r in &ok {
        if let Some(s) = &r.bleu {
            stats.add(s);
        }
    }
    Aggregate {
        label: label.to_string(),
        mode,
        n_scored: ok.len(),
        n_failed: records.len() - ok.len(),
        wer: mean(&WerBreakdown::wer),
        ins: mean(&WerBreakdown::ins_rate),
        del: mean(&WerBreakdown::del_rate),
        sub: mean(&WerBreakdown::sub_rate),
        bleu: stats.score(),
        comet: None,
        p_en: ok.iter().filter_map(|r| r.p_en).sum::<f64>() / n,
    }
}

/// Decodes every item under `mode` (with `segment` prepended when given)
/// and scores the output against the reference translation.
pub fn evaluate_testset(
    model: &dyn SpeechModel,
    segment: Option<&AdversarialSegment>,
    testset: &[EvalItem],
    mode: TaskTag,
    detector: &dyn LangDetector,
    label: &str,
) -> Evaluation {
    let records: Vec<EvalRecord> = testset
        .iter()
        .map(|item| score_item(model, segment, item, mode, detector))
        .collect();
    let aggregate = aggregate(&records, label, mode);
    if aggregate.n_failed > 0 {
        log::warn!(
            "{} of {} utterances failed and were excluded",
            aggregate.n_failed,
            records.len()
        );
    }
    Evaluation { records, aggregate }
}

fn score_item(
    model: &dyn SpeechModel,
    segment: Option<&AdversarialSegment>,
    item: &EvalItem,
    mode: TaskTag,
    detector: &dyn LangDetector,
) -> EvalRecord {
    let mut rec = EvalRecord {
        id: item.id.clone(),
        hypothesis: String::new(),
        reference: item.reference.clone(),
        wer: None,
        bleu: None,
        p_en: None,
        error: None,
    };
    let audio = match segment {
        Some(seg) => match prepend(seg, &item.audio) {
            Ok(a) => a,
            Err(e) => {
                rec.error = Some(e.to_string());
                return rec;
            }
        },
        None => item.audio.clone(),
    };
    let decoded = match model.decode(&audio, mode) {
        Ok(d) => d,
        Err(e) => {
            rec.error = Some(e.to_string());
            return rec;
        }
    };
    rec.hypothesis = model.render(&decoded.tokens);
    let (r, h) = (normalize(&rec.reference), normalize(&rec.hypothesis));
    let scored = wer(&r, &h).and_then(|w| Ok((w, p_target_lang(detector, &rec.hypothesis)?)));
    match scored {
        Ok((w, p)) => {
            rec.wer = Some(w);
            rec.bleu = Some(BleuStats::sentence(&r, &h));
            rec.p_en = Some(p);
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

#[derive(Serialize)]
struct RecordRow<'a> {
    id: &'a str,
    hypothesis: &'a str,
    reference: &'a str,
    wer: Option<f64>,
    ins: Option<f64>,
    del: Option<f64>,
    sub: Option<f64>,
    p_en: Option<f64>,
    error: &'a str,
}

#[derive(Serialize)]
struct AggregateRow<'a> {
    label: &'a str,
    mode: TaskTag,
    wer: f64,
    bleu: f64,
    comet: Option<f64>,
    /// Percent.
    p_en: f64,
    ins: f64,
    del: f64,
    sub: f64,
    n_scored: usize,
    n_failed: usize,
}

fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv")
}

pub fn records_csv(records: &[EvalRecord]) -> String {
    to_csv(records.iter().map(|r| RecordRow {
        id: &r.id,
        hypothesis: &r.hypothesis,
        reference: &r.reference,
        wer: r.wer.map(|w| w.wer()),
        ins: r.wer.map(|w| w.ins_rate()),
        del: r.wer.map(|w| w.del_rate()),
        sub: r.wer.map(|w| w.sub_rate()),
        p_en: r.p_en,
        error: r.error.as_deref().unwrap_or(""),
    }))
}

pub fn aggregates_csv(rows: &[Aggregate]) -> String {
    to_csv(rows.iter().map(|a| AggregateRow {
        label: &a.label,
        mode: a.mode,
        wer: a.wer,
        bleu: a.bleu,
        comet: a.comet,
        p_en: 100.0 * a.p_en,
        ins: a.ins,
        del: a.del,
        sub: a.sub,
        n_scored: a.n_scored,
        n_failed: a.n_failed,
    }))
}

/// Markdown table with columns `| | Mode | WER | BLEU | COMET | P(en) |`;
/// P(en) in percent and COMET shown as `n/a`.
pub fn aggregate_table(rows: &[Aggregate]) -> String {
    let mut out =
        String::from("| | Mode | WER | BLEU | COMET | P(en) |\n|---|---|---|---|---|---|\n");
    for a in rows {
        let comet = a
            .comet
            .map(|c| format!("{c:.1}"))
            .unwrap_or_else(|| "n/a".into());
        let _ = writeln!(
            out,
            "| {} | {} | {:.1} | {:.2} | {} | {:.1} |",
            a.label,
            a.mode,
            a.wer,
            a.bleu,
            comet,
            100.0 * a.p_en
        );
    }
    out
}
