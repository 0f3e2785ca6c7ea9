use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use taskflip::analysis::{
    bimodality_summary, default_taus, discontinuity, plot_curves, recall_curves, write_analysis,
    RecallCurve,
};
use taskflip::attack::{
    generate_targets, train_universal_segment, AttackConfig, AttackError, CheckpointSink, InitMode,
    TargetSet, Utterance,
};
use taskflip::audio::{load_segment, read_wav, save_segment, segment_paths, write_wav};
use taskflip::manifest::{load_manifest, split, write_manifest, Manifest};
use taskflip::metrics::{
    aggregate, aggregate_table, aggregates_csv, evaluate_testset, records_csv, EvalItem,
    EvalRecord, Evaluation, LangDetector, ToyDetector,
};
use taskflip::report::{DecompositionRow, DistributionSection, ReportInput, TableRow};
use taskflip::toy::{
    generate_synthetic_dataset, source_text, target_text, train_toy_model, SyntheticSpec,
    SyntheticUtterance, ToyModel, ToyModelConfig, Vocab,
};
use taskflip::{AdapterRegistry, ManifestEntry, SpeechModel, Split, Waveform};

use crate::{
    AttackArgs, CliError, EvalArgs, ModelArgs, ReportArgs, SynthArgs, TargetArgs, TrainArgs,
};

type Result<T> = std::result::Result<T, CliError>;

fn ensure_dir(dir: &Path) -> Result<()> {
    if dir.is_file() {
        return Err(CliError::Usage(format!(
            "{} is a file, not a directory",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{what} {} not found",
            path.display()
        )))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
    fs::write(path, text + "\n").map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn manifest_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    require_file(path, "manifest")?;
    let m = load_manifest(path).map_err(CliError::runtime)?;
    for w in &m.warnings {
        log::warn!("{w}");
    }
    Ok(m)
}

/// Audio for each entry, or the reason it could not be read.
fn load_audio(
    manifest: &Path,
    entries: &[ManifestEntry],
) -> Vec<(ManifestEntry, std::result::Result<Waveform, String>)> {
    let dir = manifest_dir(manifest);
    entries
        .iter()
        .map(|e| {
            (
                e.clone(),
                read_wav(&e.resolve_audio(dir)).map_err(|err| err.to_string()),
            )
        })
        .collect()
}

fn train_utterances(manifest: &Path) -> Result<Vec<Utterance>> {
    let m = read_manifest(manifest)?;
    let mut out = Vec::new();
    for (e, audio) in load_audio(manifest, &split(&m.entries, Split::Train)) {
        match audio {
            Ok(audio) => out.push(Utterance { id: e.id, audio }),
            Err(err) => log::warn!("skipping {}: {err}", e.id),
        }
    }
    Ok(out)
}

fn load_model(args: &ModelArgs) -> Result<Box<dyn SpeechModel>> {
    let registry = AdapterRegistry::with_builtin();
    if !registry.ids().any(|id| id == args.adapter) {
        let known: Vec<&str> = registry.ids().collect();
        return Err(CliError::Usage(format!(
            "unknown adapter {:?} (known: {})",
            args.adapter,
            known.join(", ")
        )));
    }
    require_file(&args.checkpoint, "checkpoint")?;
    registry
        .load(&args.adapter, &args.checkpoint)
        .map_err(CliError::runtime)
}

fn detector_for(args: &ModelArgs) -> Result<Box<dyn LangDetector>> {
    match args.adapter.as_str() {
        "toy" => {
            let m = ToyModel::load(&args.checkpoint).map_err(CliError::runtime)?;
            Ok(Box::new(ToyDetector::new(
                m.spec().alphabet_size,
                m.spec().target_lang.clone(),
            )))
        }
        other => Err(CliError::Usage(format!(
            "no language detector available for adapter {other:?}"
        ))),
    }
}

pub fn synth_data(a: SynthArgs) -> Result<()> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let mut spec = SyntheticSpec::with_alphabet(a.alphabet_size);
    spec.chip_length = a.chip_length;
    spec.noise_std = a.noise_std;
    spec.train_fraction = a.train_fraction;
    if a.identity_mapping {
        spec.mapping = (0..a.alphabet_size).collect();
    }
    spec.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let data = generate_synthetic_dataset(&spec, a.n, a.seed).map_err(CliError::runtime)?;
    ensure_dir(&a.out.join("wav"))?;
    let mut entries = Vec::with_capacity(data.len());
    for u in &data {
        let rel = PathBuf::from("wav").join(format!("{}.wav", u.id));
        write_wav(&a.out.join(&rel), &u.audio).map_err(CliError::runtime)?;
        entries.push(ManifestEntry {
            id: u.id.clone(),
            audio_path: rel,
            source_lang: spec.source_lang.clone(),
            ref_transcript: source_text(&u.source),
            ref_translation_en: target_text(&u.target),
            split: u.split,
        });
    }
    write_manifest(&a.out.join("manifest.jsonl"), &entries).map_err(CliError::runtime)?;
    write_json(&a.out.join("spec.json"), &spec)?;
    write_json(
        &a.out.join("config.json"),
        &json!({"command": "synth-data", "n": a.n, "seed": a.seed, "spec": spec}),
    )?;
    let n_train = data.iter().filter(|u| u.split == Split::Train).count();
    println!(
        "wrote {} utterances ({} train, {} test) to {}",
        data.len(),
        n_train,
        data.len() - n_train,
        a.out.display()
    );
    Ok(())
}

pub fn train_toy(a: TrainArgs) -> Result<()> {
    let spec_path = a
        .spec
        .clone()
        .unwrap_or_else(|| manifest_dir(&a.manifest).join("spec.json"));
    require_file(&spec_path, "generator spec")?;
    let spec: SyntheticSpec = read_json(&spec_path)?;
    let m = read_manifest(&a.manifest)?;
    let vocab = Vocab::new(spec.alphabet_size);
    let mut data = Vec::new();
    for (e, audio) in load_audio(&a.manifest, &split(&m.entries, Split::Train)) {
        let audio = audio.map_err(|err| CliError::Runtime(format!("{}: {err}", e.id)))?;
        let source = vocab.parse_symbols(&e.ref_transcript, 's');
        let target = vocab.parse_symbols(&e.ref_translation_en, 't');
        let (Some(source), Some(target)) = (source, target) else {
            return Err(CliError::Runtime(format!(
                "{}: references are not toy symbol text",
                e.id
            )));
        };
        data.push(SyntheticUtterance {
            id: e.id,
            audio,
            source,
            target,
            split: e.split,
        });
    }
    if data.is_empty() {
        return Err(CliError::Usage("manifest has no train utterances".into()));
    }
    let mut config = ToyModelConfig {
        seed: a.seed,
        ..ToyModelConfig::default()
    };
    if let Some(s) = a.max_steps {
        config.max_steps = s;
    }
    if let Some(s) = a.min_steps {
        config.min_steps = s;
    }
    config
        .validate(&spec)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    ensure_dir(&a.out)?;
    write_json(
        &a.out.join("config.json"),
        &json!({"command": "train-toy", "manifest": a.manifest, "spec": spec, "config": config}),
    )?;
    let model = train_toy_model(config, spec, &data).map_err(CliError::runtime)?;
    let ckpt = a.out.join("model.json");
    model.save(&ckpt).map_err(CliError::runtime)?;
    let report = model.training_report().expect("trained model has a report");
    write_json(&a.out.join("training.json"), report)?;
    let last = report.last().expect("at least one accuracy check");
    if !report.converged {
        eprintln!("warning: model did not reach the accuracy target; it is degraded");
    }
    println!(
        "trained {} steps, held-out sequence accuracy tc {:.3} tl {:.3}, converged {}; checkpoint {}",
        report.steps,
        last.sequence_accuracy_tc,
        last.sequence_accuracy_tl,
        report.converged,
        ckpt.display()
    );
    Ok(())
}

pub fn gen_targets(a: TargetArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let utts = train_utterances(&a.model.manifest)?;
    ensure_dir(&a.out)?;
    let targets = generate_targets(model.as_ref(), &utts);
    targets
        .write_jsonl(&a.out.join("targets.jsonl"))
        .map_err(CliError::runtime)?;
    write_json(
        &a.out.join("config.json"),
        &json!({
            "command": "gen-targets",
            "manifest": a.model.manifest,
            "adapter": a.model.adapter,
            "checkpoint": a.model.checkpoint,
            "model_checksum": targets.model_checksum,
            "targets": targets.len(),
            "excluded": targets.excluded,
        }),
    )?;
    println!(
        "{} targets, {} excluded",
        targets.len(),
        targets.excluded.len()
    );
    Ok(())
}

fn resolve_attack_config(a: &AttackArgs, sample_rate: u32) -> Result<AttackConfig> {
    let mut c = match (a.preset, a.epsilon, a.frames) {
        (Some(p), None, None) => AttackConfig::from_preset(p, sample_rate),
        (None, Some(epsilon), Some(frames)) => AttackConfig {
            epsilon,
            segment_frames: frames,
            learning_rate: 1e-3,
            preset: None,
            ..AttackConfig::from_preset(taskflip::attack::Preset::Weak, sample_rate)
        },
        _ => {
            return Err(CliError::Usage(
                "pass --preset, or both --epsilon and --frames".into(),
            ))
        }
    };
    c.steps = a.steps;
    c.seed = a.seed;
    c.batch_size = a.batch_size;
    if let Some(lr) = a.lr {
        c.learning_rate = lr;
    }
    c.init = if a.init_scale == 0.0 {
        InitMode::Zeros
    } else {
        InitMode::UniformNoise {
            scale: a.init_scale,
        }
    };
    c.reduction = a.reduction.into();
    c.checkpoint_every = a.checkpoint_every;
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(c)
}

#[derive(Serialize)]
struct RunSummary<'a> {
    command: &'static str,
    manifest: &'a Path,
    adapter: &'a str,
    checkpoint: &'a Path,
    deterministic: bool,
    config: &'a AttackConfig,
    model_checksum: u64,
    train_utterances: usize,
    targets: usize,
    excluded: &'a [(String, String)],
    best_step: Option<u64>,
    evaluations: Option<&'a [(u64, f64)]>,
}

pub fn learn_attack(a: AttackArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let config = resolve_attack_config(&a, model.info().sample_rate)?;
    let utts = train_utterances(&a.model.manifest)?;
    ensure_dir(&a.out)?;
    let targets = match &a.targets {
        Some(p) => {
            require_file(p, "targets file")?;
            TargetSet::read_jsonl(p).map_err(CliError::runtime)?
        }
        None => {
            let t = generate_targets(model.as_ref(), &utts);
            t.write_jsonl(&a.out.join("targets.jsonl"))
                .map_err(CliError::runtime)?;
            t
        }
    };
    let checksum = model.param_checksum();
    let mut summary = RunSummary {
        command: "learn-attack",
        manifest: &a.model.manifest,
        adapter: &a.model.adapter,
        checkpoint: &a.model.checkpoint,
        deterministic: true,
        config: &config,
        model_checksum: checksum,
        train_utterances: utts.len(),
        targets: targets.len(),
        excluded: &targets.excluded,
        best_step: None,
        evaluations: None,
    };
    write_json(&a.out.join("config.json"), &summary)?;
    let sink = CheckpointSink {
        dir: Some(a.out.clone()),
    };
    let (segment, trace) =
        match train_universal_segment(model.as_ref(), &config, &utts, &targets, &sink) {
            Ok(r) => r,
            Err(e @ AttackError::InvalidConfig(_)) | Err(e @ AttackError::MissingTarget(_)) => {
                return Err(CliError::Usage(e.to_string()))
            }
            Err(e) => return Err(CliError::runtime(e)),
        };
    if model.param_checksum() != checksum {
        return Err(CliError::Runtime(
            "model parameters changed during the attack".into(),
        ));
    }
    save_segment(&segment, &a.out.join("segment")).map_err(CliError::runtime)?;
    trace.write(&a.out).map_err(CliError::runtime)?;
    summary.best_step = Some(trace.best_step);
    summary.evaluations = Some(&trace.evaluations);
    write_json(&a.out.join("run.json"), &summary)?;
    let last = trace.evaluations.last().map(|e| e.1).unwrap_or(f64::NAN);
    println!(
        "segment {} ({} samples, eps {}), best step {}, final train NLL {:.4}",
        segment_paths(&a.out.join("segment")).0.display(),
        segment.frames(),
        segment.epsilon(),
        trace.best_step,
        last
    );
    Ok(())
}

pub fn evaluate(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let detector = detector_for(&a.model)?;
    let m = read_manifest(&a.model.manifest)?;
    let test = split(&m.entries, Split::Test);
    if test.is_empty() {
        return Err(CliError::Usage("manifest has no test utterances".into()));
    }
    let segment = match &a.segment {
        Some(p) => {
            let payload = segment_paths(p).0;
            require_file(&payload, "segment file")?;
            let seg = load_segment(p).map_err(CliError::runtime)?;
            if seg.sample_rate() != model.info().sample_rate {
                return Err(CliError::Usage(format!(
                    "segment is {} Hz but the model expects {} Hz",
                    seg.sample_rate(),
                    model.info().sample_rate
                )));
            }
            Some(seg)
        }
        None => None,
    };
    let against: Option<HashMap<String, String>> = match &a.against {
        Some(dir) => {
            let p = dir.join("evaluation.json");
            require_file(&p, "reference evaluation")?;
            let e: Evaluation = read_json(&p)?;
            Some(
                e.records
                    .into_iter()
                    .filter(|r| r.is_ok())
                    .map(|r| (r.id, r.hypothesis))
                    .collect(),
            )
        }
        None => None,
    };
    let label = a.label.clone().unwrap_or_else(|| match &a.segment {
        Some(p) => format!(
            "Attack ({})",
            p.file_stem().unwrap_or_default().to_string_lossy()
        ),
        None => "No Attack".into(),
    });

    let mut items = Vec::new();
    let mut failed = Vec::new();
    for (e, audio) in load_audio(&a.model.manifest, &test) {
        let reference = match &against {
            Some(map) => map.get(&e.id).cloned(),
            None => Some(e.ref_translation_en.clone()),
        };
        match (audio, reference) {
            (Ok(audio), Some(reference)) => items.push(EvalItem {
                id: e.id,
                audio,
                reference,
            }),
            (audio, reference) => failed.push(EvalRecord {
                id: e.id,
                hypothesis: String::new(),
                reference: reference.clone().unwrap_or_default(),
                wer: None,
                bleu: None,
                p_en: None,
                error: Some(match audio {
                    Err(err) => err,
                    Ok(_) => "no reference in the comparison run".into(),
                }),
            }),
        }
    }
    let mut eval = evaluate_testset(
        model.as_ref(),
        segment.as_ref(),
        &items,
        a.mode,
        detector.as_ref(),
        &label,
    );
    if !failed.is_empty() {
        eval.records.extend(failed);
        eval.aggregate = aggregate(&eval.records, &label, a.mode);
    }

    ensure_dir(&a.out)?;
    write_json(
        &a.out.join("config.json"),
        &json!({
            "command": "evaluate",
            "manifest": a.model.manifest,
            "adapter": a.model.adapter,
            "checkpoint": a.model.checkpoint,
            "segment": a.segment,
            "mode": a.mode,
            "label": label,
            "against": a.against,
            "split": "test",
        }),
    )?;
    let mut jsonl = String::new();
    for r in &eval.records {
        jsonl += &serde_json::to_string(r).map_err(CliError::runtime)?;
        jsonl.push('\n');
    }
    let write = |name: &str, text: &str| {
        let p = a.out.join(name);
        fs::write(&p, text).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))
    };
    write("records.jsonl", &jsonl)?;
    write("records.csv", &records_csv(&eval.records))?;
    write(
        "aggregate.csv",
        &aggregates_csv(std::slice::from_ref(&eval.aggregate)),
    )?;
    write_json(&a.out.join("evaluation.json"), &eval)?;
    print!("{}", aggregate_table(std::slice::from_ref(&eval.aggregate)));
    if eval.aggregate.n_failed > 0 {
        eprintln!(
            "warning: {} utterances failed and were excluded",
            eval.aggregate.n_failed
        );
    }
    Ok(())
}

fn slug(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect();
    let parts: Vec<&str> = s.split('-').filter(|p| !p.is_empty()).collect();
    if parts.is_empty() {
        "run".into()
    } else {
        parts.join("-")
    }
}

pub fn report(a: ReportArgs) -> Result<()> {
    if a.runs.is_empty() && a.fixture.is_none() {
        return Err(CliError::Usage(
            "nothing to report: pass --run and/or --fixture".into(),
        ));
    }
    let mut missing: Vec<String> = a
        .runs
        .iter()
        .map(|d| d.join("evaluation.json"))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if let Some(f) = a.fixture.as_ref().filter(|f| !f.is_file()) {
        missing.push(f.display().to_string());
    }
    if !missing.is_empty() {
        return Err(CliError::Usage(format!(
            "missing inputs:\n  {}",
            missing.join("\n  ")
        )));
    }
    ensure_dir(&a.out)?;

    let mut input = ReportInput {
        title: a.title.clone(),
        tolerance: taskflip::report::ONE_DECIMAL_TOLERANCE,
        ..ReportInput::default()
    };
    let mut curves: Vec<(String, RecallCurve, RecallCurve)> = Vec::new();
    let mut used = HashMap::new();
    for dir in &a.runs {
        let eval: Evaluation = read_json(&dir.join("evaluation.json"))?;
        let agg = &eval.aggregate;
        input.table.push(TableRow::from(agg));
        input.decomposition.push(DecompositionRow::from(agg));
        let mut name = slug(&format!("{} {}", agg.label, agg.mode));
        let n = used.entry(name.clone()).or_insert(0);
        *n += 1;
        if *n > 1 {
            name = format!("{name}-{n}");
        }
        let (success, fail) = match recall_curves(&eval.records, &default_taus()) {
            Ok(c) => c,
            Err(e) => {
                log::warn!("{}: no curves: {e}", dir.display());
                continue;
            }
        };
        let summary = bimodality_summary(&eval.records).map_err(CliError::runtime)?;
        write_analysis(&a.out.join(&name), &success, &fail, &summary).map_err(CliError::runtime)?;
        input.distributions.push(DistributionSection {
            label: format!("{} ({})", agg.label, agg.mode),
            summary,
            success_jump: discontinuity(&success),
            fail_jump: discontinuity(&fail),
        });
        curves.push((format!("{} ({})", agg.label, agg.mode), success, fail));
    }
    if !curves.is_empty() {
        let pick = |f: fn(&(String, RecallCurve, RecallCurve)) -> &RecallCurve| {
            curves
                .iter()
                .map(|c| (c.0.as_str(), f(c)))
                .collect::<Vec<_>>()
        };
        plot_curves(
            &a.out.join("curves_success.svg"),
            "success recall",
            &pick(|c| &c.1),
        )
        .map_err(CliError::runtime)?;
        plot_curves(
            &a.out.join("curves_fail.svg"),
            "fail recall",
            &pick(|c| &c.2),
        )
        .map_err(CliError::runtime)?;
    }

    let fixture = match &a.fixture {
        Some(p) => Some(ReportInput::load(p).map_err(CliError::runtime)?),
        None => None,
    };
    let mut md = String::new();
    if !a.runs.is_empty() {
        md += &input.render();
    }
    if let Some(f) = &fixture {
        md += &f.render();
    }
    fs::write(a.out.join("report.md"), &md).map_err(CliError::runtime)?;
    write_json(
        &a.out.join("report.json"),
        &json!({
            "runs": (!a.runs.is_empty()).then_some(&input),
            "run_checks": input.checks(),
            "fixture": fixture,
            "fixture_checks": fixture.as_ref().map(|f| f.checks()),
        }),
    )?;
    write_json(
        &a.out.join("config.json"),
        &json!({"command": "report", "runs": a.runs, "fixture": a.fixture, "title": a.title}),
    )?;
    let bad: Vec<String> = input
        .checks()
        .into_iter()
        .chain(fixture.iter().flat_map(|f| f.checks()))
        .filter(|c| !c.consistent)
        .map(|c| format!("{} ({:+.2})", c.label, c.difference))
        .collect();
    if !bad.is_empty() {
        eprintln!(
            "warning: WER decomposition inconsistent for {}",
            bad.join(", ")
        );
    }
    println!("report written to {}", a.out.join("report.md").display());
    Ok(())
}
