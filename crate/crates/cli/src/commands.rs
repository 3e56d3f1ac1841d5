use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nep_core::evaluator::{bag_of_events_baseline, cohort_labels, sweep_csv, SweepRow};
use nep_core::event_model::{
    event_type_frequencies, load_cohort, parse_cohort, write_cohort, EventVocabulary, PatientRecord,
};
use nep_core::nanolm::{
    evaluate_nep_loss, export_attention, train_with_hook, write_attention, write_loss_curve,
};
use nep_core::sampler::write_selections;
use nep_core::serializer::{build_dataset, exhaustive_targets, read_instances, write_instances};
use nep_core::util::{rng_from, stage};
use nep_core::{
    build_instances, cross_validate, embed_cohort, generate_cohort, label_efficiency_sweep,
    oracle_conditional_entropy, sample_training_positions, type_distribution, AttentionMaskMode,
    Checkpoint, EmbeddingMatrix, LabeledDataset, MetricReport, ModelConfig, ModelParams, NepError,
};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{require, Manifest};

pub const COHORT: &str = "cohort.jsonl";
pub const DOWNSTREAM: &str = "downstream.jsonl";
pub const ORACLE: &str = "oracle.json";
pub const VOCAB: &str = "vocab.json";
pub const SELECTIONS: &str = "selections.jsonl";
pub const INSTANCES: &str = "instances.jsonl";
pub const HELDOUT: &str = "heldout.jsonl";
pub const SPLIT: &str = "split.json";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const UNTRAINED: &str = "untrained.json";
pub const LOSS_CURVE: &str = "loss_curve.csv";
pub const ATTENTION: &str = "attention.json";
pub const EMBEDDINGS: &str = "embeddings.bin";
pub const EMBEDDINGS_UNTRAINED: &str = "embeddings_untrained.bin";
pub const EVAL_CSV: &str = "eval.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_REPORT: &str = "sweep_report.txt";
pub const REPORT: &str = "report.md";

pub const STAGES: [&str; 6] = ["synth", "prep", "train", "embed", "eval", "sweep"];

type Res<T> = Result<T, CliError>;

fn out_dir(cfg: &RunConfig) -> Res<PathBuf> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(cfg.out_dir.clone())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Res<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_cohort(path: &Path) -> Res<Vec<PatientRecord>> {
    Ok(parse_cohort(&fs::read_to_string(path)?)?)
}

fn load_vocab(path: &Path) -> Res<EventVocabulary> {
    let mut vocab: EventVocabulary = serde_json::from_str(&fs::read_to_string(path)?)?;
    vocab.rebuild_index();
    Ok(vocab)
}

pub fn synth(cfg: &RunConfig) -> Res<()> {
    let dir = out_dir(cfg)?;
    let spec = cfg.synth_spec();
    let mut m = Manifest::new(
        "synth",
        spec.seed,
        cfg.hash_of(&(&cfg.synth, cfg.eval_patients)),
    );
    let (cohort, mut oracle) = generate_cohort(&spec)?;
    let downstream = oracle.sample_cohort(
        cfg.eval_patients,
        cfg.stage_seed(stage::SYNTH_EVAL),
        &format!("{}X", spec.id_prefix),
        spec.min_len,
        spec.max_len,
    );
    write_cohort(&dir.join(COHORT), &cohort)?;
    write_cohort(&dir.join(DOWNSTREAM), &downstream)?;
    oracle.save(&dir.join(ORACLE))?;
    for f in [COHORT, DOWNSTREAM, ORACLE] {
        m.output(&dir, f)?;
    }
    let entropy = oracle_conditional_entropy(&oracle)?;
    m.note("n_patients", cohort.len());
    m.note(
        "n_events",
        cohort.iter().map(|r| r.events.len()).sum::<usize>(),
    );
    m.note("n_downstream", downstream.len());
    m.note("oracle_entropy", entropy);
    m.save(&dir)?;
    eprintln!(
        "synth: {} patients, oracle entropy {entropy:.4} nats",
        cohort.len()
    );
    Ok(())
}

pub fn prep(cfg: &RunConfig) -> Res<()> {
    let dir = out_dir(cfg)?;
    let sampling = cfg.sampling_config();
    let parts = (
        cfg.min_code_count,
        cfg.holdout_fraction,
        &cfg.sampling,
        &cfg.serializer,
    );
    let mut m = Manifest::new("prep", sampling.seed, cfg.hash_of(&parts));
    let cohort_path = require(&dir, "synth", COHORT, &mut m)?;
    let (cohort, vocab) = load_cohort(&cohort_path, cfg.min_code_count)?;

    let mut order: Vec<usize> = (0..cohort.len()).collect();
    order.shuffle(&mut rng_from(cfg.stage_seed(stage::SPLIT)));
    let n_heldout = (cfg.holdout_fraction * cohort.len() as f64).round() as usize;
    let (held_idx, train_idx) = order.split_at(n_heldout);
    let mut held_idx = held_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    held_idx.sort_unstable();
    train_idx.sort_unstable();
    let train_cohort: Vec<PatientRecord> = train_idx.iter().map(|&i| cohort[i].clone()).collect();
    let held_cohort: Vec<&PatientRecord> = held_idx.iter().map(|&i| &cohort[i]).collect();

    let freqs = event_type_frequencies(&train_cohort)?;
    let dist = type_distribution(&freqs, sampling.alpha)?;
    let selections = sample_training_positions(&train_cohort, &dist, &sampling)?;
    let instances = build_dataset(&train_cohort, &vocab, &cfg.serializer, &selections)?;
    let mut heldout = Vec::new();
    for r in &held_cohort {
        heldout.extend(build_instances(
            r,
            &vocab,
            &cfg.serializer,
            &exhaustive_targets(r, &cfg.serializer),
        )?);
    }

    write_json(&dir.join(VOCAB), &vocab)?;
    write_selections(&dir.join(SELECTIONS), &selections)?;
    write_instances(&dir.join(INSTANCES), &instances)?;
    write_instances(&dir.join(HELDOUT), &heldout)?;
    let ids = |idx: &[usize]| {
        idx.iter()
            .map(|&i| cohort[i].patient_id.clone())
            .collect::<Vec<_>>()
    };
    write_json(
        &dir.join(SPLIT),
        &serde_json::json!({ "train": ids(&train_idx), "heldout": ids(&held_idx) }),
    )?;
    for f in [VOCAB, SELECTIONS, INSTANCES, HELDOUT, SPLIT] {
        m.output(&dir, f)?;
    }
    m.note("vocab_size", vocab.len());
    m.note("n_instances", instances.len());
    m.note("n_heldout_instances", heldout.len());
    m.note(
        "type_distribution",
        dist.entries()
            .iter()
            .map(|(t, p)| (t.as_str(), *p))
            .collect::<std::collections::BTreeMap<_, _>>(),
    );
    m.save(&dir)?;
    eprintln!(
        "prep: {} training instances, {} held-out instances, vocabulary {}",
        instances.len(),
        heldout.len(),
        vocab.len()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Res<()> {
    let dir = out_dir(cfg)?;
    let tc = cfg.train_config();
    let mut m = Manifest::new(
        "train",
        tc.seed,
        cfg.hash_of(&(&cfg.model, &cfg.train, cfg.mask_mode)),
    );
    let instances = read_instances(&require(&dir, "prep", INSTANCES, &mut m)?)?;
    let heldout = read_instances(&require(&dir, "prep", HELDOUT, &mut m)?)?;
    let vocab = load_vocab(&require(&dir, "prep", VOCAB, &mut m)?)?;

    let model = ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    };
    let init = ModelParams::<f32>::init(model, cfg.stage_seed(stage::INIT))?;
    Checkpoint::new(
        init.clone(),
        None,
        vocab.clone(),
        cfg.serializer.clone(),
        cfg.mask_mode,
    )?
    .save(&dir.join(UNTRAINED))?;

    let t0 = Instant::now();
    let every = (tc.total_steps / 20).max(1);
    let out = train_with_hook(&instances, init, &tc, cfg.mask_mode, |step, _, _| {
        if step % every == 0 {
            eprintln!(
                "train: step {step}/{} ({:.0}s)",
                tc.total_steps,
                t0.elapsed().as_secs_f64()
            );
        }
    })?;
    let ck = Checkpoint::new(
        out.params,
        out.adapters,
        vocab.clone(),
        cfg.serializer.clone(),
        cfg.mask_mode,
    )?;
    ck.save(&dir.join(CHECKPOINT))?;
    write_loss_curve(&dir.join(LOSS_CURVE), &out.curve)?;
    let mut outputs = vec![UNTRAINED, CHECKPOINT, LOSS_CURVE];
    if let Some(probe) = heldout.first() {
        let dump = export_attention(
            &ck.params,
            ck.adapters.as_ref(),
            &probe.context_tokens,
            cfg.mask_mode,
            Some(&vocab),
        )?;
        write_attention(&dir.join(ATTENTION), &dump)?;
        outputs.push(ATTENTION);
    }
    for f in outputs {
        m.output(&dir, f)?;
    }
    let tail = &out.curve[out.curve.len().saturating_sub(20)..];
    m.note("checkpoint_id", ck.id());
    m.note(
        "final_train_loss",
        tail.iter().map(|c| c.loss).sum::<f64>() / tail.len().max(1) as f64,
    );
    m.note("seconds", t0.elapsed().as_secs_f64());
    if cfg.mask_mode == AttentionMaskMode::Causal && !heldout.is_empty() {
        let ce = evaluate_nep_loss(&ck.params, ck.adapters.as_ref(), &heldout)?;
        m.note("heldout_cross_entropy", ce);
        eprintln!("train: held-out cross-entropy {ce:.4} nats");
    }
    m.save(&dir)?;
    Ok(())
}

/// Embeds the downstream cohort with the trained checkpoint (or `checkpoint`
/// when given) and with the untrained initialisation.
pub fn embed(cfg: &RunConfig, checkpoint: Option<&Path>) -> Res<()> {
    let dir = out_dir(cfg)?;
    let mut m = Manifest::new("embed", cfg.seed, cfg.hash_of(&cfg.embed));
    let cohort = read_cohort(&require(&dir, "synth", DOWNSTREAM, &mut m)?)?;
    let trained = match checkpoint {
        Some(p) => {
            m.inputs
                .insert(p.display().to_string(), crate::manifest::file_hash(p)?);
            p.to_path_buf()
        }
        None => require(&dir, "train", CHECKPOINT, &mut m)?,
    };
    let untrained = require(&dir, "train", UNTRAINED, &mut m)?;
    for (src, dst) in [(trained, EMBEDDINGS), (untrained, EMBEDDINGS_UNTRAINED)] {
        let ck = Checkpoint::load(&src)?;
        let emb = embed_cohort(&ck, &cohort, &cfg.embed)?;
        emb.write_binary(&dir.join(dst))?;
        m.output(&dir, dst)?;
        m.note(&format!("{dst}.checkpoint"), &emb.provenance.checkpoint);
    }
    m.note("n_patients", cohort.len());
    m.save(&dir)?;
    eprintln!("embed: {} patients", cohort.len());
    Ok(())
}

/// Loads embeddings and refuses them unless they were produced under the
/// configured serializer.
fn checked_embeddings(cfg: &RunConfig, path: &Path) -> Res<EmbeddingMatrix> {
    let emb = EmbeddingMatrix::read(path)?;
    let want = cfg.serializer_hash();
    if emb.provenance.serializer != want {
        return Err(NepError::Provenance(format!(
            "{} was produced under serializer config {}, but this config hashes to {want}",
            path.display(),
            emb.provenance.serializer
        ))
        .into());
    }
    Ok(emb)
}

/// Feature matrices in downstream-cohort order: NEP, untrained, bag-of-events.
type FeatureSet = (String, ndarray::Array2<f64>);

fn feature_sources(
    cfg: &RunConfig,
    dir: &Path,
    m: &mut Manifest,
    embeddings: Option<&Path>,
) -> Res<(Vec<PatientRecord>, Vec<FeatureSet>)> {
    let cohort = read_cohort(&require(dir, "synth", DOWNSTREAM, m)?)?;
    let vocab = load_vocab(&require(dir, "prep", VOCAB, m)?)?;
    let nep_path = match embeddings {
        Some(p) => {
            m.inputs
                .insert(p.display().to_string(), crate::manifest::file_hash(p)?);
            p.to_path_buf()
        }
        None => require(dir, "embed", EMBEDDINGS, m)?,
    };
    let base_path = require(dir, "embed", EMBEDDINGS_UNTRAINED, m)?;
    let ids: Vec<String> = cohort.iter().map(|r| r.patient_id.clone()).collect();
    let nep = checked_embeddings(cfg, &nep_path)?.select(&ids)?;
    let base = checked_embeddings(cfg, &base_path)?.select(&ids)?;
    let boe = bag_of_events_baseline(&cohort, &vocab);
    Ok((
        cohort,
        vec![
            ("nep".into(), nep),
            ("untrained".into(), base),
            ("bag_of_events".into(), boe),
        ],
    ))
}

pub fn eval(cfg: &RunConfig, embeddings: Option<&Path>) -> Res<()> {
    let dir = out_dir(cfg)?;
    let seed = cfg.stage_seed(stage::EVAL);
    let mut m = Manifest::new("eval", seed, cfg.hash_of(&(&cfg.eval, &cfg.serializer)));
    let (cohort, sources) = feature_sources(cfg, &dir, &mut m, embeddings)?;
    let ids: Vec<String> = cohort.iter().map(|r| r.patient_id.clone()).collect();
    let mut csv = format!("task,feature_source,{}\n", MetricReport::csv_header());
    for task in &cfg.eval.tasks {
        let labels = cohort_labels(&cohort, task)?;
        let mut text = format!(
            "task: {task}\nseed: {seed}\nrun_config_hash: {}\n",
            m.config_hash
        );
        for (name, x) in &sources {
            let ds = LabeledDataset::new(ids.clone(), x.clone(), labels.clone())?;
            let report = cross_validate(&ds, &cfg.eval.head, cfg.eval.k, seed, cfg.eval.n_boot)?;
            writeln!(text, "\n[{name}]\n{}", report.to_text()).unwrap();
            writeln!(csv, "{task},{name},{}", report.to_csv_row()).unwrap();
            m.note(&format!("{task}.{name}.median"), report.median);
            eprintln!(
                "eval: {task} {name} {} median {:.4}",
                report.metric, report.median
            );
        }
        let name = format!("eval_{task}.txt");
        fs::write(dir.join(&name), text)?;
        m.output(&dir, &name)?;
    }
    fs::write(dir.join(EVAL_CSV), csv)?;
    m.output(&dir, EVAL_CSV)?;
    m.save(&dir)?;
    Ok(())
}

fn sweep_report(
    rows: &[SweepRow],
    task: &str,
    sizes: &[usize],
    config_hash: &str,
    seed: u64,
) -> String {
    let median = |src: &str, size: usize| {
        rows.iter()
            .find(|r| r.feature_source == src && r.size == size)
            .map(|r| r.median)
            .unwrap_or(f64::NAN)
    };
    let metric = rows.first().map(|r| r.metric.as_str()).unwrap_or("");
    let mut s = format!(
        "label-efficiency sweep: task {task}, metric {metric} (median over folds)\nseed: {seed}\nrun_config_hash: {config_hash}\n\n"
    );
    writeln!(
        s,
        "{:>8}  {:>10}  {:>10}  {:>14}  nep>untrained",
        "size", "nep", "untrained", "bag_of_events"
    )
    .unwrap();
    let mut dominates = true;
    for &size in sizes {
        let (n, u, b) = (
            median("nep", size),
            median("untrained", size),
            median("bag_of_events", size),
        );
        dominates &= n > u;
        writeln!(
            s,
            "{size:>8}  {n:>10.4}  {u:>10.4}  {b:>14.4}  {}",
            if n > u { "yes" } else { "no" }
        )
        .unwrap();
    }
    writeln!(
        s,
        "\nNEP features {} untrained features at every size.",
        if dominates { "beat" } else { "do not beat" }
    )
    .unwrap();
    s
}

pub fn sweep(cfg: &RunConfig, embeddings: Option<&Path>) -> Res<()> {
    let dir = out_dir(cfg)?;
    let sc = cfg.sweep_config();
    let mut m = Manifest::new("sweep", sc.seed, cfg.hash_of(&(&cfg.eval, &cfg.serializer)));
    let (cohort, sources) = feature_sources(cfg, &dir, &mut m, embeddings)?;
    let ids: Vec<String> = cohort.iter().map(|r| r.patient_id.clone()).collect();
    let labels = cohort_labels(&cohort, &cfg.eval.sweep_task)?;
    let rows = label_efficiency_sweep(&sources, &labels, &ids, &cfg.eval.head, &sc)?;
    fs::write(dir.join(SWEEP_CSV), sweep_csv(&rows))?;
    let report = sweep_report(
        &rows,
        &cfg.eval.sweep_task,
        &sc.sizes,
        &m.config_hash,
        sc.seed,
    );
    fs::write(dir.join(SWEEP_REPORT), &report)?;
    m.output(&dir, SWEEP_CSV)?;
    m.output(&dir, SWEEP_REPORT)?;
    m.save(&dir)?;
    eprint!("{report}");
    Ok(())
}

/// Collects every stage manifest and text report under `dir` into one
/// markdown document.
pub fn report(dir: &Path) -> Res<PathBuf> {
    let mut doc = String::from("# Run report\n");
    let mut found = 0;
    for stage in STAGES {
        let Ok(m) = Manifest::load(dir, stage) else {
            continue;
        };
        found += 1;
        writeln!(
            doc,
            "\n## {stage}\n\n- seed: {}\n- config hash: {}",
            m.seed, m.config_hash
        )
        .unwrap();
        for (k, v) in &m.summary {
            writeln!(doc, "- {k}: {v}").unwrap();
        }
        if !m.outputs.is_empty() {
            writeln!(doc, "\n| output | sha256 (prefix) |\n|---|---|").unwrap();
            for (k, v) in &m.outputs {
                writeln!(doc, "| {k} | {v} |").unwrap();
            }
        }
        let reports: Vec<&String> = m.outputs.keys().filter(|k| k.ends_with(".txt")).collect();
        for name in reports {
            let text = fs::read_to_string(dir.join(name))?;
            writeln!(doc, "\n### {name}\n\n```\n{}```", text).unwrap();
        }
    }
    if found == 0 {
        return Err(
            NepError::Provenance(format!("no stage manifests under {}", dir.display())).into(),
        );
    }
    let path = dir.join(REPORT);
    fs::write(&path, doc)?;
    Ok(path)
}

pub fn all(cfg: &RunConfig) -> Res<()> {
    synth(cfg)?;
    prep(cfg)?;
    train(cfg)?;
    embed(cfg, None)?;
    eval(cfg, None)?;
    sweep(cfg, None)?;
    let path = report(&cfg.out_dir)?;
    eprintln!("report: {}", path.display());
    Ok(())
}
