use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde_json::{json, Map, Value};

use openvocab::config::RunConfig;
use openvocab::data::{Dataset, Split};
use openvocab::experiment::{self, gradcheck_suite};
use openvocab::inference::{evaluate_split_with_db, expand_vocabulary, load_db, save_db, InferenceSession, VocabularyDb};
use openvocab::metrics::{emit_report, f1_sweep, render_f1_svg, select_threshold_maxmin, ScoredPairSet, ThresholdSelection, F1_CURVES_FILE};
use openvocab::model::Model;
use openvocab::nn::checkpoint::{load_store, save_store};
use openvocab::pipeline::{
    assign_labels, caption_dataset, dedup_stage, extract_stage, merge_manifests, read_jsonl, write_jsonl, Assignment, CaptionRecord, ClusterMap, ConceptList,
    KeywordExtractor, SynonymStubEmbedder, VocabEntry, WordbankCaptioner, ASSIGNMENTS_FILE, CAPTIONS_FILE, CONCEPTS_FILE, VOCAB_FILE,
};

use crate::{Cli, Command, Stage};

pub const RUN_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const DB_FILE: &str = "vocab.db";
pub const INFERENCE_FILE: &str = "inference.json";
pub const THRESHOLD_FILE: &str = "threshold.json";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    let out = cli.common.out.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_run_record(&out, cli.command.name(), &cfg)?;
    match cli.command {
        Command::GenData => gen_data(&cfg, &out),
        Command::Train { data } => train(&cfg, &out, data.as_deref()),
        Command::ExpandVocab {
            checkpoint,
            db,
            labels,
            split,
            data,
        } => expand_vocab(&cfg, &out, &checkpoint, db.as_deref(), labels.as_deref(), split.as_deref(), data.as_deref()),
        Command::Infer {
            checkpoint,
            db,
            video,
            data,
            threshold,
            top,
        } => infer(&cfg, &out, &checkpoint, &db, &video, data.as_deref(), threshold, top),
        Command::Eval {
            scores,
            checkpoint,
            db,
            split,
            data,
            threshold,
        } => eval(&cfg, &out, &scores, checkpoint.as_deref().zip(db.as_deref()), &split, data.as_deref(), threshold),
        Command::Calibrate { val, apply } => calibrate(&out, &val, &apply),
        Command::Pipeline { stage, data, from } => {
            let from = from.unwrap_or_else(|| out.clone());
            pipeline(&cfg, &out, stage, data.as_deref(), &from)
        }
        Command::Plot { scores, threshold } => plot(&out, &scores, threshold),
        Command::Gradcheck => gradcheck(&cfg, &out),
    }
}

/// `--config`, else the `config.json` saved next to a checkpoint, else the
/// defaults; then `--set` overrides, then `--seed`.
fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let path = match &cli.common.config {
        Some(p) => Some(p.clone()),
        None => checkpoint_of(&cli.command).and_then(config_beside),
    };
    let mut cfg = match &path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if !cli.common.overrides.is_empty() {
        let mut m = Map::new();
        for kv in &cli.common.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
            let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            m.insert(k.trim().to_string(), v);
        }
        cfg = cfg.with_overrides(&m)?;
    }
    let seed = cli.common.seed.unwrap_or(cfg.seed);
    Ok(cfg.with_seed(seed))
}

fn checkpoint_of(cmd: &Command) -> Option<&Path> {
    match cmd {
        Command::ExpandVocab { checkpoint, .. } | Command::Infer { checkpoint, .. } => Some(checkpoint),
        Command::Eval { checkpoint, .. } => checkpoint.as_deref(),
        _ => None,
    }
}

/// Looks in the checkpoint's directory and, for `checkpoints/step_N.ckpt`,
/// one level up.
fn config_beside(ckpt: &Path) -> Option<PathBuf> {
    ckpt.ancestors().skip(1).take(2).map(|d| d.join(CONFIG_FILE)).find(|p| p.is_file())
}

fn write_run_record(out: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    let record = json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "seed": cfg.seed,
        "config": cfg.to_flat(),
        "source_hash": env!("OPENVOCAB_SOURCE_HASH"),
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_json(&out.join(RUN_FILE), &record)
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn dataset(cfg: &RunConfig, dir: Option<&Path>) -> Result<Dataset> {
    Ok(match dir {
        Some(d) => Dataset::load(d).with_context(|| format!("loading dataset {}", d.display()))?,
        None => experiment::build_dataset(cfg)?,
    })
}

fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<Model> {
    let mut model = Model::new(cfg.model.clone())?;
    load_store(&mut model.store, ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    Ok(model)
}

fn parse_split(s: &str) -> Result<Split> {
    Split::parse(s).ok_or_else(|| anyhow!("unknown split {s:?}; expected train, val, test_closed or test_open"))
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = experiment::build_dataset(cfg)?;
    ds.write(out)?;
    for s in Split::ALL {
        println!("{:<12} {:>4} videos", s.as_str(), ds.split(s).len());
    }
    println!("{} vocabulary labels", ds.vocabulary.len());
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path, data: Option<&Path>) -> Result<()> {
    let ds = dataset(cfg, data)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_flat_json())?;
    let run = experiment::train(cfg, &ds, Some(out))?;
    save_store(&run.model.store, &out.join(MODEL_FILE))?;
    let db = VocabularyDb::new(run.model.backbones.config.joint_dim);
    let db = expand_vocabulary(&db, &ds.split_vocabulary(Split::Train), &run.model, cfg.eval.precision)?;
    save_db(&db, &out.join(DB_FILE))?;
    if let Some(last) = run.log.last() {
        println!("step {} loss {:.4} {}", last.step, last.loss, Value::Object(last.eval.clone()));
    }
    println!("wrote {} and {} ({} labels)", out.join(MODEL_FILE).display(), out.join(DB_FILE).display(), db.labels().len());
    Ok(())
}

fn expand_vocab(
    cfg: &RunConfig,
    out: &Path,
    ckpt: &Path,
    db_path: Option<&Path>,
    labels: Option<&Path>,
    split: Option<&str>,
    data: Option<&Path>,
) -> Result<()> {
    let model = load_model(cfg, ckpt)?;
    let labels: Vec<String> = match (labels, split) {
        (Some(p), _) => fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        (None, Some(s)) => dataset(cfg, data)?.split_vocabulary(parse_split(s)?),
        (None, None) => bail!("pass --labels FILE or --split NAME"),
    };
    let base = match db_path {
        Some(p) => load_db(p)?,
        None => VocabularyDb::new(model.backbones.config.joint_dim),
    };
    let before = base.labels().len();
    let db = expand_vocabulary(&base, &labels, &model, cfg.eval.precision)?;
    save_db(&db, &out.join(DB_FILE))?;
    println!("{} labels ({} new) in {}", db.labels().len(), db.labels().len() - before, out.join(DB_FILE).display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn infer(cfg: &RunConfig, out: &Path, ckpt: &Path, db: &Path, video: &str, data: Option<&Path>, threshold: Option<f64>, top: usize) -> Result<()> {
    let model = load_model(cfg, ckpt)?;
    let ds = dataset(cfg, data)?;
    let record = ds.records.iter().find(|r| r.video_id == video).ok_or_else(|| anyhow!("no video {video:?} in the dataset"))?;
    let frames = ds.frames(record)?;
    let session = InferenceSession::new(&model, load_db(db)?, cfg.eval.precision)?;
    let result = session.infer(video, &frames, threshold.or(cfg.eval.threshold), None)?;
    write_json(&out.join(INFERENCE_FILE), &serde_json::to_value(&result)?)?;
    for s in result.ranked().into_iter().take(top) {
        println!("{:>8.4}  {}", s.score, s.label);
    }
    if let Some(p) = &result.predicted {
        println!("predicted: {}", p.join(", "));
    }
    Ok(())
}

fn read_scores(paths: &[PathBuf]) -> Result<Vec<ScoredPairSet>> {
    paths
        .iter()
        .map(|p| {
            let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            ScoredPairSet::read_jsonl(p, name).with_context(|| format!("reading scores {}", p.display()))
        })
        .collect()
}

fn fixed_selection(sets: &[ScoredPairSet], threshold: f64) -> ThresholdSelection {
    ThresholdSelection {
        threshold,
        per_dataset: sets.iter().map(|s| (s.dataset.clone(), f1_sweep(&s.scored(), &[threshold])[0])).collect(),
        rule: "fixed".into(),
    }
}

fn eval(
    cfg: &RunConfig,
    out: &Path,
    scores: &[PathBuf],
    model_db: Option<(&Path, &Path)>,
    splits: &[String],
    data: Option<&Path>,
    threshold: Option<f64>,
) -> Result<()> {
    let sets = match model_db {
        None if scores.is_empty() => bail!("pass --scores FILE... or --checkpoint and --db"),
        None => read_scores(scores)?,
        Some((ckpt, db_path)) => {
            let model = load_model(cfg, ckpt)?;
            let db = load_db(db_path)?;
            let ds = dataset(cfg, data)?;
            let mut sets = Vec::new();
            for s in splits {
                let split = parse_split(s)?;
                let mut set = evaluate_split_with_db(&model, &ds, split, &db, cfg.eval.precision, None)?;
                set.dataset = split.as_str().to_string();
                fs::write(out.join(format!("scores_{}.jsonl", split.as_str())), set.to_jsonl())?;
                sets.push(set);
            }
            sets
        }
    };
    let selection = threshold.or(cfg.eval.threshold).map(|t| fixed_selection(&sets, t));
    let report = emit_report(&sets, selection, out)?;
    for d in &report.datasets {
        println!("{:<16} pairs {:>6}  prevalence {:.3}  AUPR {:.4}  Peak F1 {:.4}", d.dataset, d.pairs, d.prevalence, d.aupr, d.peak_f1);
    }
    Ok(())
}

fn calibrate(out: &Path, val: &[PathBuf], apply: &[PathBuf]) -> Result<()> {
    let vals = read_scores(val)?;
    let held = read_scores(apply)?;
    let selection = select_threshold_maxmin(&vals, None)?;
    let mut all = vals.clone();
    all.extend(held.iter().cloned());
    let report = emit_report(&all, Some(selection.clone()), out)?;
    let applied: Vec<Value> = report.datasets[vals.len()..]
        .iter()
        .map(|d| {
            let f1 = d.f1_at_selected.unwrap_or(0.0);
            json!({"dataset": d.dataset, "f1": f1, "peak_f1": d.peak_f1, "relative": if d.peak_f1 > 0.0 { f1 / d.peak_f1 } else { 0.0 }})
        })
        .collect();
    write_json(&out.join(THRESHOLD_FILE), &json!({"selection": selection, "applied": applied}))?;
    println!("threshold {:.6} (worst validation F1 {:.4})", selection.threshold, selection.min_f1());
    for a in &applied {
        println!("{:<16} F1 {:.4} of peak {:.4}", a["dataset"].as_str().unwrap_or(""), a["f1"].as_f64().unwrap_or(0.0), a["peak_f1"].as_f64().unwrap_or(0.0));
    }
    Ok(())
}

fn pipeline(cfg: &RunConfig, out: &Path, stage: Stage, data: Option<&Path>, from: &Path) -> Result<()> {
    let embedder = SynonymStubEmbedder::with_default_table(cfg.pipeline.stub_dim, cfg.seed);
    let run_one = |stage: Stage, from: &Path| -> Result<()> {
        match stage {
            Stage::Captions => {
                let ds = dataset(cfg, data)?;
                let caps = caption_dataset(&ds, &WordbankCaptioner { dataset: &ds })?;
                write_jsonl(&out.join(CAPTIONS_FILE), &caps)?;
                println!("captioned {} videos", caps.len());
            }
            Stage::Extract => {
                let caps: Vec<CaptionRecord> = read_jsonl(&from.join(CAPTIONS_FILE))?;
                let lists = extract_stage(&caps, &KeywordExtractor::wordbank())?;
                write_jsonl(&out.join(CONCEPTS_FILE), &lists)?;
                println!("extracted concepts for {} videos", lists.len());
            }
            Stage::Dedup => {
                let lists: Vec<ConceptList> = read_jsonl(&from.join(CONCEPTS_FILE))?;
                let (map, entries) = dedup_stage(&lists, &embedder, &cfg.pipeline.dedup)?;
                write_jsonl(&out.join(VOCAB_FILE), &entries)?;
                println!("{} concepts into {} labels", entries.len(), map.vocabulary().len());
            }
            Stage::Assign => {
                let caps: Vec<CaptionRecord> = read_jsonl(&from.join(CAPTIONS_FILE))?;
                let entries: Vec<VocabEntry> = read_jsonl(&from.join(VOCAB_FILE))?;
                let vocab = ClusterMap::from_entries(&entries).vocabulary();
                let assigns = assign_labels(&caps, &vocab, &embedder, &cfg.pipeline.assign)?;
                write_jsonl(&out.join(ASSIGNMENTS_FILE), &assigns)?;
                println!("{} label assignments", assigns.iter().map(|a| a.labels.len()).sum::<usize>());
            }
            Stage::Merge => {
                let mut ds = dataset(cfg, data)?;
                let assigns: Vec<Assignment> = read_jsonl(&from.join(ASSIGNMENTS_FILE))?;
                let (records, vocabulary) = merge_manifests(&ds.records, &ds.vocabulary, &assigns)?;
                ds.records = records;
                ds.vocabulary = vocabulary;
                ds.validate()?;
                let dir = out.join("merged");
                ds.write(&dir)?;
                println!("merged dataset with {} labels in {}", ds.vocabulary.len(), dir.display());
            }
            Stage::All => unreachable!("expanded by the caller"),
        }
        Ok(())
    };
    if stage == Stage::All {
        for s in [Stage::Captions, Stage::Extract, Stage::Dedup, Stage::Assign, Stage::Merge] {
            run_one(s, out)?;
        }
        Ok(())
    } else {
        run_one(stage, from)
    }
}

fn plot(out: &Path, scores: &[PathBuf], threshold: Option<f64>) -> Result<()> {
    let sets = read_scores(scores)?;
    let svg = render_f1_svg(&sets, threshold)?;
    let path = out.join(F1_CURVES_FILE);
    fs::write(&path, svg)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn gradcheck(cfg: &RunConfig, out: &Path) -> Result<()> {
    let entries = gradcheck_suite(cfg)?;
    let mut rows = Vec::new();
    for e in &entries {
        println!("{:<20} {:<44} max relative error {:.3e}", e.component, e.report.param, e.report.max_rel_error);
        rows.push(json!({"component": e.component, "param": e.report.param, "max_rel_error": e.report.max_rel_error, "coords": e.report.coords.len()}));
    }
    write_json(&out.join(GRADCHECK_FILE), &Value::Array(rows))?;
    let worst = entries.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max);
    if !(worst < GRADCHECK_TOLERANCE) {
        bail!("gradient check failed: max relative error {worst:.3e} >= {GRADCHECK_TOLERANCE:e}");
    }
    Ok(())
}
