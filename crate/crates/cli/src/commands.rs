use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use phmn_core::corpus::{
    self, derive_seed, encode_example, load_split, read_histories, read_manifest, read_sessions, read_vocab,
    write_corpus, CorpusConfig, CorpusError, DialogueCase, EncodeLimits, EncodedExample, Manifest,
};
use phmn_core::eval::{self, MetricsReport};
use phmn_core::fingerprint;
use phmn_core::model::{score_example, ModelConfig, ModelError, Variant};
use phmn_core::persona::{self, TfidfModel};
use phmn_core::train::{load_model, Dataset, Outcome, TrainConfig, TrainError, Trainer};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::{merge, RunFile};
use crate::{read_bytes, require, resolve, AblateArgs, BuildCorpusArgs, BuildTfidfArgs, EvaluateArgs, Failure, RankArgs, TrainArgs, TrainSettings};

/// Record of the run that produced a directory's contents.
const RUN_FILE: &str = "run.json";

fn config_failure(section: &str, key: &str, msg: String) -> Failure {
    Failure::Config {
        key: format!("{section}.{key}"),
        msg,
    }
}

fn corpus_failure(e: CorpusError) -> Failure {
    match e {
        CorpusError::Config { key, msg } => config_failure("corpus", key, msg),
        e => e.into(),
    }
}

fn model_failure(e: ModelError) -> Failure {
    match e {
        ModelError::Config { key, msg } => config_failure("model", key, msg),
        e => e.into(),
    }
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::Config { key, msg } => config_failure("train", key, msg),
        TrainError::Model(e) => model_failure(e),
        TrainError::Resume(m) => Failure::Conflict(m),
        e => e.into(),
    }
}

fn parse_variant(s: &str) -> Result<Variant, Failure> {
    s.parse().map_err(|msg| Failure::Config {
        key: "variant".into(),
        msg,
    })
}

fn stamp(v: &Value) -> String {
    fingerprint(&serde_json::to_vec(v).expect("json"))
}

fn write_json(path: &Path, v: &Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    fs::write(path, text)?;
    Ok(())
}

enum Guard {
    Proceed,
    UpToDate,
}

/// Decide whether an output directory may be (re)written. A directory
/// whose run record carries the same stamp is already up to date.
fn guard_dir(out: &Path, stamp: &str, force: bool) -> Result<Guard, Failure> {
    if force || !out.exists() {
        return Ok(Guard::Proceed);
    }
    let run = out.join(RUN_FILE);
    if run.exists() {
        let v: Value = serde_json::from_slice(&fs::read(&run)?)?;
        if v["stamp"] == stamp {
            return Ok(Guard::UpToDate);
        }
    } else if fs::read_dir(out)?.next().is_none() {
        return Ok(Guard::Proceed);
    }
    Err(Failure::Conflict(format!(
        "{} holds outputs of a different run; pass --force to overwrite",
        out.display()
    )))
}

/// Same as [`guard_dir`] for a single JSON report file.
fn guard_file(out: &Path, stamp: &str, force: bool) -> Result<Guard, Failure> {
    if force || !out.exists() {
        return Ok(Guard::Proceed);
    }
    let old: Option<Value> = serde_json::from_slice(&fs::read(out)?).ok();
    if old.is_some_and(|v| v["stamp"] == stamp) {
        return Ok(Guard::UpToDate);
    }
    Err(Failure::Conflict(format!(
        "{} exists and was written by a different run; pass --force to overwrite",
        out.display()
    )))
}

fn up_to_date(what: &str, out: &Path) -> Result<(), Failure> {
    log::info!("{what} at {} is up to date; nothing to do", out.display());
    Ok(())
}

fn metrics_json(r: &MetricsReport) -> Value {
    json!({
        "groups": r.groups,
        "R2@1": r.r2_1,
        "R10@1": r.r10_1,
        "R10@2": r.r10_2,
        "R10@5": r.r10_5,
        "MRR": r.mrr,
    })
}

// ---------------------------------------------------------------------------
// build-corpus / build-tfidf
// ---------------------------------------------------------------------------

pub fn build_corpus(a: BuildCorpusArgs) -> Result<(), Failure> {
    let file = RunFile::load(a.config.as_deref().map(resolve).as_deref())?;
    let mut cfg: CorpusConfig = merge("corpus", &CorpusConfig::default(), file.corpus.as_ref(), &[])?;
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.min_utts, a.min_utts);
    set(&mut cfg.min_turns, a.min_turns);
    set(&mut cfg.max_turns, a.max_turns);
    set(&mut cfg.history_cap, a.history_cap);
    set(&mut cfg.max_len, a.max_len);
    set(&mut cfg.vocab_cap, a.vocab_cap);
    set(&mut cfg.neg_train, a.neg_train);
    set(&mut cfg.neg_eval, a.neg_eval);
    if let Some(v) = a.valid_frac {
        cfg.valid_frac = v;
    }
    if let Some(v) = a.test_frac {
        cfg.test_frac = v;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(corpus_failure)?;

    let bytes = read_bytes(&resolve(&a.sessions))?;
    let out = resolve(&a.out);
    let stamp = stamp(&json!({
        "command": "build-corpus",
        "sessions": fingerprint(&bytes),
        "config": cfg,
    }));
    if let Guard::UpToDate = guard_dir(&out, &stamp, a.force)? {
        return up_to_date("corpus", &out);
    }
    let sessions = read_sessions(&bytes[..]).map_err(corpus_failure)?;
    log::info!("read {} sessions", sessions.len());
    let built = corpus::build_corpus(&sessions, &cfg).map_err(corpus_failure)?;
    let manifest = write_corpus(&out, &built).map_err(corpus_failure)?;
    for s in &manifest.splits {
        log::info!("split {}: {} examples in groups of {}", s.name, s.examples, s.group_size);
    }
    write_json(
        &out.join(RUN_FILE),
        &json!({
            "command": "build-corpus",
            "stamp": stamp,
            "seed": cfg.seed,
            "fingerprint": manifest.fingerprint,
            "users": manifest.users.len(),
            "vocab_size": manifest.vocab_size,
        }),
    )?;
    log::info!("corpus written to {}", out.display());
    Ok(())
}

fn tfidf_fingerprint(dir: &Path) -> Result<String, Failure> {
    let mut bytes = read_bytes(&dir.join("tfidf.tsv"))?;
    bytes.extend(read_bytes(&dir.join("counts.tsv"))?);
    Ok(fingerprint(&bytes))
}

pub fn build_tfidf(a: BuildTfidfArgs) -> Result<(), Failure> {
    let bytes = read_bytes(&resolve(&a.histories))?;
    let out = resolve(&a.out);
    let stamp = stamp(&json!({
        "command": "build-tfidf",
        "histories": fingerprint(&bytes),
    }));
    if let Guard::UpToDate = guard_dir(&out, &stamp, a.force)? {
        return up_to_date("tf-idf statistics", &out);
    }
    let histories = read_histories(&bytes[..]).map_err(corpus_failure)?;
    let model = persona::build_tfidf(&histories)?;
    fs::create_dir_all(&out)?;
    model.write_dir(&out)?;
    write_json(
        &out.join(RUN_FILE),
        &json!({
            "command": "build-tfidf",
            "stamp": stamp,
            "users": model.doc_count,
            "fingerprint": tfidf_fingerprint(&out)?,
        }),
    )?;
    log::info!("tf-idf statistics for {} users written to {}", model.doc_count, out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train / ablate
// ---------------------------------------------------------------------------

/// Everything a training run needs, validated.
struct Prepared {
    corpus_dir: PathBuf,
    manifest: Manifest,
    tfidf: Option<(TfidfModel, String)>,
    model: ModelConfig,
    train: TrainConfig,
}

impl Prepared {
    fn tfidf(&self) -> Option<&TfidfModel> {
        self.tfidf.as_ref().map(|(t, _)| t)
    }

    fn tfidf_fingerprint(&self) -> Option<&str> {
        self.tfidf.as_ref().map(|(_, f)| f.as_str())
    }
}

const CORPUS_KEY: &str = "set from the corpus manifest";

fn prepare(s: &TrainSettings, file: &RunFile, variant: Variant, fusion: Option<(bool, bool)>) -> Result<Prepared, Failure> {
    let corpus_dir = resolve(&s.corpus);
    require(&corpus_dir.join("manifest.json"))?;
    let manifest = read_manifest(&corpus_dir).map_err(corpus_failure)?;
    let limits = manifest.config.limits();
    let base = ModelConfig {
        vocab_size: manifest.vocab_size,
        max_turns: limits.max_turns,
        max_len: limits.max_len,
        history_cap: limits.history_cap,
        ..ModelConfig::for_variant(variant)
    };
    let reserved = [
        ("vocab_size", CORPUS_KEY),
        ("max_turns", CORPUS_KEY),
        ("max_len", CORPUS_KEY),
        ("history_cap", CORPUS_KEY),
        ("variant", "chosen with --variant"),
        ("init_seed", "derived from --seed"),
    ];
    let mut model: ModelConfig = merge("model", &base, file.model.as_ref(), &reserved)?;
    let mut train: TrainConfig =
        merge("train", &TrainConfig::default(), file.train.as_ref(), &[("seed", "set with --seed")])?;
    if let Some((gate, aux)) = fusion {
        model.gate_enabled = gate;
        model.aux_losses_enabled = aux;
    }
    let seed = s.seed.unwrap_or(0);
    train.seed = seed;
    model.init_seed = derive_seed(seed, "init");
    if s.history_size.is_some() {
        train.history_size = s.history_size;
    }
    if s.max_steps.is_some() {
        train.max_steps = s.max_steps;
    }
    if let Some(e) = s.max_epochs {
        train.max_epochs = e;
    }
    if s.no_clip {
        train.clip_norm = None;
    }
    if train.history_size == Some(0) {
        return Err(config_failure("train", "history_size", "must be positive".into()));
    }
    model.validate().map_err(model_failure)?;
    train.validate().map_err(train_failure)?;

    let tfidf = match &s.tfidf {
        Some(d) => {
            let d = resolve(d);
            require(&d.join("tfidf.tsv"))?;
            Some((TfidfModel::read_dir(&d)?, tfidf_fingerprint(&d)?))
        }
        None if model.masks_active() => {
            return Err(Failure::Config {
                key: "tfidf".into(),
                msg: format!("{variant} needs --tfidf for its attention masks (or model.mask_mode = \"off\")"),
            })
        }
        None => None,
    };
    Ok(Prepared {
        corpus_dir,
        manifest,
        tfidf,
        model,
        train,
    })
}

fn run_stamp(command: &str, p: &Prepared) -> Value {
    json!({
        "command": command,
        "corpus": p.manifest.fingerprint,
        "tfidf": p.tfidf_fingerprint(),
        "model": p.model,
        "train": p.train,
    })
}

fn split(p: &Prepared, name: &str) -> Result<Vec<EncodedExample>, Failure> {
    Ok(load_split(&p.corpus_dir, name).map_err(corpus_failure)?.0)
}

/// Train into `out` (checkpoints and log) and return the trainer.
fn train_into(p: &Prepared, out: &Path, resume: bool) -> Result<Trainer, Failure> {
    fs::create_dir_all(out)?;
    let state = out.join("state.ckpt");
    let mut trainer = if resume {
        require(&state)?;
        Trainer::resume(&state, p.model.clone(), p.train.clone(), &p.manifest.fingerprint).map_err(train_failure)?
    } else {
        Trainer::new(p.model.clone(), p.train.clone(), &p.manifest.fingerprint).map_err(train_failure)?
    };
    let history = p.train.history_size;
    let train = Dataset::new(&trainer.model, split(p, "train")?, p.tfidf(), history);
    let valid_examples = split(p, "valid")?;
    let valid = if valid_examples.is_empty() {
        log::warn!("no validation split; keeping the final parameters");
        None
    } else {
        Some(Dataset::new(&trainer.model, valid_examples, p.tfidf(), history))
    };
    log::info!(
        "training {} on {} examples from step {}",
        p.model.variant,
        train.len(),
        trainer.progress.step
    );
    let log_path = out.join("train_log.jsonl");
    let file = if resume {
        OpenOptions::new().append(true).create(true).open(&log_path)?
    } else {
        File::create(&log_path)?
    };
    let mut log = BufWriter::new(file);
    let result = trainer.run(&train, valid.as_ref(), &mut log);
    log.flush()?;
    // on divergence the parameters are the last good ones
    trainer.save_state(&state).map_err(train_failure)?;
    trainer.save_best(&out.join("best.ckpt")).map_err(train_failure)?;
    match result {
        Ok(Outcome::EarlyStopped) => log::info!("early stop at step {}", trainer.progress.step),
        Ok(Outcome::Finished) => log::info!("finished at step {}", trainer.progress.step),
        Err(e) => return Err(train_failure(e)),
    }
    Ok(trainer)
}

fn train_summary(t: &Trainer) -> Value {
    json!({
        "variant": t.model.cfg.variant,
        "gate": t.model.cfg.gate_enabled,
        "aux_losses": t.model.cfg.aux_losses_enabled,
        "seed": t.cfg.seed,
        "history_size": t.cfg.history_size,
        "steps": t.progress.step,
        "epochs_started": t.progress.epoch + 1,
        "early_stopped": t.progress.stopped,
        "best_step": t.progress.best_step,
        "best_valid": t.best_metrics.as_ref().map(metrics_json),
    })
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let variant = parse_variant(a.variant.as_deref().unwrap_or("PHMN"))?;
    let file = RunFile::load(a.settings.config.as_deref().map(resolve).as_deref())?;
    let p = prepare(&a.settings, &file, variant, None)?;
    let out = resolve(&a.settings.out);
    let stamp = stamp(&run_stamp("train", &p));
    if !a.resume {
        if let Guard::UpToDate = guard_dir(&out, &stamp, a.settings.force)? {
            return up_to_date("model", &out);
        }
    }
    let trainer = train_into(&p, &out, a.resume)?;
    let mut run = train_summary(&trainer);
    run["command"] = json!("train");
    run["stamp"] = json!(stamp);
    write_json(&out.join(RUN_FILE), &run)?;
    Ok(())
}

/// Row label in the style of the fusion ablation table, e.g. `PHMN_L+gate`
/// or `HMN_W+L+L1+L2`.
pub fn fusion_row_name(v: Variant, gate: bool, aux: bool) -> String {
    let mut suffix = String::from("L");
    if aux {
        suffix.push_str("+L1+L2");
    }
    if gate {
        suffix.push_str("+gate");
    }
    let name = v.name();
    if name.contains('_') {
        format!("{name}+{suffix}")
    } else {
        format!("{name}_{suffix}")
    }
}

pub fn ablate(a: AblateArgs) -> Result<(), Failure> {
    let file = RunFile::load(a.settings.config.as_deref().map(resolve).as_deref())?;
    let (mode, rows): (&str, Vec<(String, Variant, Option<(bool, bool)>)>) = match &a.variants {
        Some(list) => {
            let rows = list
                .iter()
                .map(|s| parse_variant(s.trim()).map(|v| (v.name().to_string(), v, None)))
                .collect::<Result<Vec<_>, _>>()?;
            if rows.is_empty() {
                return Err(Failure::Usage("--variants is empty".into()));
            }
            ("variants", rows)
        }
        None => {
            let v = parse_variant(&a.variant)?;
            if !v.is_fused() {
                return Err(Failure::Config {
                    key: "variant".into(),
                    msg: format!("the gate/auxiliary-loss grid needs a fused variant (PHMN or HMN_W), got {v}"),
                });
            }
            let grid = [(false, false), (true, false), (false, true), (true, true)];
            ("fusion", grid.iter().map(|&(g, x)| (fusion_row_name(v, g, x), v, Some((g, x)))).collect())
        }
    };
    // validate every row before training any of them
    let prepared = rows
        .iter()
        .map(|(_, v, fusion)| prepare(&a.settings, &file, *v, *fusion))
        .collect::<Result<Vec<_>, _>>()?;
    let out = resolve(&a.settings.out);
    let stamp = stamp(&json!({
        "command": "ablate",
        "mode": mode,
        "rows": prepared.iter().map(|p| run_stamp("ablate-row", p)).collect::<Vec<_>>(),
    }));
    if let Guard::UpToDate = guard_dir(&out, &stamp, a.settings.force)? {
        return up_to_date("ablation", &out);
    }
    fs::create_dir_all(&out)?;

    let mut table = Vec::new();
    for ((name, _, _), p) in rows.iter().zip(&prepared) {
        log::info!("ablation row {name}");
        let trainer = train_into(p, &out.join(name), false)?;
        let test = split(p, "test")?;
        if test.is_empty() {
            return Err(Failure::Runtime(anyhow::anyhow!("corpus has no test split")));
        }
        let data = Dataset::new(&trainer.model, test, p.tfidf(), p.train.history_size);
        let (report, _) = eval::evaluate(&trainer.model, trainer.best_params(), &data.examples, &data.weights)?;
        let mut row = train_summary(&trainer);
        row["name"] = json!(name);
        row["test"] = metrics_json(&report);
        table.push((name.clone(), report, row));
    }
    let seed = prepared[0].train.seed;
    let report = json!({
        "command": "ablate",
        "stamp": stamp,
        "mode": mode,
        "seed": seed,
        "history_size": prepared[0].train.history_size,
        "rows": table.iter().map(|(_, _, r)| r.clone()).collect::<Vec<_>>(),
    });
    write_json(&out.join("ablation.json"), &report)?;
    write_json(&out.join(RUN_FILE), &json!({"command": "ablate", "stamp": stamp, "rows": table.len()}))?;

    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "| model | R2@1 | R10@1 | R10@2 | R10@5 | MRR |")?;
    writeln!(stdout, "|---|---|---|---|---|---|")?;
    for (name, r, _) in &table {
        writeln!(
            stdout,
            "| {name} | {:.1} | {:.1} | {:.1} | {:.1} | {:.1} |",
            100.0 * r.r2_1,
            100.0 * r.r10_1,
            100.0 * r.r10_2,
            100.0 * r.r10_5,
            100.0 * r.mrr
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate / rank
// ---------------------------------------------------------------------------

fn history_size_of(meta: &Value) -> Option<usize> {
    meta["train_config"]["history_size"].as_u64().map(|n| n as usize)
}

fn load_tfidf_for(masks: bool, dir: Option<&Path>, variant: Variant) -> Result<Option<(TfidfModel, String)>, Failure> {
    match dir {
        Some(d) => {
            let d = resolve(d);
            require(&d.join("tfidf.tsv"))?;
            Ok(Some((TfidfModel::read_dir(&d)?, tfidf_fingerprint(&d)?)))
        }
        None if masks => Err(Failure::Config {
            key: "tfidf".into(),
            msg: format!("{variant} needs --tfidf for its attention masks"),
        }),
        None => Ok(None),
    }
}

pub fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let ck = resolve(&a.checkpoint);
    let ck_fp = fingerprint(&read_bytes(&ck)?);
    let loaded = load_model(&ck).map_err(train_failure)?;
    let dir = resolve(&a.test);
    require(&dir.join("manifest.json"))?;
    let manifest = read_manifest(&dir).map_err(corpus_failure)?;
    if loaded.corpus_fingerprint != manifest.fingerprint {
        return Err(Failure::Conflict(format!(
            "checkpoint was trained on corpus {}, {} holds {}",
            loaded.corpus_fingerprint,
            dir.display(),
            manifest.fingerprint
        )));
    }
    if !manifest.splits.iter().any(|s| s.name == a.split) {
        return Err(Failure::Config {
            key: "split".into(),
            msg: format!("no split named {:?} in {}", a.split, dir.display()),
        });
    }
    let cfg = &loaded.model.cfg;
    let tfidf = load_tfidf_for(cfg.masks_active(), a.tfidf.as_deref(), cfg.variant)?;
    let history = history_size_of(&loaded.meta);
    let out = resolve(&a.out);
    let stamp = stamp(&json!({
        "command": "evaluate",
        "checkpoint": ck_fp,
        "corpus": manifest.fingerprint,
        "tfidf": tfidf.as_ref().map(|(_, f)| f),
        "split": a.split,
    }));
    if let Guard::UpToDate = guard_file(&out, &stamp, a.force)? {
        return up_to_date("report", &out);
    }
    let (examples, _) = load_split(&dir, &a.split).map_err(corpus_failure)?;
    let data = Dataset::new(&loaded.model, examples, tfidf.as_ref().map(|(t, _)| t), history);
    let (report, groups) = eval::evaluate(&loaded.model, &loaded.params, &data.examples, &data.weights)?;
    log::info!(
        "{} on {}: R10@1 {:.4} MRR {:.4} over {} groups",
        cfg.variant,
        a.split,
        report.r10_1,
        report.mrr,
        report.groups
    );
    let doc = json!({
        "command": "evaluate",
        "stamp": stamp,
        "variant": cfg.variant,
        "split": a.split,
        "history_size": history,
        "seed": loaded.meta["train_config"]["seed"],
        "step": loaded.meta["step"],
        "checkpoint": ck_fp,
        "corpus": manifest.fingerprint,
        "metrics": metrics_json(&report),
    });
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_json(&out, &doc)?;
    if let Some(s) = &a.scores {
        let mut w = BufWriter::new(File::create(resolve(s))?);
        for (i, g) in groups.iter().enumerate() {
            writeln!(w, "{}", json!({"group": i, "scores": g}))?;
        }
        w.flush()?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RankCase {
    context: Vec<String>,
    candidates: Vec<String>,
    responder_id: String,
    /// Defaults to the responder's history stored in the corpus.
    #[serde(default)]
    responder_history: Option<Vec<String>>,
}

pub fn rank(a: RankArgs) -> Result<(), Failure> {
    let ck = resolve(&a.checkpoint);
    require(&ck)?;
    let loaded = load_model(&ck).map_err(train_failure)?;
    let case: RankCase = serde_json::from_str(&crate::read_to_string(&resolve(&a.case))?).map_err(|e| Failure::Config {
        key: "case".into(),
        msg: e.to_string(),
    })?;
    if case.candidates.is_empty() {
        return Err(Failure::Config {
            key: "case.candidates".into(),
            msg: "no candidates to rank".into(),
        });
    }
    let corpus_dir = resolve(&a.corpus);
    require(&corpus_dir.join("vocab.tsv"))?;
    let vocab = read_vocab(&corpus_dir).map_err(corpus_failure)?;
    let history = match case.responder_history.clone() {
        Some(h) => h,
        None => {
            let bytes = read_bytes(&corpus_dir.join("histories.jsonl"))?;
            let stored = read_histories(&bytes[..]).map_err(corpus_failure)?;
            match stored.into_iter().find(|h| h.user_id == case.responder_id) {
                Some(h) => h.utterances.iter().map(|u| vocab.decode(u).join(" ")).collect(),
                None => {
                    log::warn!("no stored history for {}", case.responder_id);
                    Vec::new()
                }
            }
        }
    };
    let cfg = &loaded.model.cfg;
    let tfidf = load_tfidf_for(cfg.masks_active(), a.tfidf.as_deref(), cfg.variant)?;
    let limits = EncodeLimits {
        max_turns: cfg.max_turns,
        max_len: cfg.max_len,
        history_cap: cfg.history_cap,
    };
    let keep = history_size_of(&loaded.meta);
    let mut scored = Vec::with_capacity(case.candidates.len());
    for (i, cand) in case.candidates.iter().enumerate() {
        let dc = DialogueCase {
            session_id: "rank".into(),
            start: 0,
            context: case.context.clone(),
            response: cand.clone(),
            label: 0,
            speaker_id: String::new(),
            speaker_history: Vec::new(),
            responder_id: case.responder_id.clone(),
            responder_history: history.clone(),
        };
        let mut ex = encode_example(&dc, &vocab, limits, 0).map_err(|e| Failure::Config {
            key: format!("case.candidates[{i}]"),
            msg: e.to_string(),
        })?;
        if let Some(n) = keep {
            ex.truncate_history(n);
        }
        let w = loaded.model.mask_weights(&ex, tfidf.as_ref().map(|(t, _)| t));
        let s = score_example(&loaded.model, &loaded.params, &ex, w.as_ref()).map_err(model_failure)?;
        scored.push((i, s));
    }
    scored.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let mut stdout = std::io::stdout().lock();
    if a.json {
        let list: Vec<Value> = scored
            .iter()
            .enumerate()
            .map(|(r, &(i, s))| {
                json!({
                    "rank": r + 1,
                    "index": i,
                    "score": s,
                    "probability": phmn_core::nn::sigmoid(s),
                    "candidate": case.candidates[i],
                })
            })
            .collect();
        writeln!(stdout, "{}", serde_json::to_string_pretty(&list)?)?;
    } else {
        writeln!(stdout, "rank\tscore\tprob\tcandidate")?;
        for (r, &(i, s)) in scored.iter().enumerate() {
            writeln!(stdout, "{}\t{:.4}\t{:.4}\t{}", r + 1, s, phmn_core::nn::sigmoid(s), case.candidates[i])?;
        }
    }
    Ok(())
}
