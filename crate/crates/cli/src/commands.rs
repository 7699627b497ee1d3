use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use onebt::checkpoint;
use onebt::cost::{render_cost_table, CostRow};
use onebt::data::{generate_synthetic, ChannelStats, Dataset, EegSample, NormPolicy, SyntheticSpec, Task};
use onebt::eval::{confusion_of, run_loso, LosoConfig, LosoRun};
use onebt::metrics::{cross_task_mean, render_table, FoldResult, TableBlock};
use onebt::model::{preset, Ablation, PRESET_NAMES};
use onebt::train::{AdamState, Trainer};
use onebt::{ModelConfig, OneBt};
use serde_json::json;

use crate::spec::{sha256_hex, RunSpec, TaskSel};
use crate::{CommonArgs, CostArgs, Format, GenDataArgs, LosoArgs, SweepArgs, TrainArgs};

/// Bad flag values or combinations detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Error category and exit code.
pub fn categorize(e: &anyhow::Error) -> (&'static str, u8) {
    for cause in e.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return ("usage", 2);
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return ("config", 3);
        }
        if let Some(err) = cause.downcast_ref::<onebt::Error>() {
            use onebt::Error::*;
            return match err {
                Config(_) => ("config", 3),
                Data(_) | Split(_) | Load { .. } | Json(_) => ("data", 4),
                Io(_) => ("io", 5),
                Numeric(_) => ("numeric", 6),
                Shape { .. } | Index(_) | Contract(_) => ("internal", 1),
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ("io", 5);
        }
    }
    ("internal", 1)
}

fn jobs_cap(requested: usize) -> anyhow::Result<usize> {
    let requested = requested.max(1);
    match std::env::var("ONEBT_THREADS") {
        Ok(v) => {
            let cap: usize = v
                .trim()
                .parse()
                .map_err(|_| usage(format!("ONEBT_THREADS=`{v}` is not a positive integer")))?;
            if cap == 0 {
                return Err(usage("ONEBT_THREADS must be >= 1"));
            }
            Ok(requested.min(cap))
        }
        Err(_) => Ok(requested),
    }
}

/// Loads the config file (or defaults) and applies flag overrides.
fn resolve(common: &CommonArgs) -> anyhow::Result<RunSpec> {
    let mut spec = match &common.config {
        Some(p) => RunSpec::load(p)?,
        None => RunSpec::default(),
    };
    if let Some(d) = &common.data {
        spec.data = Some(d.clone());
    }
    if let Some(t) = common.task {
        spec.task = t;
    }
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    if let Some(o) = &common.out {
        spec.out = Some(o.clone());
    }
    Ok(spec)
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> anyhow::Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| usage(format!("missing {what}: pass --{what} or set `{what}` in the config")))
}

fn load_data(spec: &RunSpec) -> anyhow::Result<(Dataset, String)> {
    let path = required(&spec.data, "data")?;
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let ds = Dataset::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok((ds, sha256_hex(&bytes)))
}

fn out_dir(spec: &RunSpec) -> anyhow::Result<PathBuf> {
    let dir = required(&spec.out, "out")?.to_path_buf();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Writes the resolved spec and the `run.meta` record.
fn write_run_record(dir: &Path, command: &str, spec: &RunSpec, data_sha: Option<&str>, extra: serde_json::Value) -> anyhow::Result<()> {
    let text = spec.to_toml()?;
    fs::write(dir.join("run.toml"), &text)?;
    let mut meta = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config_sha256": sha256_hex(text.as_bytes()),
        "config_file": "run.toml",
        "seed": spec.seed,
        "data": spec.data,
        "data_sha256": data_sha,
        "norm_policy": spec.eval.norm,
        "formats": {
            "dataset": onebt::data::FORMAT_VERSION,
            "checkpoint": checkpoint::VERSION,
        },
    });
    if let (Some(m), Some(e)) = (meta.as_object_mut(), extra.as_object()) {
        m.extend(e.clone());
    }
    fs::write(dir.join("run.meta"), format!("{meta}\n"))?;
    Ok(())
}

fn write_jsonl<T: serde::Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> anyhow::Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(&r)?)?;
    }
    Ok(())
}

pub fn gen_data(a: &GenDataArgs) -> anyhow::Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SyntheticSpec>(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(v) = a.subjects {
        spec.n_subjects = v;
    }
    if let Some(v) = a.per_level {
        spec.samples_per_level = v;
    }
    if let Some(v) = a.delta {
        spec.delta = v;
    }
    if let Some(v) = a.seq_len {
        spec.seq_len = v;
    }
    if let Some(v) = a.sample_rate {
        spec.sample_rate = v;
    }
    let ds = generate_synthetic(&spec, a.seed)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    ds.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let spec_text = toml::to_string(&spec)?;
    let meta = json!({
        "command": "gen-data",
        "version": env!("CARGO_PKG_VERSION"),
        "seed": a.seed,
        "generator": spec,
        "generator_sha256": sha256_hex(spec_text.as_bytes()),
        "data_sha256": sha256_hex(&fs::read(&a.out)?),
        "formats": { "dataset": onebt::data::FORMAT_VERSION },
    });
    let meta_path = PathBuf::from(format!("{}.run.meta", a.out.display()));
    fs::write(&meta_path, format!("{meta}\n"))?;
    println!("{}", serde_json::to_string(&ds.manifest)?);
    Ok(())
}

fn check_model_matches(model: &ModelConfig, ds: &Dataset) -> anyhow::Result<()> {
    let m = &ds.manifest;
    if m.seq_len != model.seq_len || m.n_channels() != model.input_channels {
        return Err(onebt::Error::Config(format!(
            "model expects {}x{} windows (model.seq_len, model.input_channels) but the data has {}x{}",
            model.seq_len,
            model.input_channels,
            m.seq_len,
            m.n_channels()
        ))
        .into());
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> anyhow::Result<()> {
    let spec = resolve(&a.common)?;
    let task = match spec.task {
        TaskSel::All => None,
        _ => spec.task.single(),
    };
    let (ds, data_sha) = load_data(&spec)?;
    check_model_matches(&spec.model, &ds)?;
    let dir = out_dir(&spec)?;
    if a.checkpoint_every == Some(0) {
        return Err(usage("--checkpoint-every must be >= 1"));
    }

    let in_task = |s: &EegSample| task.is_none_or(|t| s.task == t);
    let (train_raw, test_raw): (Vec<&EegSample>, Vec<&EegSample>) = ds
        .samples
        .iter()
        .filter(|s| in_task(s))
        .partition(|s| Some(s.subject_id) != a.holdout);
    if let Some(h) = a.holdout {
        if test_raw.is_empty() {
            return Err(usage(format!("--holdout {h}: no samples for that subject")));
        }
    }
    let stats = match spec.eval.norm {
        NormPolicy::TrainFoldZScore => Some(ChannelStats::fit(train_raw.iter().copied())?),
        NormPolicy::None => None,
    };
    let prep = |v: &[&EegSample]| -> Vec<EegSample> {
        v.iter()
            .map(|s| stats.as_ref().map_or_else(|| (*s).clone(), |st| st.apply(s)))
            .collect()
    };
    let train_set = prep(&train_raw);
    let test_set = prep(&test_raw);
    if let Some(st) = &stats {
        fs::write(dir.join("norm.json"), serde_json::to_string_pretty(st)?)?;
    }

    let ckpt_path = dir.join("checkpoint.obtc");
    let opt_path = dir.join("optimizer.obta");
    let log_path = dir.join("train_log.jsonl");
    let (mut model, mut trainer) = if a.resume {
        let model: OneBt<f32> = checkpoint::load_expecting(&ckpt_path, &spec.model)
            .with_context(|| format!("resuming from {}", ckpt_path.display()))?;
        let state = AdamState::from_bytes(&fs::read(&opt_path)?, model.params())
            .with_context(|| format!("reading {}", opt_path.display()))?;
        let t = Trainer::resume(&model, &train_set, &spec.train, None, state)?;
        (model, t)
    } else {
        let model = OneBt::<f32>::new(spec.model.clone(), spec.seed)?;
        let t = Trainer::new(&model, &train_set, &spec.train, None)?;
        fs::write(&log_path, "")?;
        (model, t)
    };
    let mut log = fs::OpenOptions::new().append(true).create(true).open(&log_path)?;
    let mut ran = 0;
    while !trainer.finished() {
        if a.stop_after == Some(ran) {
            checkpoint::save(&model, &ckpt_path)?;
            fs::write(&opt_path, trainer.state().to_bytes())?;
            eprintln!("stopped after epoch {}; continue with --resume", trainer.epoch());
            return Ok(());
        }
        let rec = trainer.run_epoch(&mut model)?;
        ran += 1;
        writeln!(log, "{}", serde_json::to_string(&rec)?)?;
        log::info!("epoch {} loss {:.4} acc {:.3}", rec.epoch, rec.train_loss, rec.train_acc);
        if let Some(n) = a.checkpoint_every {
            if (rec.epoch + 1) % n == 0 {
                checkpoint::save(&model, &ckpt_path)?;
                fs::write(&opt_path, trainer.state().to_bytes())?;
            }
        }
    }
    let final_log = trainer.log();
    writeln!(
        log,
        "{}",
        json!({ "summary": {
            "epochs": spec.train.epochs,
            "steps": final_log.steps,
            "final_train_loss": final_log.epochs.last().map(|e| e.train_loss),
            "final_train_acc": final_log.final_train_acc(),
        }})
    )?;
    checkpoint::save(&model, dir.join("model.obtc"))?;

    let mut extra = json!({ "train_samples": train_set.len(), "task": spec.task });
    if let Some(h) = a.holdout {
        let confusion = confusion_of(&model, &test_set, spec.train.batch_size)?;
        let result = FoldResult::new(h, confusion, spec.eval.metric_options())?;
        fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&result)?)?;
        println!("{}", serde_json::to_string(&result)?);
        extra["holdout"] = json!(h);
    }
    write_run_record(&dir, "train", &spec, Some(&data_sha), extra)?;
    Ok(())
}

/// Per-task LOSO runs for one model configuration.
fn loso_block(
    ds: &Dataset,
    spec: &RunSpec,
    model: &ModelConfig,
    jobs: usize,
    config_id: &str,
) -> anyhow::Result<Vec<(Option<Task>, LosoRun)>> {
    let mut runs = Vec::new();
    for task in spec.task.tasks() {
        let cfg = LosoConfig {
            model: model.clone(),
            train: spec.train.clone(),
            task,
            norm: spec.eval.norm,
            metrics: spec.eval.metric_options(),
            std_kind: spec.eval.std,
            jobs,
            config_id: config_id.to_string(),
        };
        log::info!("LOSO {config_id} task {}", task.map_or("pooled".into(), |t| t.to_string()));
        runs.push((task, run_loso(ds, &cfg, spec.seed)?));
    }
    Ok(runs)
}

fn fold_records<'a>(config_id: &'a str, runs: &'a [(Option<Task>, LosoRun)]) -> impl Iterator<Item = serde_json::Value> + 'a {
    runs.iter().flat_map(move |(task, run)| {
        run.folds.iter().map(move |f| {
            json!({
                "config_id": config_id,
                "task": task,
                "subject": f.result.fold_id,
                "confusion": f.result.confusion,
                "accuracy": f.result.accuracy,
                "precision": f.result.precision,
                "f1": f.result.f1,
                "degenerate": f.result.degenerate,
                "train_size": f.train_size,
                "test_size": f.test_size,
                "final_train_loss": f.log.epochs.last().map(|e| e.train_loss),
                "final_train_acc": f.log.final_train_acc(),
            })
        })
    })
}

fn block_of(model: &ModelConfig, runs: &[(Option<Task>, LosoRun)]) -> TableBlock {
    TableBlock {
        cost: CostRow::of(model),
        summaries: runs.iter().map(|(_, r)| r.summary.clone()).collect(),
    }
}

fn block_record(config_id: &str, block: &TableBlock) -> serde_json::Value {
    json!({
        "config_id": config_id,
        "cost": block.cost,
        "summaries": block.summaries,
        "cross_task_mean": block.mean(),
    })
}

pub fn loso(a: &LosoArgs) -> anyhow::Result<()> {
    let mut spec = resolve(&a.common)?;
    if let Some(j) = a.jobs {
        spec.eval.jobs = j;
    }
    let jobs = jobs_cap(spec.eval.jobs)?;
    let (ds, data_sha) = load_data(&spec)?;
    check_model_matches(&spec.model, &ds)?;
    let dir = out_dir(&spec)?;

    let runs = loso_block(&ds, &spec, &spec.model, jobs, "run")?;
    write_jsonl(&dir.join("folds.jsonl"), fold_records("run", &runs))?;
    let block = block_of(&spec.model, &runs);
    let mut summary: Vec<serde_json::Value> = block.summaries.iter().map(|s| json!(s)).collect();
    if runs.len() == 3 {
        summary.push(json!({ "cross_task_mean": cross_task_mean(&block.summaries)? }));
    }
    write_jsonl(&dir.join("summary.jsonl"), &summary)?;
    let table = render_table(std::slice::from_ref(&block));
    fs::write(dir.join("table.txt"), &table)?;
    write_run_record(&dir, "loso", &spec, Some(&data_sha), json!({ "jobs": jobs }))?;
    print!("{table}");
    Ok(())
}

fn preset_rows(name: &str) -> anyhow::Result<Vec<Ablation>> {
    preset(name).ok_or_else(|| usage(format!("unknown preset `{name}` (one of {})", PRESET_NAMES.join(", "))))
}

pub fn sweep(a: &SweepArgs) -> anyhow::Result<()> {
    let mut spec = resolve(&a.common)?;
    if let Some(j) = a.jobs {
        spec.eval.jobs = j;
    }
    let rows = preset_rows(&a.preset)?;
    let jobs = jobs_cap(spec.eval.jobs)?;
    let (ds, data_sha) = load_data(&spec)?;
    check_model_matches(&spec.model, &ds)?;
    let dir = out_dir(&spec)?;

    let mut blocks = Vec::new();
    let mut folds = Vec::new();
    let mut records = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let model = row.apply(&spec.model);
        let id = format!("{}#{}", a.preset, i + 1);
        let runs = loso_block(&ds, &spec, &model, jobs, &id)?;
        folds.extend(fold_records(&id, &runs));
        let block = block_of(&model, &runs);
        records.push(block_record(&id, &block));
        blocks.push(block);
    }
    write_jsonl(&dir.join("folds.jsonl"), &folds)?;
    write_jsonl(&dir.join("summary.jsonl"), &records)?;
    let table = render_table(&blocks);
    fs::write(dir.join("table.txt"), &table)?;
    write_run_record(
        &dir,
        "sweep",
        &spec,
        Some(&data_sha),
        json!({ "jobs": jobs, "preset": a.preset }),
    )?;
    print!("{table}");
    Ok(())
}

pub fn cost(a: &CostArgs) -> anyhow::Result<()> {
    let base = match &a.config {
        Some(p) => RunSpec::load(p)?.model,
        None => ModelConfig::default(),
    };
    let rows: Vec<CostRow> = match &a.preset {
        Some(name) => preset_rows(name)?.iter().map(|r| CostRow::of(&r.apply(&base))).collect(),
        None => vec![CostRow::of(&base)],
    };
    let text = match a.format {
        Format::Text => render_cost_table(&rows),
        Format::Jsonl => {
            let mut s = String::new();
            for r in &rows {
                s.push_str(&serde_json::to_string(r)?);
                s.push('\n');
            }
            s
        }
    };
    match &a.out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn default_config() -> anyhow::Result<()> {
    print!("{}", RunSpec::default().to_toml()?);
    Ok(())
}
