//! Leave-one-subject-out training and evaluation.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::{loso_splits, prepare_fold, Dataset, EegSample, Fold, NormPolicy, Task};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, Confusion, FoldResult, MetricOptions, RunSummary, StdKind};
use crate::model::{argmax, ModelConfig, OneBt};
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LosoConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: Option<Task>,
    pub norm: NormPolicy,
    pub metrics: MetricOptions,
    pub std_kind: StdKind,
    /// Worker threads; folds are merged by id so the result does not depend
    /// on this.
    pub jobs: usize,
    pub config_id: String,
}

impl LosoConfig {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Self {
        Self {
            model,
            train,
            task: None,
            norm: NormPolicy::default(),
            metrics: MetricOptions::default(),
            std_kind: StdKind::Population,
            jobs: 1,
            config_id: "run".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub result: FoldResult,
    pub train_size: usize,
    pub test_size: usize,
    pub log: TrainLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LosoRun {
    pub folds: Vec<FoldOutcome>,
    pub summary: RunSummary,
}

/// Predicted class of each sample, in order.
pub fn predict_all(model: &OneBt<f32>, samples: &[EegSample], batch: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let xs: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.signal).collect();
        let logits = model.forward_batch(&xs)?;
        out.extend((0..chunk.len()).map(|i| argmax(logits.row(i))));
    }
    Ok(out)
}

pub fn confusion_of(model: &OneBt<f32>, samples: &[EegSample], batch: usize) -> Result<Confusion> {
    let mut c = Confusion::default();
    for (s, p) in samples.iter().zip(predict_all(model, samples, batch)?) {
        c.record(s.label.index(), p);
    }
    Ok(c)
}

fn check_shapes(ds: &Dataset, cfg: &ModelConfig) -> Result<()> {
    let m = &ds.manifest;
    if m.seq_len != cfg.seq_len || m.n_channels() != cfg.input_channels {
        return Err(Error::Config(format!(
            "model expects {}x{} windows, dataset has {}x{}",
            cfg.seq_len,
            cfg.input_channels,
            m.seq_len,
            m.n_channels()
        )));
    }
    Ok(())
}

/// Trains a fresh model on the fold's training subjects and scores it on the
/// held-out subject.
///
/// Initialisation and training seeds are derived from `seed` and the held-out
/// subject id, so a fold's result does not depend on which other folds run.
pub fn run_fold(ds: &Dataset, fold: &Fold, cfg: &LosoConfig, seed: u64) -> Result<FoldOutcome> {
    let (train_set, test_set, _) = prepare_fold(ds, fold, cfg.norm)?;
    let subject = fold.subject as u64;
    let mut model = OneBt::<f32>::new(cfg.model.clone(), derive_seed(seed, 2 * subject))?;
    let tc = TrainConfig {
        seed: derive_seed(seed, 2 * subject + 1),
        ..cfg.train.clone()
    };
    let log = train(&mut model, &train_set, &tc, None)?;
    let confusion = confusion_of(&model, &test_set, tc.batch_size)?;
    let result = FoldResult::new(fold.subject, confusion, cfg.metrics)?;
    log::info!(
        "fold subject={} acc={:.4} ({} train / {} test)",
        fold.subject,
        result.accuracy,
        train_set.len(),
        test_set.len()
    );
    Ok(FoldOutcome {
        result,
        train_size: train_set.len(),
        test_size: test_set.len(),
        log,
    })
}

/// Runs every LOSO fold, `cfg.jobs` at a time, and aggregates the results.
pub fn run_loso(ds: &Dataset, cfg: &LosoConfig, seed: u64) -> Result<LosoRun> {
    cfg.model.validate()?;
    cfg.train.validate()?;
    check_shapes(ds, &cfg.model)?;
    let folds = loso_splits(ds, cfg.task)?;
    let jobs = cfg.jobs.clamp(1, folds.len());

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<FoldOutcome>>>> = Mutex::new((0..folds.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= folds.len() {
                    break;
                }
                let r = run_fold(ds, &folds[i], cfg, seed);
                let failed = r.is_err();
                slots.lock().unwrap()[i] = Some(r);
                if failed {
                    next.store(folds.len(), Ordering::SeqCst);
                }
            });
        }
    });

    let mut outcomes = Vec::with_capacity(folds.len());
    for (slot, fold) in slots.into_inner().unwrap().into_iter().zip(&folds) {
        match slot {
            Some(r) => outcomes.push(r?),
            None => return Err(Error::Contract(format!("fold for subject {} did not run", fold.subject))),
        }
    }
    let results: Vec<FoldResult> = outcomes.iter().map(|o| o.result.clone()).collect();
    let summary = aggregate(&results, cfg.task, cfg.config_id.clone(), cfg.std_kind)?;
    Ok(LosoRun { folds: outcomes, summary })
}
