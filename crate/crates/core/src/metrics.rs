//! Confusion-matrix metrics, fold aggregation and table rendering.
//!
//! Confusion matrices are indexed `[actual][predicted]` with class 0 = easy,
//! class 1 = hard. Precision and F1 are binary on the positive class (hard by
//! default) unless macro averaging is requested.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cost::{align_table, axis_cells, CostRow, AXIS_HEADERS};
use crate::data::{Level, Task};
use crate::error::{Error, Result};

/// `[actual][predicted]` counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion(pub [[u64; 2]; 2]);

impl Confusion {
    pub fn record(&mut self, actual: usize, predicted: usize) {
        self.0[actual][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Binary,
    Macro,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub positive: Level,
    pub averaging: Averaging,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            positive: Level::Hard,
            averaging: Averaging::Binary,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn binary(c: &Confusion, pos: usize, degenerate: &mut bool) -> (f64, f64, f64) {
    let neg = 1 - pos;
    let tp = c.0[pos][pos];
    let fp = c.0[neg][pos];
    let fneg = c.0[pos][neg];
    let precision = ratio(tp, tp + fp, degenerate);
    let recall = ratio(tp, tp + fneg, degenerate);
    let f1 = if precision + recall == 0.0 {
        *degenerate = true;
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

pub fn compute_metrics(c: &Confusion, opts: MetricOptions) -> Result<Metrics> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Contract("metrics of an empty confusion matrix".into()));
    }
    let mut degenerate = false;
    let accuracy = (c.0[0][0] + c.0[1][1]) as f64 / total as f64;
    let (precision, recall, f1) = match opts.averaging {
        Averaging::Binary => binary(c, opts.positive.index(), &mut degenerate),
        Averaging::Macro => {
            let (p0, r0, f0) = binary(c, 0, &mut degenerate);
            let (p1, r1, f1) = binary(c, 1, &mut degenerate);
            ((p0 + p1) / 2.0, (r0 + r1) / 2.0, (f0 + f1) / 2.0)
        }
    };
    Ok(Metrics {
        accuracy,
        precision,
        recall,
        f1,
        degenerate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    /// Held-out subject.
    pub fold_id: u16,
    pub confusion: Confusion,
    pub accuracy: f64,
    pub precision: f64,
    pub f1: f64,
    pub degenerate: bool,
}

impl FoldResult {
    pub fn new(fold_id: u16, confusion: Confusion, opts: MetricOptions) -> Result<Self> {
        let m = compute_metrics(&confusion, opts)?;
        Ok(Self {
            fold_id,
            confusion,
            accuracy: m.accuracy,
            precision: m.precision,
            f1: m.f1,
            degenerate: m.degenerate,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdKind {
    #[default]
    Population,
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64], kind: StdKind) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let ss = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        let den = match kind {
            StdKind::Population => n,
            StdKind::Sample => (n - 1.0).max(1.0),
        };
        let std = if values.len() < 2 { 0.0 } else { (ss / den).sqrt() };
        Self { mean, std }
    }

    /// `mean±std` in percent, two decimals.
    pub fn percent(&self) -> String {
        format!("{:.2}±{:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub task: Option<Task>,
    pub config_id: String,
    pub n_folds: usize,
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub f1: MeanStd,
    /// Pooled accuracy over all test predictions of all folds.
    pub pooled_accuracy: f64,
    pub n_predictions: u64,
}

pub fn aggregate(folds: &[FoldResult], task: Option<Task>, config_id: impl Into<String>, kind: StdKind) -> Result<RunSummary> {
    if folds.is_empty() {
        return Err(Error::Contract("aggregate needs at least one fold".into()));
    }
    let col = |f: fn(&FoldResult) -> f64| folds.iter().map(f).collect::<Vec<_>>();
    let correct: u64 = folds.iter().map(|f| f.confusion.0[0][0] + f.confusion.0[1][1]).sum();
    let total: u64 = folds.iter().map(|f| f.confusion.total()).sum();
    Ok(RunSummary {
        task,
        config_id: config_id.into(),
        n_folds: folds.len(),
        accuracy: MeanStd::of(&col(|f| f.accuracy), kind),
        precision: MeanStd::of(&col(|f| f.precision), kind),
        f1: MeanStd::of(&col(|f| f.f1), kind),
        pooled_accuracy: correct as f64 / total as f64,
        n_predictions: total,
    })
}

/// Mean of the nine (task × metric) means of exactly three task summaries.
pub fn cross_task_mean(summaries: &[RunSummary]) -> Result<f64> {
    if summaries.len() != 3 {
        return Err(Error::Contract(format!(
            "cross-task mean needs exactly 3 task summaries, got {}",
            summaries.len()
        )));
    }
    let sum: f64 = summaries
        .iter()
        .map(|s| s.accuracy.mean + s.precision.mean + s.f1.mean)
        .sum();
    Ok(sum / 9.0)
}

/// One row-block of a results table: a configuration, its cost and the
/// per-task summaries.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TableBlock {
    pub cost: CostRow,
    pub summaries: Vec<RunSummary>,
}

impl TableBlock {
    pub fn mean(&self) -> Option<f64> {
        cross_task_mean(&self.summaries).ok()
    }
}

/// Aligned text rendering: one row per task, then a `mean` row per block
/// when three tasks are present.
pub fn render_table(blocks: &[TableBlock]) -> String {
    let mut header: Vec<String> = vec!["Task".into()];
    header.extend(AXIS_HEADERS.iter().map(|s| s.to_string()));
    header.extend(["Params(M)", "GFLOPs", "Accuracy", "Precision", "F1"].map(String::from));
    let mut rows = Vec::new();
    for b in blocks {
        for s in &b.summaries {
            let mut r = vec![s.task.map_or("ALL".to_string(), |t| t.to_string())];
            r.extend(axis_cells(&b.cost.axes));
            r.push(format!("{:.2}", b.cost.params_m));
            r.push(format!("{:.2}", b.cost.gflops));
            r.push(s.accuracy.percent());
            r.push(s.precision.percent());
            r.push(s.f1.percent());
            rows.push(r);
        }
        if let Some(m) = b.mean() {
            let mut r = vec!["mean".to_string()];
            r.extend(std::iter::repeat_n(String::new(), 9));
            r.push(format!("{:.2}", 100.0 * m));
            rows.push(r);
        }
    }
    let mut s = align_table(&header, &rows);
    let _ = writeln!(s, "mean: average of Accuracy, Precision and F1 over IQ, MATH and GAME");
    s
}
