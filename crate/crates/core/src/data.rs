//! EEG samples, the `OBT1` dataset file, the synthetic generator, LOSO splits
//! and train-fold normalisation.
//!
//! # File format
//!
//! All integers little-endian.
//!
//! ```text
//! magic "OBT1"
//! header   version u32, n_samples u32, L u32, C u32, sample_rate_hz u32, n_subjects u32
//! channels C × (u32 length + ASCII name)
//! samples  n_samples × (subject_id u16, task u8, label u8, L×C f32 row-major)
//! ```
//!
//! A human-readable manifest is written next to the file as
//! `<file>.manifest.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::binio::{put_f32s, put_string, put_u32, Reader};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OBT1";
pub const FORMAT_VERSION: u32 = 1;

/// Emotiv EPOC montage.
pub const EPOC_CHANNELS: [&str; 14] = [
    "AF3", "F7", "F3", "FC5", "T7", "P7", "O1", "O2", "P8", "T8", "FC6", "F4", "F8", "AF4",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "IQ")]
    Iq,
    #[serde(rename = "MATH")]
    Math,
    #[serde(rename = "GAME")]
    Game,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Iq, Task::Math, Task::Game];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Iq => "IQ",
            Task::Math => "MATH",
            Task::Game => "GAME",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "IQ" => Ok(Task::Iq),
            "MATH" => Ok(Task::Math),
            "GAME" => Ok(Task::Game),
            _ => Err(Error::Config(format!("unknown task `{s}` (IQ, MATH, GAME)"))),
        }
    }
}

/// Difficulty label; `Hard` is the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Easy = 0,
    Hard = 1,
}

impl Level {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Level::Easy),
            1 => Some(Level::Hard),
            _ => None,
        }
    }
}

/// One `L × C` window.
#[derive(Clone, Debug, PartialEq)]
pub struct EegSample {
    pub signal: Tensor<f32>,
    pub subject_id: u16,
    pub task: Task,
    pub label: Level,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_subjects: usize,
    pub n_samples: usize,
    /// Per (subject, task, level) count when the design is balanced.
    pub samples_per_level: Option<usize>,
    pub tasks: Vec<Task>,
    pub channel_names: Vec<String>,
    pub sample_rate: u32,
    pub seq_len: usize,
    pub provenance: String,
}

impl DatasetManifest {
    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<EegSample>,
}

/// Counts per (subject, task, level); `Some(n)` when every cell of the
/// subject × task × level grid holds exactly `n` samples.
fn balanced_count(samples: &[EegSample]) -> Option<usize> {
    let mut cells: BTreeMap<(u16, Task, Level), usize> = BTreeMap::new();
    for s in samples {
        *cells.entry((s.subject_id, s.task, s.label)).or_default() += 1;
    }
    let subjects: BTreeSet<u16> = samples.iter().map(|s| s.subject_id).collect();
    let tasks: BTreeSet<Task> = samples.iter().map(|s| s.task).collect();
    if cells.len() != subjects.len() * tasks.len() * 2 {
        return None;
    }
    let first = *cells.values().next()?;
    cells.values().all(|&c| c == first).then_some(first)
}

impl Dataset {
    /// Builds the manifest from the samples themselves.
    pub fn from_samples(samples: Vec<EegSample>, channel_names: Vec<String>, sample_rate: u32, provenance: impl Into<String>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Data("no samples".into()))?;
        let seq_len = first.signal.shape()[0];
        for s in &samples {
            if s.signal.shape() != [seq_len, channel_names.len()] {
                return Err(Error::shape("dataset", s.signal.shape(), &[seq_len, channel_names.len()]));
            }
        }
        let subjects: BTreeSet<u16> = samples.iter().map(|s| s.subject_id).collect();
        let tasks: BTreeSet<Task> = samples.iter().map(|s| s.task).collect();
        let manifest = DatasetManifest {
            n_subjects: subjects.len(),
            n_samples: samples.len(),
            samples_per_level: balanced_count(&samples),
            tasks: tasks.into_iter().collect(),
            channel_names,
            sample_rate,
            seq_len,
            provenance: provenance.into(),
        };
        Ok(Self { manifest, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subjects(&self) -> Vec<u16> {
        let s: BTreeSet<u16> = self.samples.iter().map(|s| s.subject_id).collect();
        s.into_iter().collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.manifest;
        let mut out = Vec::with_capacity(64 + self.samples.len() * (4 + m.seq_len * m.n_channels() * 4));
        out.extend_from_slice(MAGIC);
        for v in [
            FORMAT_VERSION,
            self.samples.len() as u32,
            m.seq_len as u32,
            m.n_channels() as u32,
            m.sample_rate,
            m.n_subjects as u32,
        ] {
            put_u32(&mut out, v);
        }
        for name in &m.channel_names {
            put_string(&mut out, name);
        }
        for s in &self.samples {
            out.extend_from_slice(&s.subject_id.to_le_bytes());
            out.push(s.task.code());
            out.push(s.label.index() as u8);
            put_f32s(&mut out, s.signal.data().iter().copied());
        }
        out
    }

    pub fn from_bytes(buf: &[u8], provenance: impl Into<String>) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.bytes(4, "magic")? != MAGIC {
            return Err(Error::Load {
                offset: 0,
                msg: "bad magic, expected OBT1".into(),
            });
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let n_samples = r.u32("n_samples")? as usize;
        let seq_len = r.u32("L")? as usize;
        let n_channels = r.u32("C")? as usize;
        let sample_rate = r.u32("sample_rate_hz")?;
        let n_subjects = r.u32("n_subjects")? as usize;
        if seq_len == 0 || n_channels == 0 {
            return Err(r.err(format!("degenerate sample shape {seq_len}×{n_channels}")));
        }
        let mut channel_names = Vec::with_capacity(n_channels);
        for _ in 0..n_channels {
            let at = r.offset();
            let name = r.string("channel name")?;
            if !name.is_ascii() {
                return Err(Error::Load {
                    offset: at,
                    msg: format!("channel name `{name}` is not ASCII"),
                });
            }
            channel_names.push(name);
        }
        let record = 4 + seq_len * n_channels * 4;
        if r.remaining() != n_samples * record {
            return Err(r.err(format!(
                "sample block length mismatch: expected {} bytes for {n_samples} samples, found {}",
                n_samples * record,
                r.remaining()
            )));
        }
        let mut samples = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let subject_id = r.u16("subject_id")?;
            let at = r.offset();
            let task = Task::from_code(r.u8("task")?).ok_or_else(|| Error::Load {
                offset: at,
                msg: "invalid task code".into(),
            })?;
            let at = r.offset();
            let label = Level::from_index(r.u8("label")? as usize).ok_or_else(|| Error::Load {
                offset: at,
                msg: "invalid label".into(),
            })?;
            let data = r.f32s(seq_len * n_channels, "signal")?;
            samples.push(EegSample {
                signal: Tensor::new([seq_len, n_channels], data)?,
                subject_id,
                task,
                label,
            });
        }
        let ds = Self::from_samples(samples, channel_names, sample_rate, provenance)?;
        if ds.manifest.n_subjects != n_subjects {
            return Err(Error::Load {
                offset: 20,
                msg: format!(
                    "header declares {n_subjects} subjects, samples contain {}",
                    ds.manifest.n_subjects
                ),
            });
        }
        if ds.manifest.samples_per_level.is_none() {
            log::warn!("dataset is not balanced over subject × task × level");
        }
        Ok(ds)
    }

    /// Writes the binary file and its `.manifest.json` sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes())?;
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path)?;
        let provenance = fs::read_to_string(sidecar_path(path))
            .ok()
            .and_then(|s| serde_json::from_str::<DatasetManifest>(&s).ok())
            .map(|m| m.provenance)
            .unwrap_or_else(|| format!("loaded from {}", path.display()));
        Self::from_bytes(&buf, provenance)
    }

    pub fn filter_task(&self, task: Task) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].task == task).collect()
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Parameters of the synthetic generator.
///
/// Every channel carries unit-RMS 1/f^α background noise plus an alpha-band
/// rhythm. Samples labelled `Hard` additionally carry a sinusoid in `band`
/// with RMS `delta` (relative to the background) on `class_channels`. Each
/// subject multiplies each channel by a log-normal gain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    pub samples_per_level: usize,
    pub tasks: Vec<Task>,
    pub seq_len: usize,
    pub sample_rate: u32,
    pub channel_names: Vec<String>,
    pub delta: f64,
    pub band_hz: (f64, f64),
    pub class_channels: Vec<usize>,
    pub subject_gain_sd: f64,
    pub pink_exponent: f64,
    pub alpha_amplitude: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_subjects: 11,
            samples_per_level: 12,
            tasks: Task::ALL.to_vec(),
            seq_len: 1280,
            sample_rate: 128,
            channel_names: EPOC_CHANNELS.iter().map(|s| s.to_string()).collect(),
            delta: 1.0,
            band_hz: (4.0, 7.0),
            // AF3, F7, F3, F4, F8, AF4
            class_channels: vec![0, 1, 2, 11, 12, 13],
            subject_gain_sd: 0.25,
            pink_exponent: 1.0,
            alpha_amplitude: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.samples_per_level == 0 || self.tasks.is_empty() {
            return Err(Error::Config("synthetic spec needs subjects, samples and tasks".into()));
        }
        if self.seq_len < 2 || self.channel_names.is_empty() || self.sample_rate == 0 {
            return Err(Error::Config("synthetic spec needs L >= 2, channels and a sample rate".into()));
        }
        if self.n_subjects > u16::MAX as usize {
            return Err(Error::Config("too many subjects for u16 ids".into()));
        }
        if let Some(&c) = self.class_channels.iter().find(|&&c| c >= self.channel_names.len()) {
            return Err(Error::Config(format!("class channel {c} out of range")));
        }
        let (lo, hi) = self.band_hz;
        if !(lo > 0.0 && hi >= lo && hi <= self.sample_rate as f64 / 2.0) {
            return Err(Error::Config(format!("band {lo}..{hi} Hz invalid for {} Hz", self.sample_rate)));
        }
        if !(self.delta >= 0.0) || !(self.subject_gain_sd >= 0.0) {
            return Err(Error::Config("delta and subject_gain_sd must be >= 0".into()));
        }
        Ok(())
    }
}

/// Unit-RMS noise with power spectrum ∝ 1/f^exponent, by inverse FFT of
/// random-phase spectral lines.
fn colored_noise(len: usize, exponent: f64, fft: &dyn rustfft::Fft<f64>, rng: &mut rng::Rng) -> Vec<f64> {
    let mut spec = vec![Complex::new(0.0, 0.0); len];
    let normal = Normal::new(0.0, 1.0).unwrap();
    for k in 1..=len / 2 {
        let amp = (k as f64).powf(-exponent / 2.0) * (1.0 + 0.1 * normal.sample(rng));
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        spec[k] = Complex::from_polar(amp, phase);
        if k != len - k {
            spec[len - k] = spec[k].conj();
        }
    }
    fft.process(&mut spec);
    let mut out: Vec<f64> = spec.iter().map(|c| c.re).collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

/// Deterministic synthetic dataset; samples ordered subject → task → level.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::stream(seed, Stream::Synthetic);
    let l = spec.seq_len;
    let c = spec.channel_names.len();
    let fs = spec.sample_rate as f64;
    let fft = FftPlanner::<f64>::new().plan_fft_inverse(l);
    let gain_dist = Normal::new(0.0, spec.subject_gain_sd.max(1e-12)).unwrap();
    let class_mask: Vec<bool> = (0..c).map(|ch| spec.class_channels.contains(&ch)).collect();

    let gains: Vec<Vec<f64>> = (0..spec.n_subjects)
        .map(|_| (0..c).map(|_| gain_dist.sample(&mut rng).exp()).collect())
        .collect();

    let mut samples = Vec::with_capacity(spec.n_subjects * spec.tasks.len() * 2 * spec.samples_per_level);
    for (subject, gain) in gains.iter().enumerate() {
        for &task in &spec.tasks {
            for label in [Level::Easy, Level::Hard] {
                for _ in 0..spec.samples_per_level {
                    let alpha_f = rng.gen_range(8.0..12.0);
                    let theta_f = rng.gen_range(spec.band_hz.0..=spec.band_hz.1);
                    let mut data = vec![0f32; l * c];
                    for ch in 0..c {
                        let noise = colored_noise(l, spec.pink_exponent, fft.as_ref(), &mut rng);
                        let alpha_phase = rng.gen_range(0.0..std::f64::consts::TAU);
                        let theta_phase = rng.gen_range(0.0..std::f64::consts::TAU);
                        let theta_amp = if label == Level::Hard && class_mask[ch] {
                            spec.delta * std::f64::consts::SQRT_2
                        } else {
                            0.0
                        };
                        for t in 0..l {
                            let time = t as f64 / fs;
                            let v = noise[t]
                                + spec.alpha_amplitude * (std::f64::consts::TAU * alpha_f * time + alpha_phase).sin()
                                + theta_amp * (std::f64::consts::TAU * theta_f * time + theta_phase).sin();
                            data[t * c + ch] = (gain[ch] * v) as f32;
                        }
                    }
                    samples.push(EegSample {
                        signal: Tensor::new([l, c], data)?,
                        subject_id: subject as u16,
                        task,
                        label,
                    });
                }
            }
        }
    }
    Dataset::from_samples(
        samples,
        spec.channel_names.clone(),
        spec.sample_rate,
        format!("synthetic seed={seed} delta={} band={:?}", spec.delta, spec.band_hz),
    )
}

/// One leave-one-subject-out fold, as indices into the dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub subject: u16,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One fold per subject (ascending id). With `task`, both sides are
/// restricted to that task.
pub fn loso_splits(ds: &Dataset, task: Option<Task>) -> Result<Vec<Fold>> {
    let pool: Vec<usize> = match task {
        Some(t) => ds.filter_task(t),
        None => (0..ds.len()).collect(),
    };
    let subjects: BTreeSet<u16> = pool.iter().map(|&i| ds.samples[i].subject_id).collect();
    if subjects.len() < 2 {
        return Err(Error::Split(format!(
            "leave-one-subject-out needs at least 2 subjects, found {}",
            subjects.len()
        )));
    }
    Ok(subjects
        .into_iter()
        .map(|s| {
            let (test, train) = pool.iter().partition(|&&i| ds.samples[i].subject_id == s);
            Fold { subject: s, train, test }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPolicy {
    /// Per-channel z-score with statistics from the training fold only.
    #[default]
    TrainFoldZScore,
    None,
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Pools every time step of every sample. A zero-variance channel gets a
    /// divisor of 1 and a warning.
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a EegSample>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for s in samples {
            let c = s.signal.last_dim();
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sum.len() != c {
                return Err(Error::shape("channel stats", &[sum.len()], &[c]));
            }
            for row in s.signal.data().chunks_exact(c) {
                for (j, &v) in row.iter().enumerate() {
                    sum[j] += v as f64;
                    sq[j] += (v as f64) * (v as f64);
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Data("cannot fit normalisation on an empty set".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .enumerate()
            .map(|(j, (s, m))| {
                let var = (s / n as f64 - m * m).max(0.0);
                if var <= f64::EPSILON * m.abs().max(1.0) {
                    log::warn!("channel {j} has zero variance; leaving it unscaled");
                    1.0
                } else {
                    var.sqrt()
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, s: &EegSample) -> EegSample {
        let c = self.mean.len();
        let data = s
            .signal
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| ((v as f64 - self.mean[i % c]) / self.std[i % c]) as f32)
            .collect();
        EegSample {
            signal: Tensor::new(s.signal.shape().to_vec(), data).expect("same shape"),
            ..s.clone()
        }
    }
}

/// Materialises a fold's train and test samples, normalised per `policy`
/// with statistics from the training side only.
pub fn prepare_fold(ds: &Dataset, fold: &Fold, policy: NormPolicy) -> Result<(Vec<EegSample>, Vec<EegSample>, Option<ChannelStats>)> {
    let train: Vec<&EegSample> = fold.train.iter().map(|&i| &ds.samples[i]).collect();
    let test: Vec<&EegSample> = fold.test.iter().map(|&i| &ds.samples[i]).collect();
    match policy {
        NormPolicy::None => Ok((
            train.into_iter().cloned().collect(),
            test.into_iter().cloned().collect(),
            None,
        )),
        NormPolicy::TrainFoldZScore => {
            let stats = ChannelStats::fit(train.iter().copied())?;
            let tr = train.iter().map(|s| stats.apply(s)).collect();
            let te = test.iter().map(|s| stats.apply(s)).collect();
            Ok((tr, te, Some(stats)))
        }
    }
}
