//! AdamW with decoupled weight decay, per-step cosine annealing, label-smoothed
//! cross-entropy and a seeded mini-batch loop.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio::{put_string, put_u32, Reader};
use crate::data::EegSample;
use crate::error::{Error, Result};
use crate::model::{argmax, OneBt};
use crate::rng::{self, Stream};
use crate::tensor::{ParamSet, Real, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    pub min_lr: f64,
    /// Global L2 gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
    /// Additive Gaussian noise, σ relative to each channel's std; 0 = off.
    pub augment_noise: f64,
    /// Zeroes one random window of this many time steps; 0 = off.
    pub augment_cutout: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.05,
            epochs: 200,
            batch_size: 32,
            label_smoothing: 0.10,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            min_lr: 0.0,
            grad_clip: None,
            augment_noise: 0.0,
            augment_cutout: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr = {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing = {} outside [0,1)", self.label_smoothing)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return Err(Error::Config(format!("betas {:?} outside [0,1)", self.betas)));
        }
        if self.weight_decay < 0.0 || self.min_lr < 0.0 || self.min_lr > self.lr || self.eps <= 0.0 {
            return Err(Error::Config("need weight_decay >= 0, 0 <= min_lr <= lr, eps > 0".into()));
        }
        if self.augment_noise < 0.0 {
            return Err(Error::Config("augment_noise must be >= 0".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// `min_lr + ½(base_lr − min_lr)(1 + cos(π·step/total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, min_lr: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Contract(format!("cosine step {step} outside 0..={total_steps}")));
    }
    let t = step as f64 / total_steps as f64;
    Ok(min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWHyper {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    names: Vec<String>,
}

const ADAM_MAGIC: &[u8; 4] = b"OBTA";

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect(),
            names: params.iter().map(|p| p.name.clone()).collect(),
        }
    }

    /// Moments are stored as f64 so both precisions round-trip exactly.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ADAM_MAGIC);
        put_u32(&mut out, 1);
        out.extend_from_slice(&self.step.to_le_bytes());
        put_u32(&mut out, self.names.len() as u32);
        for ((name, m), v) in self.names.iter().zip(&self.m).zip(&self.v) {
            put_string(&mut out, name);
            put_u32(&mut out, m.len() as u32);
            for x in m.iter().chain(v) {
                out.extend_from_slice(&x.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8], params: &ParamSet<T>) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.bytes(4, "magic")? != ADAM_MAGIC {
            return Err(r.err("not an optimizer state file"));
        }
        let version = r.u32("version")?;
        if version != 1 {
            return Err(r.err(format!("unsupported optimizer state version {version}")));
        }
        let step = u64::from_le_bytes(r.bytes(8, "step")?.try_into().unwrap());
        let n = r.u32("count")? as usize;
        if n != params.len() {
            return Err(r.err(format!("state for {n} parameters, model has {}", params.len())));
        }
        let mut state = Self::new(params);
        state.step = step;
        for i in 0..n {
            let name = r.string("name")?;
            if name != params.get(i).name {
                return Err(r.err(format!("expected `{}`, found `{name}`", params.get(i).name)));
            }
            let len = r.u32("len")? as usize;
            if len != params.get(i).tensor.numel() {
                return Err(r.err(format!("moment length mismatch for `{name}`")));
            }
            let raw = r.bytes(16 * len, "moments")?;
            let vals: Vec<T> = raw
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            state.m[i] = vals[..len].to_vec();
            state.v[i] = vals[len..].to_vec();
        }
        Ok(state)
    }
}

/// One AdamW update of every trainable parameter from its `grad` buffer.
///
/// Weight decay is decoupled: `w ← w − lr·λ·w` is applied before, and
/// independently of, the bias-corrected Adam step.
pub fn adamw_step<T: Real>(params: &mut ParamSet<T>, state: &mut AdamState<T>, hp: &AdamWHyper) -> Result<()> {
    for p in params.iter() {
        if p.trainable && !p.grad.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in `{}`", p.name)));
        }
    }
    state.step += 1;
    let (b1, b2) = hp.betas;
    let t = state.step as i32;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let lr = T::of(hp.lr);
    let decay = T::of(1.0 - hp.lr * hp.weight_decay);
    let (b1t, b2t) = (T::of(b1), T::of(b2));
    let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
    let (bc1, bc2) = (T::of(bc1), T::of(bc2));
    let eps = T::of(hp.eps);
    for (i, p) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &g), mi), vi) in p.tensor.data_mut().iter_mut().zip(p.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *w *= decay;
            *mi = b1t * *mi + ob1 * g;
            *vi = b2t * *vi + ob2 * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(params: &mut ParamSet<T>, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    /// Schedule value after the epoch's last step.
    pub lr_end: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Optimizer steps taken so far, counted from the start of the run.
    pub steps: usize,
    /// Learning rate used at each step run by this log's owner.
    #[serde(skip)]
    pub step_lrs: Vec<f64>,
}

impl TrainLog {
    pub fn final_train_acc(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_acc)
    }

    /// One JSON record per epoch, then a summary record.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        let summary = serde_json::json!({
            "summary": {
                "epochs": self.epochs.len(),
                "steps": self.steps,
                "final_train_loss": self.epochs.last().map(|e| e.train_loss),
                "final_train_acc": self.final_train_acc(),
            }
        });
        s.push_str(&summary.to_string());
        s.push('\n');
        Ok(s)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }
}

fn augment<T: Real>(x: &Tensor<T>, cfg: &TrainConfig, rng: &mut rng::Rng) -> Tensor<T> {
    let mut out = x.clone();
    let (l, c) = (x.shape()[0], x.last_dim());
    if cfg.augment_noise > 0.0 {
        for ch in 0..c {
            let col = (0..l).map(|t| x.data()[t * c + ch].as_f64());
            let (s, s2) = col.fold((0.0, 0.0), |(a, b), v| (a + v, b + v * v));
            let var = (s2 / l as f64 - (s / l as f64).powi(2)).max(0.0);
            let sd = cfg.augment_noise * var.sqrt();
            if sd > 0.0 {
                let n = Normal::new(0.0, sd).unwrap();
                for t in 0..l {
                    out.data_mut()[t * c + ch] += T::of(n.sample(rng));
                }
            }
        }
    }
    if cfg.augment_cutout > 0 && cfg.augment_cutout < l {
        let start = rng.gen_range(0..=l - cfg.augment_cutout);
        for t in start..start + cfg.augment_cutout {
            for ch in 0..c {
                out.data_mut()[t * c + ch] = T::zero();
            }
        }
    }
    out
}

/// Mean label-smoothed loss and accuracy of `model` on `inputs` (eval mode).
pub fn evaluate_loss<T: Real>(model: &OneBt<T>, inputs: &[Tensor<T>], labels: &[usize], smoothing: f64, batch: usize) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (xs, ys) in inputs.chunks(batch).zip(labels.chunks(batch)) {
        let refs: Vec<&Tensor<T>> = xs.iter().collect();
        let logits = model.forward_batch(&refs)?;
        let mut tape = Tape::new();
        let lv = tape.constant(logits.clone());
        let l = tape.cross_entropy_label_smoothed(lv, ys, smoothing)?;
        loss += tape.value(l).item().as_f64() * ys.len() as f64;
        for (i, &y) in ys.iter().enumerate() {
            if argmax(logits.row(i)) == y {
                correct += 1;
            }
        }
    }
    Ok((loss / labels.len() as f64, correct as f64 / labels.len() as f64))
}

/// Converts samples into model-precision inputs and label indices.
pub fn to_inputs<T: Real>(samples: &[EegSample]) -> (Vec<Tensor<T>>, Vec<usize>) {
    samples.iter().map(|s| (s.signal.cast::<T>(), s.label.index())).unzip()
}

/// Trains `model` in place for `cfg.epochs` epochs of
/// `ceil(n / batch_size)` steps each.
///
/// Sample order is reshuffled every epoch from a stream keyed by
/// `(seed, epoch)`; dropout masks come from a stream keyed by `(seed, step)`.
/// The result is a deterministic function of the inputs.
pub fn train<T: Real>(model: &mut OneBt<T>, train_set: &[EegSample], cfg: &TrainConfig, val_set: Option<&[EegSample]>) -> Result<TrainLog> {
    let mut t = Trainer::new(model, train_set, cfg, val_set)?;
    while !t.finished() {
        t.run_epoch(model)?;
    }
    Ok(t.into_log())
}

/// Epoch-at-a-time training loop that can be suspended and resumed.
///
/// Everything a resumed run needs besides the model weights lives in the
/// optimizer state: its step counter fixes the epoch, the schedule position
/// and every RNG stream.
pub struct Trainer<T> {
    cfg: TrainConfig,
    inputs: Vec<Tensor<T>>,
    labels: Vec<usize>,
    val: Option<(Vec<Tensor<T>>, Vec<usize>)>,
    state: AdamState<T>,
    log: TrainLog,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: &OneBt<T>, train_set: &[EegSample], cfg: &TrainConfig, val_set: Option<&[EegSample]>) -> Result<Self> {
        Self::resume(model, train_set, cfg, val_set, AdamState::new(model.params()))
    }

    /// Continues from a saved optimizer state; `state.step` must fall on an
    /// epoch boundary.
    pub fn resume(
        model: &OneBt<T>,
        train_set: &[EegSample],
        cfg: &TrainConfig,
        val_set: Option<&[EegSample]>,
        state: AdamState<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        if train_set.is_empty() {
            return Err(Error::Data("empty training split".into()));
        }
        if state.m.len() != model.params().len() {
            return Err(Error::Contract("optimizer state does not match the model".into()));
        }
        let spe = cfg.steps_per_epoch(train_set.len()) as u64;
        if !state.step.is_multiple_of(spe) || state.step > spe * cfg.epochs as u64 {
            return Err(Error::Contract(format!(
                "optimizer step {} is not an epoch boundary of a {}-epoch run ({spe} steps per epoch)",
                state.step, cfg.epochs
            )));
        }
        let (inputs, labels) = to_inputs::<T>(train_set);
        Ok(Self {
            cfg: cfg.clone(),
            inputs,
            labels,
            val: val_set.map(to_inputs::<T>),
            state,
            log: TrainLog::default(),
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.cfg.steps_per_epoch(self.inputs.len())
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.steps_per_epoch()
    }

    /// Index of the next epoch to run.
    pub fn epoch(&self) -> usize {
        self.state.step as usize / self.steps_per_epoch()
    }

    pub fn finished(&self) -> bool {
        self.epoch() >= self.cfg.epochs
    }

    pub fn state(&self) -> &AdamState<T> {
        &self.state
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn into_log(self) -> TrainLog {
        self.log
    }

    /// Runs one epoch and appends its record.
    pub fn run_epoch(&mut self, model: &mut OneBt<T>) -> Result<EpochRecord> {
        if self.finished() {
            return Err(Error::Contract(format!("all {} epochs already ran", self.cfg.epochs)));
        }
        let cfg = &self.cfg;
        let epoch = self.epoch();
        let n = self.inputs.len();
        let total = self.total_steps();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(rng::derive_seed(cfg.seed, epoch as u64), Stream::Shuffle));
        let augmenting = cfg.augment_noise > 0.0 || cfg.augment_cutout > 0;

        let mut step = self.state.step as usize;
        let lr_start = cosine_lr(step, total, cfg.lr, cfg.min_lr)?;
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(step, total, cfg.lr, cfg.min_lr)?;
            let augmented: Vec<Tensor<T>>;
            let xs: Vec<&Tensor<T>> = if augmenting {
                let mut aug_rng = rng::stream(rng::derive_seed(cfg.seed, step as u64), Stream::Augment);
                augmented = batch.iter().map(|&i| augment(&self.inputs[i], cfg, &mut aug_rng)).collect();
                augmented.iter().collect()
            } else {
                batch.iter().map(|&i| &self.inputs[i]).collect()
            };
            let ys: Vec<usize> = batch.iter().map(|&i| self.labels[i]).collect();

            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let mut ctx = OneBt::<T>::step_ctx(cfg.seed, step as u64);
            let logits = model.logits_batch(&mut tape, &vars, &xs, &mut ctx)?;
            let loss = tape.cross_entropy_label_smoothed(logits, &ys, cfg.label_smoothing)?;
            let lv = tape.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("loss became {lv} at step {step}")));
            }
            loss_sum += lv * ys.len() as f64;
            let lt = tape.value(logits);
            correct += ys.iter().enumerate().filter(|(i, &y)| argmax(lt.row(*i)) == y).count();

            model.params_mut().zero_grad();
            tape.backward(loss, model.params_mut())?;
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(model.params_mut(), max);
            }
            let hp = AdamWHyper {
                lr,
                betas: cfg.betas,
                eps: cfg.eps,
                weight_decay: cfg.weight_decay,
            };
            adamw_step(model.params_mut(), &mut self.state, &hp)?;
            self.log.step_lrs.push(lr);
            step += 1;
        }
        let (val_loss, val_acc) = match &self.val {
            Some((vx, vy)) if !vx.is_empty() => {
                let (l, a) = evaluate_loss(model, vx, vy, cfg.label_smoothing, cfg.batch_size)?;
                (Some(l), Some(a))
            }
            _ => (None, None),
        };
        let rec = EpochRecord {
            epoch,
            lr: lr_start,
            lr_end: cosine_lr(step, total, cfg.lr, cfg.min_lr)?,
            train_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            val_acc,
            val_loss,
        };
        log::debug!(
            "epoch {epoch}: loss {:.4} acc {:.3} lr {:.2e}",
            rec.train_loss,
            rec.train_acc,
            rec.lr
        );
        self.log.epochs.push(rec.clone());
        self.log.steps = step;
        Ok(rec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5).unwrap(), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-5).unwrap() - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5).unwrap() - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 1e-3, 0.0).is_err());
        assert!(cosine_lr(0, 0, 1e-3, 0.0).is_err());
    }

    fn one_param(v: f64, g: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.add("w", Tensor::scalar(v)).unwrap();
        p.get_mut(0).grad = Tensor::scalar(g);
        p
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = one_param(2.0, 0.0);
        let mut s = AdamState::new(&p);
        let hp = AdamWHyper {
            lr: 0.1,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.05,
        };
        for k in 1..=3 {
            adamw_step(&mut p, &mut s, &hp).unwrap();
            let want = 2.0 * (1.0 - 0.1 * 0.05f64).powi(k);
            assert!((p.get(0).tensor.item() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps)
        let g = 0.3;
        let mut p = one_param(1.0, g);
        let mut s = AdamState::new(&p);
        let hp = AdamWHyper {
            lr: 1e-2,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
        };
        adamw_step(&mut p, &mut s, &hp).unwrap();
        let want = 1.0 - 1e-2 * g / (g + 1e-8);
        assert!((p.get(0).tensor.item() - want).abs() < 1e-14);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = one_param(1.0, f64::NAN);
        let mut s = AdamState::new(&p);
        let hp = AdamWHyper {
            lr: 1e-2,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let err = adamw_step(&mut p, &mut s, &hp).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("`w`")));
        assert_eq!(p.get(0).tensor.item(), 1.0);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { label_smoothing: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert_eq!(TrainConfig::default().steps_per_epoch(65), 3);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut p = one_param(0.0, 3.0);
        p.add("u", Tensor::scalar(0.0)).unwrap();
        p.get_mut(1).grad = Tensor::scalar(4.0);
        let n = clip_grad_norm(&mut p, 1.0);
        assert_eq!(n, 5.0);
        assert!((p.get(0).grad.item() - 0.6).abs() < 1e-15);
        assert!((p.get(1).grad.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn augmentation_cutout_zeroes_a_window() {
        let x = Tensor::<f32>::full([20, 2], 1.0);
        let cfg = TrainConfig {
            augment_cutout: 5,
            ..Default::default()
        };
        let y = augment(&x, &cfg, &mut rng::stream(0, Stream::Augment));
        assert_eq!(y.data().iter().filter(|&&v| v == 0.0).count(), 10);
    }
}
