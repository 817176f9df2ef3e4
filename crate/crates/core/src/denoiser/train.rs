//! Training records, the simple noise-prediction loss, and an Adam training loop.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::unet::{loss_and_gradient, predict_batch};
use super::{Architecture, DenoiserParams};
use crate::container::{Tensor, TensorFile};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, SymMatrix};
use crate::rng::SeedStream;

/// Normalized clean gradient, normalized injected noise, and the step it was injected at.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub x0: SymMatrix,
    pub eps: SymMatrix,
    pub k: usize,
}

impl TrainRecord {
    /// `x_k = √ᾱ_k·x0 + √(1−ᾱ_k)·ε`.
    pub fn noisy(&self, schedule: &DiffusionSchedule) -> SymMatrix {
        let ab = schedule.alpha_bar(self.k);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let m = self.x0.as_matrix().zip_map(&self.eps, |x, e| a * x + b * e).expect("same shape");
        SymMatrix::from_symmetric_unchecked(m)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingSet {
    pub records: Vec<TrainRecord>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of records per step `1..=t`.
    pub fn counts_per_step(&self, t: usize) -> Vec<usize> {
        let mut counts = vec![0; t];
        for r in &self.records {
            if (1..=t).contains(&r.k) {
                counts[r.k - 1] += 1;
            }
        }
        counts
    }

    pub fn validate(&self, schedule: &DiffusionSchedule) -> Result<()> {
        let t = schedule.steps();
        if let Some(r) = self.records.iter().find(|r| r.k == 0 || r.k > t) {
            return Err(Error::invalid(format!("record step {} outside 1..={t}", r.k)));
        }
        Ok(())
    }

    pub fn to_container(&self) -> TensorFile {
        let mut tensors = Vec::with_capacity(3 * self.records.len());
        for (i, r) in self.records.iter().enumerate() {
            let l = r.x0.dim();
            tensors.push(Tensor::new(format!("x0/{i}"), vec![l, l], r.x0.as_slice().to_vec()).expect("square"));
            tensors.push(Tensor::new(format!("eps/{i}"), vec![l, l], r.eps.as_slice().to_vec()).expect("square"));
            tensors.push(Tensor::new(format!("k/{i}"), vec![1], vec![r.k as f64]).expect("scalar"));
        }
        TensorFile::new(tensors)
    }

    pub fn from_container(file: &TensorFile) -> Result<Self> {
        if file.tensors.len() % 3 != 0 {
            return Err(Error::format("training set must hold x0/eps/k triples"));
        }
        let sym = |t: &Tensor| -> Result<SymMatrix> {
            match t.info.shape.as_slice() {
                [a, b] if a == b => SymMatrix::new(Matrix::from_vec(*a, *b, t.data.clone())?)
                    .map_err(|e| Error::format(format!("{}: {e}", t.name()))),
                _ => Err(Error::format(format!("{} is not a square matrix", t.name()))),
            }
        };
        let records = file
            .tensors
            .chunks_exact(3)
            .enumerate()
            .map(|(i, c)| {
                let names = [format!("x0/{i}"), format!("eps/{i}"), format!("k/{i}")];
                if c.iter().zip(&names).any(|(t, n)| t.name() != n) {
                    return Err(Error::format(format!("record {i} tensors are out of order")));
                }
                let k = c[2].data.first().copied().unwrap_or(-1.0);
                if k < 1.0 || k.fract() != 0.0 {
                    return Err(Error::format(format!("record {i} has invalid step {k}")));
                }
                Ok(TrainRecord { x0: sym(&c[0])?, eps: sym(&c[1])?, k: k as usize })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&TensorFile::read(path)?)
    }
}

const EVAL_CHUNK: usize = 64;

/// Mean over `batch` of `‖ε − ε_θ(x_k, k)‖_F²`.
pub fn loss_simple(batch: &[TrainRecord], params: &DenoiserParams, schedule: &DiffusionSchedule) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("loss needs a nonempty batch"));
    }
    let mut total = 0.0;
    for chunk in batch.chunks(EVAL_CHUNK) {
        let xs: Vec<SymMatrix> = chunk.iter().map(|r| r.noisy(schedule)).collect();
        let ks: Vec<usize> = chunk.iter().map(|r| r.k).collect();
        let pred = predict_batch(params, &xs, &ks)?;
        for (p, r) in pred.iter().zip(chunk) {
            let d = p.sub(&r.eps)?;
            total += d.dot(&d);
        }
    }
    Ok(total / batch.len() as f64)
}

/// Loss of the predictor that always returns zero.
pub fn zero_predictor_loss(batch: &[TrainRecord]) -> f64 {
    batch.iter().map(|r| r.eps.dot(&r.eps)).sum::<f64>() / batch.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub val_fraction: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 32,
            steps: 2000,
            seed: 0,
            clip_norm: 1.0,
            val_fraction: 0.1,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch == 0 || !(self.clip_norm > 0.0) {
            return Err(Error::invalid("learning rate, batch size and clip norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid(format!("validation fraction must lie in [0, 1), got {}", self.val_fraction)));
        }
        Ok(())
    }

    /// Records `0..n_val` are held out; the rest are trained on.
    pub fn validation_count(&self, n: usize) -> usize {
        ((n as f64 * self.val_fraction).round() as usize).min(n.saturating_sub(1))
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: DenoiserParams,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub step: usize,
    pub log: Vec<f64>,
}

impl TrainState {
    pub fn fresh(params: DenoiserParams) -> Self {
        let n = params.param_count();
        Self { params, adam_m: vec![0.0; n], adam_v: vec![0.0; n], step: 0, log: Vec::new() }
    }

    pub fn to_container(&self) -> TensorFile {
        let mut file = self.params.to_container();
        let n = self.params.param_count();
        file.tensors.push(Tensor::new("adam/m", vec![n], self.adam_m.clone()).expect("sized"));
        file.tensors.push(Tensor::new("adam/v", vec![n], self.adam_v.clone()).expect("sized"));
        file.tensors.push(Tensor::new("train/step", vec![1], vec![self.step as f64]).expect("scalar"));
        file.tensors.push(Tensor::new("train/log", vec![self.log.len()], self.log.clone()).expect("sized"));
        file
    }

    pub fn from_container(file: &TensorFile) -> Result<Self> {
        let split = file.tensors.len().saturating_sub(4);
        let params = DenoiserParams::from_container(&TensorFile::new(file.tensors[..split].to_vec()))?;
        let n = params.param_count();
        let adam_m = file.require("adam/m")?.data.clone();
        let adam_v = file.require("adam/v")?.data.clone();
        if adam_m.len() != n || adam_v.len() != n {
            return Err(Error::format("optimizer state does not match parameter count"));
        }
        let step = file.require("train/step")?.data[0] as usize;
        let log = file.require("train/log")?.data.clone();
        Ok(Self { params, adam_m, adam_v, step, log })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&TensorFile::read(path)?)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DenoiserParams,
    /// Training loss per optimizer step.
    pub log: Vec<f64>,
    pub val_loss: f64,
    pub val_zero_loss: f64,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Trains from a fresh initialization for `hyper.steps` steps.
pub fn train(
    dataset: &TrainingSet,
    schedule: &DiffusionSchedule,
    arch: Architecture,
    hyper: &TrainHyper,
) -> Result<TrainOutcome> {
    let init = DenoiserParams::init(arch, SeedStream::new(hyper.seed).named("init"))?;
    let state = train_resumable(dataset, schedule, TrainState::fresh(init), hyper, hyper.steps)?;
    let n_val = hyper.validation_count(dataset.len());
    let val = &dataset.records[..n_val];
    let (val_loss, val_zero_loss) = if val.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (loss_simple(val, &state.params, schedule)?, zero_predictor_loss(val))
    };
    Ok(TrainOutcome { params: state.params, log: state.log, val_loss, val_zero_loss })
}

/// Continues `state` up to step `stop_at` (at most `hyper.steps`).
///
/// Step `s` draws its minibatch from child stream `s` of the seed and uses a
/// cosine-decayed rate `lr·(1 + cos(π s / steps))/2`, so stopping and resuming
/// reproduces an uninterrupted run exactly.
pub fn train_resumable(
    dataset: &TrainingSet,
    schedule: &DiffusionSchedule,
    mut state: TrainState,
    hyper: &TrainHyper,
    stop_at: usize,
) -> Result<TrainState> {
    hyper.validate()?;
    dataset.validate(schedule)?;
    let n_val = hyper.validation_count(dataset.len());
    let train_set = &dataset.records[n_val..];
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let streams = SeedStream::new(hyper.seed).named("batches");
    let stop_at = stop_at.min(hyper.steps);
    while state.step < stop_at {
        let s = state.step;
        let mut rng = streams.child(s as u64).rng();
        let picks: Vec<&TrainRecord> = (0..hyper.batch).map(|_| &train_set[rng.gen_range(0..train_set.len())]).collect();
        let xs: Vec<SymMatrix> = picks.iter().map(|r| r.noisy(schedule)).collect();
        let ks: Vec<usize> = picks.iter().map(|r| r.k).collect();
        let targets: Vec<SymMatrix> = picks.iter().map(|r| r.eps.clone()).collect();
        let outcome = loss_and_gradient(&state.params, &xs, &ks, &targets);
        let (loss, mut grad) = match outcome {
            Ok((loss, grad)) if loss.is_finite() && grad.iter().all(|g| g.is_finite()) => (loss, grad),
            Ok(_) | Err(Error::Numerical { .. }) => {
                return Err(Error::TrainingDiverged { step: s, last_valid: Box::new(state.params) });
            }
            Err(e) => return Err(e),
        };
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > hyper.clip_norm {
            let f = hyper.clip_norm / norm;
            grad.iter_mut().for_each(|g| *g *= f);
        }
        let lr = hyper.lr * 0.5 * (1.0 + (std::f64::consts::PI * s as f64 / hyper.steps as f64).cos());
        let t = (s + 1) as i32;
        let (c1, c2) = (1.0 - ADAM_B1.powi(t), 1.0 - ADAM_B2.powi(t));
        let values = state.params.values_mut();
        for i in 0..values.len() {
            let g = grad[i];
            state.adam_m[i] = ADAM_B1 * state.adam_m[i] + (1.0 - ADAM_B1) * g;
            state.adam_v[i] = ADAM_B2 * state.adam_v[i] + (1.0 - ADAM_B2) * g * g;
            let mh = state.adam_m[i] / c1;
            let vh = state.adam_v[i] / c2;
            values[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
        state.log.push(loss);
        state.step += 1;
    }
    Ok(state)
}
