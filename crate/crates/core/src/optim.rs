//! Adam, global-norm gradient clipping, and the supervised training loop.

use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, Batch, SequenceSample};
use crate::model::SequenceModel;
use crate::nn::{collect_grads, Parameterized};
use crate::tensor::{Tape, TensorError, Var};
use crate::{Error, Result};

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub timestep: u64,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 1e-3;

    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            timestep: 0,
        }
    }

    /// Updates `params` in place from `grads`. A non-finite gradient aborts
    /// the step before anything is modified.
    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::ParamMismatch(format!(
                "adam tracks {} parameters, got {} values and {} gradients",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        self.timestep += 1;
        let t = self.timestep as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in
            params.iter_mut().zip(grads).zip(self.first_moment.iter_mut()).zip(self.second_moment.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    /// Applies one step to every parameter of `model` using its stored
    /// gradients (missing gradients count as zero).
    pub fn step<P: Parameterized + ?Sized>(&mut self, model: &mut P) -> Result<()> {
        let grads = model.flat_grads();
        let mut params = model.flat_params();
        self.step_flat(&mut params, &grads)?;
        model.set_flat_params(&params)
    }
}

pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` to norm `threshold` when their L2 norm exceeds it.
/// Returns the factor applied (1 when untouched).
pub fn clip_global_norm(grads: &mut [f64], threshold: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > threshold && threshold > 0.0 {
        let factor = threshold / norm;
        grads.iter_mut().for_each(|g| *g *= factor);
        factor
    } else {
        1.0
    }
}

/// [`clip_global_norm`] over the gradients stored in a model.
pub fn clip_model_grads<P: Parameterized + ?Sized>(model: &mut P, threshold: f64) -> f64 {
    let norm = global_norm(&model.flat_grads());
    if norm > threshold && threshold > 0.0 {
        let factor = threshold / norm;
        model.visit_params_mut(&mut |_, t| t.scale_grad(factor));
        factor
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Use the whole training set for every update.
    pub full_batch: bool,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Iterations per curve record.
    pub eval_every: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            full_batch: false,
            clip_norm: None,
            seed: 0,
            eval_every: 10,
            lr: AdamState::DEFAULT_LR,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be at least 1".into()));
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0 || c.is_nan()) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.lr.is_nan() || self.lr < 0.0 {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// One training-curve record: mean loss and accuracy over the iterations
/// since the previous record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub iterations: usize,
}

#[derive(Debug, Default, Clone, Copy)]
struct Window {
    loss_sum: f64,
    correct: usize,
    samples: usize,
}

/// Index of the largest logit in each row; ties go to the lowest index.
pub fn argmax_rows(logits: &[f64], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

fn record_batch(tape: &mut Tape, model: &dyn SequenceModel, batch: &Batch) -> Result<(Var, Vec<Var>, usize)> {
    let steps: Vec<Var> = batch.steps.iter().map(|t| tape.leaf(t)).collect();
    let (logits, vars) = model.forward_tape(tape, &steps)?;
    let classes = *tape.shape(logits).last().unwrap_or(&1);
    let correct = argmax_rows(tape.value(logits), classes).iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
    let loss = tape.softmax_nll(logits, &batch.labels)?;
    Ok((loss, vars, correct))
}

/// Mini-batch trainer: owns the optimizer state, the global iteration
/// counter and the training curve.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub adam: AdamState,
    pub iteration: usize,
    pub curve: Vec<CurvePoint>,
    window: Window,
}

impl Trainer {
    pub fn new<M: Parameterized + ?Sized>(model: &M, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(model.param_count(), config.lr);
        Ok(Self { config, adam, iteration: 0, curve: Vec::new(), window: Window::default() })
    }

    /// One pass over `data`. Batch order is shuffled from `seed + epoch`.
    pub fn train_epoch<M: SequenceModel>(
        &mut self,
        model: &mut M,
        data: &[SequenceSample],
        epoch: usize,
    ) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let seed = self.config.seed.wrapping_add(epoch as u64);
        let batch_size = if self.config.full_batch { data.len() } else { self.config.batch_size };
        let batches = batch_indices(data, batch_size, seed)?;
        let groups: Vec<Vec<Vec<usize>>> =
            if self.config.full_batch { vec![batches] } else { batches.into_iter().map(|b| vec![b]).collect() };

        let (mut loss_sum, mut correct_sum, mut seen) = (0.0, 0, 0);
        let start = self.iteration;
        for group in groups {
            let iteration = self.iteration + 1;
            let nonfinite = |e: Error| match e {
                Error::Tensor(TensorError::NonFinite { .. }) | Error::NonFiniteGradient => {
                    Error::NonFiniteLoss { iteration }
                }
                other => other,
            };
            let total: usize = group.iter().map(Vec::len).sum();
            let mut tape = Tape::new();
            let mut weighted = Vec::with_capacity(group.len());
            let mut vars_per_batch = Vec::with_capacity(group.len());
            let mut correct = 0;
            for idx in &group {
                let batch = Batch::from_samples(idx.iter().map(|&i| &data[i]))?;
                let (loss, vars, c) = record_batch(&mut tape, model, &batch).map_err(nonfinite)?;
                correct += c;
                let w = idx.len() as f64 / total as f64;
                weighted.push(if group.len() == 1 { loss } else { tape.scale(loss, w)? });
                vars_per_batch.push(vars);
            }
            let mut loss = weighted[0];
            for &l in &weighted[1..] {
                loss = tape.add(loss, l)?;
            }
            let loss_value = tape.value(loss)[0];
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { iteration });
            }
            tape.backward(loss)?;
            model.zero_grad();
            for vars in &vars_per_batch {
                collect_grads(model, &tape, vars)?;
            }
            if let Some(c) = self.config.clip_norm {
                clip_model_grads(model, c);
            }
            self.adam.step(model).map_err(nonfinite)?;
            self.iteration = iteration;

            loss_sum += loss_value * total as f64;
            correct_sum += correct;
            seen += total;
            self.window.loss_sum += loss_value * total as f64;
            self.window.correct += correct;
            self.window.samples += total;
            if iteration == 1 || iteration.is_multiple_of(self.config.eval_every) {
                self.flush();
            }
        }
        Ok(EpochMetrics {
            epoch,
            mean_loss: loss_sum / seen as f64,
            accuracy: correct_sum as f64 / seen as f64,
            iterations: self.iteration - start,
        })
    }

    /// Closes the current curve window, if it holds any iterations.
    pub fn flush(&mut self) {
        if self.window.samples > 0 {
            let n = self.window.samples as f64;
            self.curve.push(CurvePoint {
                iteration: self.iteration,
                loss: self.window.loss_sum / n,
                train_accuracy: self.window.correct as f64 / n,
            });
            self.window = Window::default();
        }
    }
}

/// Predicted class per sample, evaluated in length-bucketed batches.
pub fn predict<M: SequenceModel + ?Sized>(model: &M, data: &[SequenceSample]) -> Result<Vec<usize>> {
    let mut preds = vec![0; data.len()];
    let mut buckets: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in data.iter().enumerate() {
        buckets.entry(s.len()).or_default().push(i);
    }
    for idx in buckets.values() {
        for chunk in idx.chunks(256) {
            let batch = Batch::from_samples(chunk.iter().map(|&i| &data[i]))?;
            let mut tape = Tape::new();
            let steps: Vec<Var> = batch.steps.iter().map(|t| tape.leaf(t)).collect();
            let (logits, _) = model.forward_tape(&mut tape, &steps)?;
            let classes = *tape.shape(logits).last().unwrap_or(&1);
            for (&i, p) in chunk.iter().zip(argmax_rows(tape.value(logits), classes)) {
                preds[i] = p;
            }
        }
    }
    Ok(preds)
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn evaluate<M: SequenceModel + ?Sized>(model: &M, data: &[SequenceSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let preds = predict(model, data)?;
    let correct = preds.iter().zip(data).filter(|(p, s)| **p == s.label).count();
    Ok(correct as f64 / data.len() as f64)
}
