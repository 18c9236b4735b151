//! Deterministic mini-batch training with momentum SGD, and a whole-model
//! finite-difference gradient check.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{self, check_eps, LabeledLogits, LossVariant, MarginConfig};
use crate::model::{self, EncoderParams, Model, ModelGrads};
use crate::numerics::{norm, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig<T> {
    pub loss: MarginConfig<T>,
    pub lr: T,
    /// In `[0, 1)`.
    pub momentum: T,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seed of the shuffling generator (independent of data generation).
    pub seed: u64,
    pub shuffle: bool,
}

impl<T: Scalar> TrainConfig<T> {
    /// lr 0.05, momentum 0.9, batch 64, 30 epochs, shuffled, seed 7.
    pub fn with_loss(loss: MarginConfig<T>) -> Self {
        Self {
            loss,
            lr: T::lit(0.05),
            momentum: T::lit(0.9),
            epochs: 30,
            batch_size: 64,
            seed: 7,
            shuffle: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= T::zero() && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr = {} must be finite and ≥ 0",
                self.lr
            )));
        }
        if !(self.momentum >= T::zero() && self.momentum < T::one()) {
            return Err(Error::Config(format!(
                "momentum = {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats<T> {
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted mean of the batch losses seen during the epoch.
    pub mean_loss: T,
    /// Fraction of samples whose largest logit was the target, measured on
    /// the forward pass before each update.
    pub train_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory<T> {
    pub epochs: Vec<EpochStats<T>>,
    pub steps: u64,
}

impl<T: Scalar> TrainHistory<T> {
    /// `epoch,mean_loss,train_acc`
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "epoch,mean_loss,train_acc")?;
        for e in &self.epochs {
            writeln!(out, "{},{:.16e},{}", e.epoch, e.mean_loss, e.train_acc)?;
        }
        Ok(())
    }
}

/// Trains on the train split of `dataset`.
pub fn train_dataset(
    dataset: &Dataset,
    model: Model<f64>,
    cfg: &TrainConfig<f64>,
) -> Result<(Model<f64>, TrainHistory<f64>)> {
    let rows = dataset.rows(Split::Train);
    let (features, labels) = dataset.subset(&rows);
    train(&features, &labels, model, cfg)
}

/// Momentum SGD (`v ← μv + g`, `θ ← θ − lr·v`) over shuffled mini-batches.
/// Class-weight rows are projected back onto the unit sphere after every
/// step. Aborts with [`Error::NonFiniteLoss`] on the first non-finite loss.
pub fn train<T: Scalar>(
    features: &Matrix<T>,
    labels: &[usize],
    mut model: Model<T>,
    cfg: &TrainConfig<T>,
) -> Result<(Model<T>, TrainHistory<T>)> {
    cfg.validate()?;
    let n = labels.len();
    if n == 0 {
        return Err(Error::Config("training split is empty".into()));
    }
    if features.rows() != n {
        return Err(Error::Shape(format!(
            "{} feature rows, {n} labels",
            features.rows()
        )));
    }
    let classes = model.classes.classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Config(format!(
            "label {bad} but model has {classes} classes"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Vec<T>> = model
        .param_slices()
        .iter()
        .map(|s| vec![T::zero(); s.len()])
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = TrainHistory {
        epochs: Vec::with_capacity(cfg.epochs),
        steps: 0,
    };

    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = T::zero();
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let xb = features.select_rows(batch);
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (logits, trace) = model.forward(&xb)?;
            correct += count_correct(&logits, &yb);
            let data = LabeledLogits::new(logits, yb)?;
            let out = losses::evaluate(&data, &cfg.loss);
            if !out.value.is_finite() || !out.grad.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: history.steps as usize,
                });
            }
            loss_sum += out.value * T::from_count(batch.len());
            let grads = model.backward(&trace, &out.grad)?;
            sgd_step(&mut model, &grads, &mut velocity, cfg)?;
            history.steps += 1;
            debug_assert!(class_rows_unit(&model));
        }
        history.epochs.push(EpochStats {
            epoch,
            mean_loss: loss_sum / T::from_count(n),
            train_acc: correct as f64 / n as f64,
        });
    }
    Ok((model, history))
}

fn sgd_step<T: Scalar>(
    model: &mut Model<T>,
    grads: &ModelGrads<T>,
    velocity: &mut [Vec<T>],
    cfg: &TrainConfig<T>,
) -> Result<()> {
    let g = grads.slices();
    let (lr, mu) = (cfg.lr, cfg.momentum);
    for ((p, v), g) in model
        .encoder_slices_mut()
        .into_iter()
        .zip(velocity.iter_mut())
        .zip(g)
    {
        for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
    }
    let v_w = &mut velocity[4];
    model.classes.update(|w| {
        for ((p, v), &g) in w.as_mut_slice().iter_mut().zip(v_w.iter_mut()).zip(g[4]) {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
    })
}

fn count_correct<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = logits.row(i);
            row.iter().enumerate().all(|(j, &v)| j == y || v < row[y])
        })
        .count()
}

fn class_rows_unit<T: Scalar>(model: &Model<T>) -> bool {
    model
        .classes
        .matrix()
        .row_iter()
        .all(|r| (norm(r) - T::one()).abs() <= T::unit_tolerance())
}

/// Result of [`whole_model_grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport<T> {
    /// Largest `|a − n| / |a|` over parameters with `|a| ≥ 1e-6`.
    pub max_rel_error: T,
    /// Largest `|a − n|` over parameters with `|a| < 1e-6`.
    pub max_abs_error_small: T,
    /// Largest analytic or numeric magnitude seen (zero in a flat region).
    pub max_magnitude: T,
    pub checked: usize,
    /// Parameters whose ±eps probe crossed a hinge or ReLU kink.
    pub skipped: usize,
}

impl<T: Scalar> GradCheckReport<T> {
    /// Relative error ≤ `rel_tol`, and absolute error ≤ 1e-7 on tiny gradients.
    pub fn passes(&self, rel_tol: T) -> bool {
        self.max_rel_error <= rel_tol && self.max_abs_error_small <= T::lit(1e-7)
    }
}

/// Central differences over every scalar parameter (encoder and class
/// weights) against the analytic backward pass. Class weights are perturbed
/// freely, without re-projection.
pub fn whole_model_grad_check<T: Scalar>(
    features: &Matrix<T>,
    labels: &[usize],
    model: &Model<T>,
    loss: &MarginConfig<T>,
    eps: T,
) -> Result<GradCheckReport<T>> {
    let (logits, trace) = model.forward(features)?;
    let data = LabeledLogits::new(logits, labels.to_vec())?;
    let out = losses::evaluate(&data, loss);
    let grads = model.backward(&trace, &out.grad)?;
    compare_model_gradient(features, labels, model, loss, eps, &grads)
}

/// Like [`whole_model_grad_check`] but against caller-supplied gradients.
pub fn compare_model_gradient<T: Scalar>(
    features: &Matrix<T>,
    labels: &[usize],
    model: &Model<T>,
    loss: &MarginConfig<T>,
    eps: T,
    analytic: &ModelGrads<T>,
) -> Result<GradCheckReport<T>> {
    check_eps(eps)?;
    let base_regime = regime(
        &model.encoder,
        model.classes.matrix(),
        features,
        labels,
        loss,
    )?
    .1;
    let mut report = GradCheckReport {
        max_rel_error: T::zero(),
        max_abs_error_small: T::zero(),
        max_magnitude: T::zero(),
        checked: 0,
        skipped: 0,
    };
    let two = T::lit(2.0);
    let small = T::lit(1e-6);
    let mut encoder = model.encoder.clone();
    let mut weights = model.classes.matrix().clone();
    let analytic_flat = analytic.slices();
    for (block, grads) in analytic_flat.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let orig = param_mut(&mut encoder, &mut weights, block, k).map(|p| *p)?;
            *param_mut(&mut encoder, &mut weights, block, k)? = orig + eps;
            let (up, r_up) = regime(&encoder, &weights, features, labels, loss)?;
            *param_mut(&mut encoder, &mut weights, block, k)? = orig - eps;
            let (down, r_down) = regime(&encoder, &weights, features, labels, loss)?;
            *param_mut(&mut encoder, &mut weights, block, k)? = orig;
            if r_up != base_regime || r_down != base_regime {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (two * eps);
            let diff = (a - numeric).abs();
            if a.abs() < small {
                report.max_abs_error_small = report.max_abs_error_small.max(diff);
            } else {
                report.max_rel_error = report.max_rel_error.max(diff / a.abs());
            }
            report.max_magnitude = report.max_magnitude.max(a.abs()).max(numeric.abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

fn param_mut<'a, T: Scalar>(
    encoder: &'a mut EncoderParams<T>,
    weights: &'a mut Matrix<T>,
    block: usize,
    k: usize,
) -> Result<&'a mut T> {
    let slot = match block {
        0 => encoder.w1.as_mut_slice().get_mut(k),
        1 => encoder.b1.get_mut(k),
        2 => encoder.w2.as_mut_slice().get_mut(k),
        3 => encoder.b2.get_mut(k),
        4 => weights.as_mut_slice().get_mut(k),
        _ => None,
    };
    slot.ok_or_else(|| Error::Shape(format!("no parameter {k} in block {block}")))
}

/// Loss value plus the on/off pattern of every kink the loss passes through
/// (ReLU units, and the hinge of each `ram` non-target term).
fn regime<T: Scalar>(
    encoder: &EncoderParams<T>,
    weights: &Matrix<T>,
    features: &Matrix<T>,
    labels: &[usize],
    loss: &MarginConfig<T>,
) -> Result<(T, Vec<bool>)> {
    let (_, trace) = model::encoder_forward(encoder, features)?;
    let logits = model::logits_unchecked(encoder, weights, features)?;
    let mut pattern: Vec<bool> = trace
        .pre_hidden
        .as_slice()
        .iter()
        .map(|&v| v > T::zero())
        .collect();
    if loss.variant() == LossVariant::Ram {
        for (i, &y) in labels.iter().enumerate() {
            let z = logits.row(i);
            for (j, &zj) in z.iter().enumerate() {
                if j != y {
                    pattern.push((z[y] - zj) - loss.m() < T::zero());
                }
            }
        }
    }
    let value = losses::evaluate_raw(&logits, labels, loss).value;
    Ok((value, pattern))
}
