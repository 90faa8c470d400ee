//! Task losses, optimizers, the mini-batch training loop and evaluation.

pub mod ablation;
pub mod baseline;
pub mod loss;
pub mod optim;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{ablate, write_ablation_csv, AblationRow};
pub use baseline::{logistic_baseline, summary_features, BaselineConfig, LogisticModel};
pub use loss::{loss_value, task_loss};
pub use optim::{mean_gradients, Optimizer, OptimizerState};

use crate::autodiff::{GradStore, Graph, Tensor};
use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::metrics::{
    auc_pr, auc_roc, bootstrap_ci, kappa_linear, macro_micro_auc, mad_hours, EvalResult,
};
use crate::model::{ModelConfig, Task, Tscan};
use crate::pipeline::{Label, Sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Positive-class loss weight for binary tasks; `None` uses
    /// negatives / positives of the training set.
    pub class_weight: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            early_stop_patience: 5,
            seed: 0,
            class_weight: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if let Some(w) = self.class_weight {
            if !w.is_finite() || w <= 0.0 {
                return Err(Error::Config(format!("class weight {w} must be positive")));
            }
        }
        Ok(())
    }
}

/// Model and training settings in one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_metric: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub metric: String,
    pub higher_is_better: bool,
    pub class_weight: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    /// Equality ignoring wall-clock times.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        let strip = |l: &TrainLog| {
            let mut l = l.clone();
            l.epochs.iter_mut().for_each(|e| e.wall_seconds = 0.0);
            l
        };
        strip(self) == strip(other)
    }

    /// One row per epoch. Wall-clock times are left out so that reruns
    /// write identical files.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "epoch",
            "train_loss",
            "val_loss",
            &format!("val_{}", self.metric),
            "best",
        ])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_loss.map(|v| v.to_string()).unwrap_or_default(),
                e.val_metric.to_string(),
                ((e.epoch == self.best_epoch) as u8).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mixes indices into a seed (splitmix64 finaliser).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Positive-class weight `negatives / positives`, or 1 when undefined or
/// the task is not binary.
pub fn auto_class_weight(samples: &[Sample]) -> f64 {
    let pos = samples
        .iter()
        .filter(|s| s.y.as_binary() == Some(true))
        .count();
    let neg = samples
        .iter()
        .filter(|s| s.y.as_binary() == Some(false))
        .count();
    if pos == 0 || neg == 0 {
        1.0
    } else {
        neg as f64 / pos as f64
    }
}

/// Loss and parameter gradients of one sample. `dropout_seed` of `None`
/// runs the network in inference mode.
pub fn sample_gradients(
    model: &Tscan,
    sample: &Sample,
    pos_weight: f64,
    dropout_seed: Option<u64>,
) -> Result<(f64, GradStore)> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let mut ctx = match dropout_seed {
        Some(s) => Ctx::train(model.layer().dropout_rate, s),
        None => Ctx::eval(),
    };
    let out = model.forward(&mut g, &p, &sample.x, &mut ctx)?;
    let l = task_loss(
        &mut g,
        out.probs,
        &sample.y,
        model.config().task,
        pos_weight,
    )?;
    g.backward(l)?;
    Ok((g.value(l).item()?, p.gradients(&g)))
}

fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(usize, &T) -> U + Sync + Send) -> Vec<U> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}

/// Mean loss and mean gradients over a batch. Per-sample graphs run in
/// parallel; the reduction happens in sample order, so the result does not
/// depend on the worker count.
pub fn batch_gradients(
    model: &Tscan,
    batch: &[&Sample],
    pos_weight: f64,
    dropout_seeds: Option<&[u64]>,
) -> Result<(f64, GradStore)> {
    let results = par_map(batch, |i, s| {
        sample_gradients(model, s, pos_weight, dropout_seeds.map(|d| d[i]))
    });
    let mut losses = Vec::with_capacity(batch.len());
    let mut grads = Vec::with_capacity(batch.len());
    for r in results {
        let (l, g) = r?;
        losses.push(l);
        grads.push(g);
    }
    let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok((mean_loss, mean_gradients(&grads)?))
}

/// Inference-mode probabilities for every sample, in order.
pub fn predict_all(model: &Tscan, samples: &[Sample]) -> Result<Vec<Tensor>> {
    par_map(samples, |_, s| model.predict(&s.x))
        .into_iter()
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

/// Headline metric per task: AUC-ROC for binary tasks, MAD for length of
/// stay, macro AUC for phenotyping.
pub fn primary_metric(task: Task) -> (&'static str, bool) {
    match task {
        Task::Ihm | Task::Decompensation => ("auc_roc", true),
        Task::Los => ("mad_hours", false),
        Task::Phenotype => ("macro_auc", true),
    }
}

fn metric_battery(
    task: Task,
    probs: &[Vec<f64>],
    labels: &[Label],
    idx: &[usize],
) -> Result<Vec<(&'static str, f64)>> {
    match task {
        Task::Ihm | Task::Decompensation => {
            let scores: Vec<f64> = idx.iter().map(|&i| probs[i][1]).collect();
            let y = idx
                .iter()
                .map(|&i| {
                    labels[i]
                        .as_binary()
                        .ok_or_else(|| Error::invalid("expected binary labels"))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(vec![
                ("auc_roc", auc_roc(&scores, &y)?),
                ("auc_pr", auc_pr(&scores, &y)?),
            ])
        }
        Task::Los => {
            let mut pred = Vec::with_capacity(idx.len());
            let mut truth = Vec::with_capacity(idx.len());
            let mut hours = Vec::with_capacity(idx.len());
            for &i in idx {
                let Label::Bucket {
                    bucket,
                    remaining_hours,
                } = labels[i]
                else {
                    return Err(Error::invalid("expected length-of-stay labels"));
                };
                pred.push(argmax(&probs[i]));
                truth.push(bucket);
                hours.push(remaining_hours);
            }
            let k = probs[idx[0]].len();
            Ok(vec![
                ("kappa", kappa_linear(&pred, &truth, k)?),
                ("mad_hours", mad_hours(&pred, &hours)?),
            ])
        }
        Task::Phenotype => {
            let scores: Vec<Vec<f64>> = idx.iter().map(|&i| probs[i].clone()).collect();
            let y = idx
                .iter()
                .map(|&i| match &labels[i] {
                    Label::MultiLabel { labels } => Ok(labels.clone()),
                    _ => Err(Error::invalid("expected multi-label targets")),
                })
                .collect::<Result<Vec<_>>>()?;
            let (ma, mi) = macro_micro_auc(&scores, &y)?;
            Ok(vec![("macro_auc", ma), ("micro_auc", mi)])
        }
    }
}

/// Metric battery of a task from predicted probability vectors. With
/// `bootstrap = Some((resamples, seed))` each metric also gets a 95%
/// percentile interval.
pub fn evaluate_predictions(
    task: Task,
    probs: &[Vec<f64>],
    labels: &[Label],
    bootstrap: Option<(usize, u64)>,
) -> Result<EvalResult> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let all: Vec<usize> = (0..probs.len()).collect();
    let point = metric_battery(task, probs, labels, &all)?;
    let mut result = EvalResult {
        samples: probs.len(),
        ..Default::default()
    };
    for (name, v) in &point {
        result.metrics.insert(name.to_string(), *v);
    }
    result.metadata.insert("task".into(), task.to_string());
    if matches!(task, Task::Ihm | Task::Decompensation) {
        result.metadata.insert(
            "auc_pr".into(),
            "step-wise average precision over distinct thresholds".into(),
        );
    }
    if task == Task::Los {
        result.metadata.insert(
            "mad_hours".into(),
            "bucket midpoints, 720 h for the open top bucket".into(),
        );
    }
    if let Some((resamples, seed)) = bootstrap {
        for (k, (name, _)) in point.iter().enumerate() {
            let ci = bootstrap_ci(probs.len(), resamples, seed, |idx| {
                metric_battery(task, probs, labels, idx)
                    .ok()
                    .map(|m| m[k].1)
            });
            if let Some((lo, hi)) = ci {
                // Widen to the point estimate when the resampled distribution sits to one side of it.
                let v = result.metrics[*name];
                result
                    .confidence_intervals
                    .insert(name.to_string(), [lo.min(v), hi.max(v)]);
            }
        }
        result
            .metadata
            .insert("bootstrap_resamples".into(), resamples.to_string());
    }
    Ok(result)
}

/// Runs the model on `samples` and scores it.
pub fn evaluate(
    model: &Tscan,
    samples: &[Sample],
    bootstrap: Option<(usize, u64)>,
) -> Result<EvalResult> {
    let probs: Vec<Vec<f64>> = predict_all(model, samples)?
        .into_iter()
        .map(Tensor::into_data)
        .collect();
    let labels: Vec<Label> = samples.iter().map(|s| s.y.clone()).collect();
    evaluate_predictions(model.config().task, &probs, &labels, bootstrap)
}

fn mean_loss(model: &Tscan, samples: &[Sample], pos_weight: f64) -> Result<f64> {
    let probs = predict_all(model, samples)?;
    let mut total = 0.0;
    for (p, s) in probs.iter().zip(samples) {
        total += loss_value(p, &s.y, model.config().task, pos_weight)?;
    }
    Ok(total / samples.len() as f64)
}

fn check_shapes(model: &Tscan, samples: &[Sample]) -> Result<()> {
    let cfg = model.config();
    for s in samples {
        if s.x.shape() != [cfg.t, cfg.d] {
            return Err(Error::shape(
                "training sample",
                s.x.shape(),
                &[cfg.t, cfg.d],
            ));
        }
        s.y.target(cfg.n_classes)?;
    }
    Ok(())
}

/// Builds a model from `model_config` and trains it. See [`train_model`].
pub fn train(
    train_set: &[Sample],
    val_set: &[Sample],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Tscan, TrainLog)> {
    let model = Tscan::new(model_config.clone(), cfg.seed)?;
    train_model(model, train_set, val_set, cfg, None)
}

/// Mini-batch training with early stopping. Returns the parameters of the
/// best validation epoch (also written to `checkpoint` on every
/// improvement, when given). Without a validation set the training loss
/// selects the best epoch. Deterministic for a given seed.
pub fn train_model(
    mut model: Tscan,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<(Tscan, TrainLog)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    check_shapes(&model, train_set)?;
    check_shapes(&model, val_set)?;
    let task = model.config().task;
    let pos_weight = match task {
        Task::Ihm | Task::Decompensation => cfg
            .class_weight
            .unwrap_or_else(|| auto_class_weight(train_set)),
        _ => 1.0,
    };
    let (mut metric, mut higher) = primary_metric(task);
    let val_labels: Vec<Label> = val_set.iter().map(|s| s.y.clone()).collect();
    if val_set.is_empty() {
        (metric, higher) = ("train_loss", false);
    } else {
        // Labels alone decide whether the metric is defined; probe with constant scores.
        let probe = vec![vec![0.5; model.config().n_classes]; val_set.len()];
        if evaluate_predictions(task, &probe, &val_labels, None).is_err() {
            log::warn!(
                "{metric} is undefined on the validation labels; selecting by validation loss"
            );
            (metric, higher) = ("loss", false);
        }
    }

    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut log = TrainLog {
        metric: metric.to_string(),
        higher_is_better: higher,
        class_weight: pos_weight,
        epochs: Vec::new(),
        best_epoch: 0,
    };
    let mut best_model = model.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64]));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let seeds: Vec<u64> = idx
                .iter()
                .map(|&i| derive_seed(cfg.seed, &[epoch as u64, b as u64, i as u64]))
                .collect();
            let (loss, grads) = batch_gradients(&model, &batch, pos_weight, Some(&seeds))?;
            if !loss.is_finite()
                || grads
                    .values()
                    .any(|g| g.data().iter().any(|v| !v.is_finite()))
            {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            loss_sum += loss * batch.len() as f64;
            opt.step(model.params_mut(), &grads, cfg.learning_rate)?;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let (val_loss, value) = if val_set.is_empty() {
            (None, train_loss)
        } else {
            let vl = mean_loss(&model, val_set, pos_weight)?;
            let v = if metric == "loss" {
                vl
            } else {
                evaluate(&model, val_set, None)?
                    .get(metric)
                    .expect("metric in battery")
            };
            (Some(vl), v)
        };
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_metric: value,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: train loss {train_loss:.5}, val {metric} {value:.5} ({:.1} s)",
            start.elapsed().as_secs_f64()
        );
        let best = log.epochs[log.best_epoch].val_metric;
        let improved = epoch == 0 || if higher { value > best } else { value < best };
        if improved {
            log.best_epoch = epoch;
            best_model = model.clone();
            if let Some(path) = checkpoint {
                best_model.save(path)?;
            }
        } else if epoch - log.best_epoch >= cfg.early_stop_patience {
            log::info!(
                "early stop after epoch {epoch}; best epoch {}",
                log.best_epoch
            );
            break;
        }
    }
    Ok((best_model, log))
}
