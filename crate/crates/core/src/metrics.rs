//! Evaluation metrics for the four ICU tasks.
//!
//! Binary tasks are scored by AUC-ROC and AUC-PR, length of stay by linear
//! weighted kappa and median absolute deviation in hours, and phenotyping by
//! macro- and micro-averaged AUC-ROC.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::LOS_BUCKET_EDGES_HOURS;

fn check_binary(metric: &'static str, scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{metric}: {} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("{metric}: non-finite score")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric {
            metric,
            reason: format!("needs both classes, got {pos} positive and {neg} negative"),
        });
    }
    Ok((pos, neg))
}

/// Groups of tied scores in decreasing score order, as (positives, negatives).
fn tie_groups(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut last = f64::NAN;
    for i in order {
        if groups.is_empty() || scores[i] != last {
            groups.push((0, 0));
            last = scores[i];
        }
        let g = groups.last_mut().unwrap();
        if labels[i] {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Area under the ROC curve by the trapezoidal rule over distinct
/// thresholds. Tied scores contribute one half, matching the normalised
/// Mann-Whitney U statistic.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary("auc_roc", scores, labels)?;
    let (mut tp, mut fp, mut area) = (0.0, 0.0, 0.0);
    for (p, n) in tie_groups(scores, labels) {
        let (tp_next, fp_next) = (tp + p as f64, fp + n as f64);
        area += (fp_next - fp) * (tp + tp_next) / 2.0;
        tp = tp_next;
        fp = fp_next;
    }
    Ok(area / (pos as f64 * neg as f64))
}

/// Average precision: `Σ (R_k - R_{k-1}) P_k` over decreasing distinct thresholds.
pub fn auc_pr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_binary("auc_pr", scores, labels)?;
    let (mut tp, mut fp, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    for (p, n) in tie_groups(scores, labels) {
        tp += p;
        fp += n;
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Cohen's kappa with linear weights `|i - j| / (n - 1)`.
pub fn kappa_linear(pred: &[usize], truth: &[usize], n_buckets: usize) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::UndefinedMetric {
            metric: "kappa_linear",
            reason: "empty input".into(),
        });
    }
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "kappa: {} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if n_buckets < 2 {
        return Err(Error::invalid("kappa needs at least two buckets"));
    }
    if let Some(b) = pred.iter().chain(truth).find(|&&b| b >= n_buckets) {
        return Err(Error::invalid(format!(
            "bucket {b} outside [0, {n_buckets})"
        )));
    }
    let n = pred.len() as f64;
    let mut observed = vec![vec![0.0; n_buckets]; n_buckets];
    let mut row = vec![0.0; n_buckets];
    let mut col = vec![0.0; n_buckets];
    for (&p, &t) in pred.iter().zip(truth) {
        observed[p][t] += 1.0;
        row[p] += 1.0;
        col[t] += 1.0;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n_buckets {
        for j in 0..n_buckets {
            let w = (i as f64 - j as f64).abs() / (n_buckets - 1) as f64;
            num += w * observed[i][j];
            den += w * row[i] * col[j] / n;
        }
    }
    if den == 0.0 {
        // Every prediction and label share one bucket.
        return if num == 0.0 {
            Ok(1.0)
        } else {
            Err(Error::UndefinedMetric {
                metric: "kappa_linear",
                reason: "zero expected disagreement".into(),
            })
        };
    }
    Ok(1.0 - num / den)
}

/// Representative remaining-stay hours for a length-of-stay bucket: the
/// bucket midpoint, and 720 h for the open-ended top bucket.
pub fn bucket_representative_hours(bucket: usize) -> f64 {
    let edges = LOS_BUCKET_EDGES_HOURS;
    if bucket + 1 < edges.len() {
        (edges[bucket] + edges[bucket + 1]) / 2.0
    } else {
        720.0
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[m]
    } else {
        (values[m - 1] + values[m]) / 2.0
    })
}

/// Median absolute deviation in hours between bucket representatives and
/// the true remaining stay.
pub fn mad_hours(pred_buckets: &[usize], true_remaining_hours: &[f64]) -> Result<f64> {
    if pred_buckets.len() != true_remaining_hours.len() {
        return Err(Error::invalid("mad: length mismatch"));
    }
    let mut dev: Vec<f64> = pred_buckets
        .iter()
        .zip(true_remaining_hours)
        .map(|(&b, &h)| (bucket_representative_hours(b) - h).abs())
        .collect();
    median(&mut dev).ok_or(Error::UndefinedMetric {
        metric: "mad_hours",
        reason: "empty input".into(),
    })
}

/// Macro (mean of per-label AUCs, skipping single-class labels) and micro
/// (AUC of the flattened matrix) averaged AUC-ROC. Rows are samples.
pub fn macro_micro_auc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<(f64, f64)> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::invalid(
            "macro_micro_auc: empty or mismatched matrices",
        ));
    }
    let cols = scores[0].len();
    if scores.iter().any(|r| r.len() != cols) || labels.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid("macro_micro_auc: ragged matrices"));
    }
    let mut per_label = Vec::with_capacity(cols);
    for c in 0..cols {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[c]).collect();
        match auc_roc(&s, &l) {
            Ok(a) => per_label.push(a),
            Err(Error::UndefinedMetric { .. }) => {
                log::warn!("label column {c} has a single class; skipped in macro AUC")
            }
            Err(e) => return Err(e),
        }
    }
    if per_label.is_empty() {
        return Err(Error::UndefinedMetric {
            metric: "macro_auc",
            reason: "every label column has a single class".into(),
        });
    }
    let macro_auc = per_label.iter().sum::<f64>() / per_label.len() as f64;
    let flat_s: Vec<f64> = scores.iter().flatten().copied().collect();
    let flat_l: Vec<bool> = labels.iter().flatten().copied().collect();
    let micro_auc = auc_roc(&flat_s, &flat_l)?;
    Ok((macro_auc, micro_auc))
}

/// Percentile bootstrap interval (2.5 %, 97.5 %). `stat` receives resampled
/// indices and may decline a resample (e.g. a single-class draw) with `None`.
pub fn bootstrap_ci(
    n: usize,
    resamples: usize,
    seed: u64,
    stat: impl Fn(&[usize]) -> Option<f64>,
) -> Option<(f64, f64)> {
    if n == 0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(resamples);
    let mut idx = vec![0usize; n];
    for _ in 0..resamples {
        idx.iter_mut().for_each(|i| *i = rng.random_range(0..n));
        if let Some(v) = stat(&idx) {
            values.push(v);
        }
    }
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let at = |q: f64| values[((values.len() - 1) as f64 * q).round() as usize];
    Some((at(0.025), at(0.975)))
}

/// Named metric values with optional bootstrap intervals.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metrics: BTreeMap<String, f64>,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub confidence_intervals: BTreeMap<String, [f64; 2]>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl EvalResult {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).copied()
    }
}

/// Side-by-side CSV of several runs: one row per metric, one column per run.
pub fn compare_csv(runs: &[(String, EvalResult)]) -> Result<String> {
    let mut metrics: Vec<&String> = runs.iter().flat_map(|(_, r)| r.metrics.keys()).collect();
    metrics.sort();
    metrics.dedup();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["metric".to_string()];
    header.extend(runs.iter().map(|(name, _)| name.clone()));
    w.write_record(&header)?;
    for m in metrics {
        let mut row = vec![m.clone()];
        row.extend(
            runs.iter()
                .map(|(_, r)| r.get(m).map(|v| v.to_string()).unwrap_or_default()),
        );
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
