//! WebAssembly bindings for the browser demo. Each exported function
//! returns a JSON string; the plain Rust functions underneath are what the
//! native tests call.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use tscan::layers::{positional_encoding, LayerConfig};
use tscan::metrics::{auc_pr, auc_roc};
use tscan::model::{attention_report, Fusion, ModelConfig, Task, Tscan};
use tscan::pipeline::{run_pipeline, synth_cohort, window, VariableDictionary};
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<Vec<f64>>,
}

pub fn encoding_table(length: usize, d_model: usize) -> tscan::Result<Heatmap> {
    let pe = positional_encoding(length, d_model)?;
    Ok(Heatmap {
        rows: length,
        cols: d_model,
        values: (0..length).map(|r| pe.row(r).to_vec()).collect(),
    })
}

#[derive(Debug, Serialize)]
pub struct CurvePoint {
    pub x: f64,
    pub y: f64,
    pub threshold: f64,
}

#[derive(Debug, Serialize)]
pub struct Curves {
    pub auc_roc: f64,
    pub auc_pr: f64,
    /// (false positive rate, true positive rate), starting at (0, 0).
    pub roc: Vec<CurvePoint>,
    /// (recall, precision) at each distinct threshold.
    pub pr: Vec<CurvePoint>,
}

/// ROC and precision-recall points at every distinct score, highest first.
pub fn curves(scores: &[f64], labels: &[bool]) -> tscan::Result<Curves> {
    let auc_roc = auc_roc(scores, labels)?;
    let auc_pr = auc_pr(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut roc = vec![CurvePoint {
        x: 0.0,
        y: 0.0,
        threshold: f64::INFINITY,
    }];
    let mut pr = Vec::new();
    let (mut tp, mut fp) = (0.0, 0.0);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        let last_of_tie = order.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_tie {
            roc.push(CurvePoint {
                x: fp / neg,
                y: tp / pos,
                threshold: scores[i],
            });
            pr.push(CurvePoint {
                x: tp / pos,
                y: tp / (tp + fp),
                threshold: scores[i],
            });
        }
    }
    // JSON has no infinity; the first ROC point is "above every score".
    roc[0].threshold = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    Ok(Curves {
        auc_roc,
        auc_pr,
        roc,
        pr,
    })
}

#[derive(Debug, Serialize)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

/// Scores of a two-class problem: negatives ~ N(0, 1), positives ~
/// N(separation, 1), each sample positive with probability `prevalence`.
pub fn scored_set(seed: u64, n: usize, prevalence: f64, separation: f64) -> ScoredSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let p = prevalence.clamp(0.0, 1.0);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(p)).collect();
    // Keep both classes present so the curves are defined.
    if n >= 2 {
        labels[0] = true;
        labels[1] = false;
    }
    let scores = labels
        .iter()
        .map(|&l| unit.sample(&mut rng) + if l { separation } else { 0.0 })
        .collect();
    ScoredSet { scores, labels }
}

#[derive(Debug, Serialize)]
pub struct AttentionView {
    pub probability: f64,
    pub mortality: bool,
    pub los_hours: f64,
    /// The `[48, d]` model input, one row per hour.
    pub input: Heatmap,
    pub temporal_weights: Vec<Vec<f64>>,
    pub indicator_weights: Vec<f64>,
    pub indicator_names: Vec<String>,
}

/// Runs a freshly initialised 48-hour mortality model (seeded by
/// `model_seed`) on the first 48 hours of one synthetic patient (seeded by
/// `patient_seed`) and returns its aggregated attention.
pub fn attention_view(
    patient_seed: u64,
    model_seed: u64,
    fusion: &str,
    chunks: usize,
) -> tscan::Result<AttentionView> {
    let dict = VariableDictionary::builtin_24();
    let cohort = synth_cohort(patient_seed, 1, &dict)?;
    let out = run_pipeline(&cohort.stays, &cohort.events, &dict, None)?;
    let ep = &out.episodes[0];
    let t = 48;
    let x = window(ep, ep.hours().min(t), t)?;

    let mut cfg = ModelConfig::new(Task::Ihm, t, dict.width(), chunks);
    cfg.fusion = fusion.parse::<Fusion>()?;
    cfg.layer = LayerConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        dropout_rate: 0.0,
    };
    let model = Tscan::new(cfg, model_seed)?;
    let probs = model.predict(&x)?;
    let report = attention_report(&model, [&x], &dict.column_names())?;
    Ok(AttentionView {
        probability: probs.data()[1],
        mortality: ep.labels.mortality,
        los_hours: ep.los_hours,
        input: Heatmap {
            rows: t,
            cols: dict.width(),
            values: (0..t).map(|r| x.row(r).to_vec()).collect(),
        },
        temporal_weights: report.temporal_weights,
        indicator_weights: report.indicator_weights,
        indicator_names: report.indicator_names,
    })
}

fn to_json<T: Serialize>(r: tscan::Result<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// Sinusoidal positional encoding table as JSON `{rows, cols, values}`.
#[wasm_bindgen(js_name = positionalEncoding)]
pub fn positional_encoding_json(length: usize, d_model: usize) -> Result<String, JsError> {
    to_json(encoding_table(length, d_model))
}

/// Synthetic scores plus their ROC and PR curves as JSON.
#[wasm_bindgen(js_name = rocPr)]
pub fn roc_pr_json(
    seed: u64,
    n: usize,
    prevalence: f64,
    separation: f64,
) -> Result<String, JsError> {
    let set = scored_set(seed, n, prevalence, separation);
    to_json(curves(&set.scores, &set.labels))
}

/// Attention of an untrained model on one synthetic patient, as JSON.
#[wasm_bindgen(js_name = attentionExplorer)]
pub fn attention_explorer_json(
    patient_seed: u64,
    model_seed: u64,
    fusion: &str,
    chunks: usize,
) -> Result<String, JsError> {
    to_json(attention_view(patient_seed, model_seed, fusion, chunks))
}
