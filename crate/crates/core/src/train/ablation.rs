//! The six fusion configurations trained on one dataset under one seed.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{evaluate, train, TrainConfig, TrainLog};
use crate::error::Result;
use crate::metrics::EvalResult;
use crate::model::{Fusion, ModelConfig};
use crate::pipeline::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub fusion: Fusion,
    pub log: TrainLog,
    /// Best-epoch model on the validation set; `None` without one.
    pub val: Option<EvalResult>,
    /// Best-epoch model on the test set; `None` when the set is empty or a
    /// metric is undefined on it.
    pub test: Option<EvalResult>,
}

/// Trains one model per entry of `fusions` from the same base config and
/// seed, in order.
pub fn ablate(
    train_set: &[Sample],
    val_set: &[Sample],
    test_set: &[Sample],
    base: &ModelConfig,
    cfg: &TrainConfig,
    fusions: &[Fusion],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(fusions.len());
    for &fusion in fusions {
        log::info!("ablation: training {fusion}");
        let mc = ModelConfig {
            fusion,
            ..base.clone()
        };
        let (model, log) = train(train_set, val_set, &mc, cfg)?;
        let score = |set: &[Sample]| {
            if set.is_empty() {
                None
            } else {
                evaluate(&model, set, None).ok()
            }
        };
        rows.push(AblationRow {
            fusion,
            log,
            val: score(val_set),
            test: score(test_set),
        });
    }
    Ok(rows)
}

/// One row per fusion: epochs run, best epoch, the selection metric at the
/// best epoch, then every validation and test metric.
pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], writer: W) -> Result<()> {
    let mut names: Vec<&String> = rows
        .iter()
        .flat_map(|r| r.val.iter().chain(&r.test).flat_map(|e| e.metrics.keys()))
        .collect();
    names.sort();
    names.dedup();
    let metric = rows
        .first()
        .map(|r| r.log.metric.as_str())
        .unwrap_or("metric");
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "fusion".to_string(),
        "epochs_run".to_string(),
        "best_epoch".to_string(),
        format!("best_val_{metric}"),
    ];
    header.extend(names.iter().map(|m| format!("val_{m}")));
    header.extend(names.iter().map(|m| format!("test_{m}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.fusion.to_string(),
            r.log.epochs.len().to_string(),
            r.log.best_epoch.to_string(),
            r.log.best().val_metric.to_string(),
        ];
        for set in [&r.val, &r.test] {
            rec.extend(names.iter().map(|m| {
                set.as_ref()
                    .and_then(|e| e.get(m))
                    .map(|v| v.to_string())
                    .unwrap_or_default()
            }));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
