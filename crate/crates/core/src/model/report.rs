use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::network::Tscan;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const AGGREGATION: &str = "self-attention received per key position (column mean of each head's probability \
matrix), averaged uniformly over heads, query rows and samples; temporal weights per chunk from the temporal \
branch, indicator weights averaged over all spatial-branch blocks; each vector renormalised to sum to 1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub aggregation: String,
    pub samples: usize,
    pub chunks: usize,
    pub hours_per_chunk: usize,
}

/// Aggregated attention for explainability: how much each hour of each
/// chunk and each input column is attended to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    /// One vector of length `t / n` per chunk; empty without a temporal branch.
    pub temporal_weights: Vec<Vec<f64>>,
    /// Length-`d` vector; empty without a spatial branch.
    pub indicator_weights: Vec<f64>,
    pub indicator_names: Vec<String>,
    pub metadata: ReportMetadata,
}

fn normalise(v: &mut [f64]) {
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter_mut().for_each(|x| *x /= total);
    }
}

/// Runs inference on every sample and aggregates the self-attention maps.
/// `indicator_names` labels the `d` input columns; pass an empty slice to
/// use column indices.
pub fn attention_report<'a>(
    model: &Tscan,
    samples: impl IntoIterator<Item = &'a Tensor>,
    indicator_names: &[String],
) -> Result<AttentionReport> {
    let cfg = model.config();
    let (n, len, d) = (cfg.n, cfg.chunk_len(), cfg.d);
    let use_t = cfg.fusion.uses_temporal();
    let use_s = cfg.fusion.uses_spatial();
    let mut temporal = if use_t {
        vec![vec![0.0; len]; n]
    } else {
        Vec::new()
    };
    let mut indicators = if use_s { vec![0.0; d] } else { Vec::new() };
    let mut count = 0usize;
    for x in samples {
        let (_, t_maps, s_maps) = model.predict_with_attention(x)?;
        for (acc, w) in temporal.iter_mut().zip(&t_maps) {
            acc.iter_mut().zip(w.received()).for_each(|(a, r)| *a += r);
        }
        for w in &s_maps {
            indicators
                .iter_mut()
                .zip(w.received())
                .for_each(|(a, r)| *a += r);
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("attention report needs at least one sample"));
    }
    temporal.iter_mut().for_each(|v| normalise(v));
    normalise(&mut indicators);
    let names = if indicator_names.is_empty() {
        (0..d).map(|i| format!("col{i}")).collect()
    } else if indicator_names.len() == d {
        indicator_names.to_vec()
    } else {
        return Err(Error::invalid(format!(
            "{} indicator names for d = {d}",
            indicator_names.len()
        )));
    };
    Ok(AttentionReport {
        temporal_weights: temporal,
        indicator_weights: indicators,
        indicator_names: names,
        metadata: ReportMetadata {
            aggregation: AGGREGATION.to_string(),
            samples: count,
            chunks: n,
            hours_per_chunk: len,
        },
    })
}

impl AttentionReport {
    /// Writes `temporal_chunk_<j>.csv` (hour,weight) per chunk,
    /// `indicators.csv` (variable,weight) and `attention_report.json`.
    /// Returns the paths written.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (j, weights) in self.temporal_weights.iter().enumerate() {
            let path = dir.join(format!("temporal_chunk_{j}.csv"));
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["hour", "weight"])?;
            for (h, v) in weights.iter().enumerate() {
                w.write_record([h.to_string(), v.to_string()])?;
            }
            w.flush()?;
            written.push(path);
        }
        if !self.indicator_weights.is_empty() {
            let path = dir.join("indicators.csv");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["variable", "weight"])?;
            for (name, v) in self.indicator_names.iter().zip(&self.indicator_weights) {
                w.write_record([name.clone(), v.to_string()])?;
            }
            w.flush()?;
            written.push(path);
        }
        let path = dir.join("attention_report.json");
        let mut f = std::fs::File::create(&path)?;
        f.write_all(&serde_json::to_vec_pretty(self)?)?;
        written.push(path);
        Ok(written)
    }

    /// Indicator names and weights sorted by decreasing weight.
    pub fn top_indicators(&self, k: usize) -> Vec<(String, f64)> {
        let mut pairs: Vec<_> = self
            .indicator_names
            .iter()
            .cloned()
            .zip(self.indicator_weights.iter().copied())
            .collect();
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        pairs.truncate(k);
        pairs
    }
}
