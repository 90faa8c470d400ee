//! Cutting task samples out of episodes.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::episode::Episode;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Task, LOS_BUCKETS};

/// Lower edges, in hours, of the remaining-stay buckets: under one day,
/// one bucket per day up to eight days, eight to fourteen days, and over
/// fourteen days. Buckets are right-open.
pub const LOS_BUCKET_EDGES_HOURS: [f64; LOS_BUCKETS] = [
    0.0, 24.0, 48.0, 72.0, 96.0, 120.0, 144.0, 168.0, 192.0, 336.0,
];

pub fn los_bucket(remaining_hours: f64) -> Result<usize> {
    if remaining_hours.is_nan() || remaining_hours < 0.0 {
        return Err(Error::invalid(format!(
            "remaining stay {remaining_hours} h is negative or NaN"
        )));
    }
    Ok(LOS_BUCKET_EDGES_HOURS
        .iter()
        .rposition(|&e| remaining_hours >= e)
        .unwrap_or(0))
}

/// Hour of the single in-hospital mortality sample.
pub const IHM_HOUR: usize = 48;
/// First prediction hour of the length-of-stay and decompensation clocks.
pub const FIRST_HOUR: usize = 4;
/// Decompensation horizon in hours.
pub const DECOMP_HORIZON: f64 = 24.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Label {
    Binary { positive: bool },
    Bucket { bucket: usize, remaining_hours: f64 },
    MultiLabel { labels: Vec<bool> },
}

impl Label {
    /// Target distribution of width `n_classes`: `[1 - y, y]` for binary
    /// labels, one-hot for buckets, the bit vector for multi-label.
    pub fn target(&self, n_classes: usize) -> Result<Vec<f64>> {
        let v = match self {
            Label::Binary { positive } => {
                let y = *positive as u8 as f64;
                vec![1.0 - y, y]
            }
            Label::Bucket { bucket, .. } => {
                let mut v = vec![0.0; n_classes];
                *v.get_mut(*bucket).ok_or_else(|| {
                    Error::invalid(format!("bucket {bucket} outside {n_classes} classes"))
                })? = 1.0;
                v
            }
            Label::MultiLabel { labels } => labels.iter().map(|&b| b as u8 as f64).collect(),
        };
        if v.len() != n_classes {
            return Err(Error::invalid(format!(
                "label of width {} for {n_classes} outputs",
                v.len()
            )));
        }
        Ok(v)
    }

    pub fn as_binary(&self) -> Option<bool> {
        match self {
            Label::Binary { positive } => Some(*positive),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub icustay_id: String,
    pub subject_id: String,
    /// Hours since ICU admission; `x` covers the `t` hours before it.
    pub prediction_hour: usize,
    pub x: Tensor,
    pub y: Label,
}

/// Rows `[end - t, end)` of the episode grid; rows before admission are zero.
pub fn window(episode: &Episode, end: usize, t: usize) -> Result<Tensor> {
    let (hours, d) = (episode.hours(), episode.width());
    if t == 0 || end == 0 || end > hours {
        return Err(Error::invalid(format!(
            "window ending at hour {end} of a {hours}-hour episode with t = {t}"
        )));
    }
    let mut data = vec![0.0; t * d];
    let first = end.saturating_sub(t);
    let pad = t - (end - first);
    let src = &episode.matrix.data()[first * d..end * d];
    data[pad * d..].copy_from_slice(src);
    Tensor::new([t, d], data)
}

fn decomp_label(episode: &Episode, hour: usize) -> bool {
    episode
        .labels
        .death_hours
        .is_some_and(|death| death - hour as f64 <= DECOMP_HORIZON)
}

/// Prediction hours for a task, before windowing.
pub fn prediction_hours(episode: &Episode, task: Task, stride: usize) -> Vec<usize> {
    let los = episode.los_hours;
    match task {
        Task::Ihm => {
            if los >= IHM_HOUR as f64 {
                vec![IHM_HOUR]
            } else {
                Vec::new()
            }
        }
        Task::Los | Task::Decompensation => (FIRST_HOUR..)
            .step_by(stride.max(1))
            .take_while(|&h| (h as f64) < los)
            .collect(),
        Task::Phenotype => vec![episode.hours()],
    }
}

/// Cuts the samples of one task from an episode. `stride` sets the spacing
/// of the length-of-stay and decompensation clocks (12 and 1 in the
/// standard setup) and is ignored by the single-sample tasks.
pub fn extract_samples(
    episode: &Episode,
    task: Task,
    t: usize,
    stride: usize,
) -> Result<Vec<Sample>> {
    if t == 0 || stride == 0 {
        return Err(Error::invalid(format!(
            "t = {t} and stride = {stride} must be positive"
        )));
    }
    let mut out = Vec::new();
    for hour in prediction_hours(episode, task, stride) {
        let y = match task {
            Task::Ihm => Label::Binary {
                positive: episode.labels.mortality,
            },
            Task::Decompensation => Label::Binary {
                positive: decomp_label(episode, hour),
            },
            Task::Los => {
                let remaining = episode.los_hours - hour as f64;
                Label::Bucket {
                    bucket: los_bucket(remaining)?,
                    remaining_hours: remaining,
                }
            }
            Task::Phenotype => Label::MultiLabel {
                labels: episode.labels.phenotypes.clone().ok_or_else(|| {
                    Error::invalid(format!(
                        "stay {} has no phenotype labels",
                        episode.icustay_id
                    ))
                })?,
            },
        };
        out.push(Sample {
            icustay_id: episode.icustay_id.clone(),
            subject_id: episode.subject_id.clone(),
            prediction_hour: hour,
            x: window(episode, hour, t)?,
            y,
        });
    }
    Ok(out)
}

/// Standard window and stride per task.
pub fn default_window(task: Task) -> (usize, usize) {
    match task {
        Task::Ihm => (48, 1),
        Task::Los => (320, 12),
        Task::Decompensation => (320, 1),
        Task::Phenotype => (320, 1),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

pub const TEST_FRACTION: f64 = 0.15;
pub const VAL_FRACTION: f64 = 0.15;

/// Patient-level split: a seeded shuffle of the sorted unique subject ids,
/// 15% test, then 15% of the remainder for validation.
pub fn split_subjects<'a>(
    subject_ids: impl IntoIterator<Item = &'a str>,
    seed: u64,
) -> BTreeMap<String, Split> {
    let mut ids: Vec<&str> = subject_ids.into_iter().collect();
    ids.sort_unstable();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_test = (ids.len() as f64 * TEST_FRACTION).round() as usize;
    let n_val = ((ids.len() - n_test) as f64 * VAL_FRACTION).round() as usize;
    ids.iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < n_test {
                Split::Test
            } else if i < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            };
            (id.to_string(), split)
        })
        .collect()
}
