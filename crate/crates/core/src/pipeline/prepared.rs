//! A task dataset on disk: episodes, a sample index with patient-level
//! splits, the dictionary and a manifest of per-stage counts.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dictionary::VariableDictionary;
use super::episode::{read_episodes, write_episodes, Episode};
use super::records::{EventRecord, StayRecord};
use super::run_pipeline;
use super::samples::{
    default_window, extract_samples, prediction_hours, split_subjects, window, Label, Sample, Split,
};
use super::select::StageReport;
use crate::error::{Error, Result};
use crate::model::Task;

pub const PREPARED_FORMAT: &str = "tscan-prepared-v1";
pub const PREPARED_MANIFEST: &str = "prepared.json";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const DICTIONARY_FILE: &str = "dictionary.json";
pub const EPISODES_DIR: &str = "episodes";

pub const DROP_NO_SAMPLES: &str = "no_samples";
pub const DROP_NO_PHENOTYPES: &str = "no_phenotypes";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareConfig {
    pub task: Task,
    /// Window length in hours.
    pub t: usize,
    /// Spacing of the length-of-stay and decompensation clocks.
    pub stride: usize,
    pub split_seed: u64,
}

impl PrepareConfig {
    /// Standard window and stride for `task`, split seed 0.
    pub fn new(task: Task) -> Self {
        let (t, stride) = default_window(task);
        PrepareConfig {
            task,
            t,
            stride,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedManifest {
    pub format: String,
    pub config: PrepareConfig,
    /// Feature width after one-hot encoding.
    pub d: usize,
    pub columns: Vec<String>,
    /// filter_stays, match_events, assemble_episode and extract_samples.
    pub stages: Vec<StageReport>,
    /// Samples per split (`train`, `val`, `test`) and in total.
    pub samples: BTreeMap<String, usize>,
}

/// Where one sample comes from; the window itself is cut on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRef {
    pub icustay_id: String,
    pub subject_id: String,
    pub split: Split,
    pub prediction_hour: usize,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDataset {
    pub manifest: PreparedManifest,
    pub dictionary: VariableDictionary,
    pub episodes: Vec<Episode>,
    pub index: Vec<SampleRef>,
}

/// Runs the whole pipeline for one task and assigns every sample the split
/// of its patient.
pub fn prepare(
    stays: &[StayRecord],
    events: &[EventRecord],
    phenotypes: Option<&[(String, Vec<bool>)]>,
    dict: &VariableDictionary,
    cfg: &PrepareConfig,
) -> Result<PreparedDataset> {
    if cfg.t == 0 || cfg.stride == 0 {
        return Err(Error::Config(format!(
            "t = {} and stride = {} must be positive",
            cfg.t, cfg.stride
        )));
    }
    let out = run_pipeline(stays, events, dict, phenotypes)?;
    let mut report = StageReport::new("extract_samples");
    report.input = out.episodes.len();
    let splits = split_subjects(
        out.episodes.iter().map(|e| e.subject_id.as_str()),
        cfg.split_seed,
    );
    let mut index = Vec::new();
    for ep in &out.episodes {
        if cfg.task == Task::Phenotype && ep.labels.phenotypes.is_none() {
            report.drop(DROP_NO_PHENOTYPES);
            continue;
        }
        if prediction_hours(ep, cfg.task, cfg.stride).is_empty() {
            report.drop(DROP_NO_SAMPLES);
            continue;
        }
        report.kept += 1;
        // Labels only; windows are cut again when samples are materialised.
        let samples = extract_samples(ep, cfg.task, 1, cfg.stride)?;
        report.note("samples", samples.len());
        let split = splits[&ep.subject_id];
        index.extend(samples.into_iter().map(|s| SampleRef {
            icustay_id: s.icustay_id,
            subject_id: s.subject_id,
            split,
            prediction_hour: s.prediction_hour,
            label: s.y,
        }));
    }
    let mut counts: BTreeMap<String, usize> = [Split::Train, Split::Val, Split::Test]
        .iter()
        .map(|s| (s.as_str().to_string(), 0))
        .collect();
    for r in &index {
        *counts
            .get_mut(r.split.as_str())
            .expect("all splits present") += 1;
    }
    counts.insert("total".into(), index.len());
    let mut stages = out.reports;
    stages.push(report);
    Ok(PreparedDataset {
        manifest: PreparedManifest {
            format: PREPARED_FORMAT.into(),
            config: cfg.clone(),
            d: dict.width(),
            columns: dict.column_names(),
            stages,
            samples: counts,
        },
        dictionary: dict.clone(),
        episodes: out.episodes,
        index,
    })
}

fn label_fields(label: &Label) -> (String, String) {
    match label {
        Label::Binary { positive } => ((*positive as u8).to_string(), String::new()),
        Label::Bucket {
            bucket,
            remaining_hours,
        } => (bucket.to_string(), remaining_hours.to_string()),
        Label::MultiLabel { labels } => (
            labels.iter().map(|&b| if b { '1' } else { '0' }).collect(),
            String::new(),
        ),
    }
}

fn parse_label(task: Task, label: &str, remaining: &str) -> std::result::Result<Label, String> {
    match task {
        Task::Ihm | Task::Decompensation => match label {
            "0" => Ok(Label::Binary { positive: false }),
            "1" => Ok(Label::Binary { positive: true }),
            other => Err(format!("binary label `{other}` is not 0 or 1")),
        },
        Task::Los => Ok(Label::Bucket {
            bucket: label
                .parse()
                .map_err(|_| format!("bucket `{label}` is not an integer"))?,
            remaining_hours: remaining
                .parse()
                .map_err(|_| format!("remaining hours `{remaining}` is not a number"))?,
        }),
        Task::Phenotype => label
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(format!("phenotype bit `{other}` is not 0 or 1")),
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(|labels| Label::MultiLabel { labels }),
    }
}

impl PreparedDataset {
    pub fn task(&self) -> Task {
        self.manifest.config.task
    }

    /// Writes `episodes/`, `samples.csv`, `dictionary.json` and
    /// `prepared.json` into `dir`. Returns the top-level paths written.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let episodes = write_episodes(
            dir.join(EPISODES_DIR),
            &self.episodes,
            &self.manifest.columns,
        )?;

        let samples = dir.join(SAMPLES_FILE);
        let mut w = csv::Writer::from_path(&samples)?;
        w.write_record([
            "icustay_id",
            "subject_id",
            "split",
            "prediction_hour",
            "label",
            "remaining_hours",
        ])?;
        for r in &self.index {
            let (label, remaining) = label_fields(&r.label);
            w.write_record([
                r.icustay_id.as_str(),
                &r.subject_id,
                r.split.as_str(),
                &r.prediction_hour.to_string(),
                &label,
                &remaining,
            ])?;
        }
        w.flush()?;

        let dictionary = dir.join(DICTIONARY_FILE);
        std::fs::write(&dictionary, self.dictionary.to_json()?)?;
        let manifest = dir.join(PREPARED_MANIFEST);
        std::fs::write(&manifest, serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(vec![episodes, samples, dictionary, manifest])
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: PreparedManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join(PREPARED_MANIFEST))?)?;
        if manifest.format != PREPARED_FORMAT {
            return Err(Error::invalid(format!(
                "unsupported dataset format `{}`",
                manifest.format
            )));
        }
        let dictionary = VariableDictionary::load(dir.join(DICTIONARY_FILE))?;
        if dictionary.column_names() != manifest.columns {
            return Err(Error::invalid(
                "dictionary columns disagree with the dataset manifest",
            ));
        }
        let (episodes, ep_manifest) = read_episodes(dir.join(EPISODES_DIR))?;
        if ep_manifest.columns != manifest.columns {
            return Err(Error::invalid(
                "episode columns disagree with the dataset manifest",
            ));
        }
        let task = manifest.config.task;
        let mut rdr = csv::Reader::from_path(dir.join(SAMPLES_FILE))?;
        let mut index = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = |message: String| Error::Row {
                row: i + 1,
                message,
            };
            if rec.len() != 6 {
                return Err(row(format!(
                    "{SAMPLES_FILE}: expected 6 fields, got {}",
                    rec.len()
                )));
            }
            index.push(SampleRef {
                icustay_id: rec[0].to_string(),
                subject_id: rec[1].to_string(),
                split: rec[2].parse().map_err(|e: Error| row(e.to_string()))?,
                prediction_hour: rec[3]
                    .parse()
                    .map_err(|_| row(format!("prediction hour `{}` is not an integer", &rec[3])))?,
                label: parse_label(task, &rec[4], &rec[5]).map_err(row)?,
            });
        }
        Ok(PreparedDataset {
            manifest,
            dictionary,
            episodes,
            index,
        })
    }

    /// Materialises the windows of one split, or of every sample when
    /// `split` is `None`, in index order.
    pub fn samples(&self, split: Option<Split>) -> Result<Vec<Sample>> {
        let by_id: HashMap<&str, &Episode> = self
            .episodes
            .iter()
            .map(|e| (e.icustay_id.as_str(), e))
            .collect();
        let t = self.manifest.config.t;
        self.index
            .iter()
            .filter(|r| split.is_none_or(|s| s == r.split))
            .map(|r| {
                let ep = by_id.get(r.icustay_id.as_str()).ok_or_else(|| {
                    Error::invalid(format!("sample refers to unknown stay {}", r.icustay_id))
                })?;
                Ok(Sample {
                    icustay_id: r.icustay_id.clone(),
                    subject_id: r.subject_id.clone(),
                    prediction_hour: r.prediction_hour,
                    x: window(ep, r.prediction_hour, t)?,
                    y: r.label.clone(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synth_cohort;

    #[test]
    fn write_load_round_trip() {
        let dict = VariableDictionary::builtin_24();
        let c = synth_cohort(5, 20, &dict).unwrap();
        for task in [Task::Ihm, Task::Los, Task::Phenotype] {
            let mut cfg = PrepareConfig::new(task);
            cfg.t = 24;
            let ds = prepare(&c.stays, &c.events, Some(&c.phenotypes), &dict, &cfg).unwrap();
            assert!(ds.manifest.stages.iter().all(|s| s.is_conserved()));
            assert_eq!(ds.manifest.samples["total"], ds.index.len());
            let dir = tempfile::tempdir().unwrap();
            ds.write(dir.path()).unwrap();
            let back = PreparedDataset::load(dir.path()).unwrap();
            assert_eq!(back, ds);
            let direct: Vec<Sample> = ds
                .episodes
                .iter()
                .flat_map(|e| extract_samples(e, task, 24, cfg.stride).unwrap())
                .collect();
            let mut all = back.samples(None).unwrap();
            all.sort_by(|a, b| {
                (&a.icustay_id, a.prediction_hour).cmp(&(&b.icustay_id, b.prediction_hour))
            });
            let mut direct = direct;
            direct.sort_by(|a, b| {
                (&a.icustay_id, a.prediction_hour).cmp(&(&b.icustay_id, b.prediction_hour))
            });
            assert_eq!(all, direct);
        }
    }

    #[test]
    fn phenotype_task_drops_unlabelled_stays() {
        let dict = VariableDictionary::builtin_24();
        let c = synth_cohort(5, 10, &dict).unwrap();
        let ds = prepare(
            &c.stays,
            &c.events,
            None,
            &dict,
            &PrepareConfig::new(Task::Phenotype),
        )
        .unwrap();
        assert!(ds.index.is_empty());
        assert_eq!(ds.manifest.stages[3].dropped[DROP_NO_PHENOTYPES], 10);
    }
}
