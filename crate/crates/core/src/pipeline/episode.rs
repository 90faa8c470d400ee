//! Hourly episode grids and their on-disk form.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dictionary::{VariableDictionary, VariableKind};
use super::records::{hours_between, EventRecord, StayRecord};
use super::select::StageReport;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DROP_OUT_OF_WINDOW: &str = "out_of_window";
pub const DROP_OUTLIER: &str = "outlier";
pub const DROP_SUPERSEDED: &str = "superseded";

/// Outcome information carried alongside the grid. Task labels are derived
/// from it at sample extraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLabels {
    pub mortality: bool,
    /// Hours from ICU admission to death.
    pub death_hours: Option<f64>,
    pub phenotypes: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub icustay_id: String,
    pub subject_id: String,
    /// `[hours, d]`: z-scored continuous columns and one-hot groups.
    pub matrix: Tensor,
    /// `[hours, d]`: 1 where the cell was observed in that hour.
    pub mask: Tensor,
    pub los_hours: f64,
    pub labels: EpisodeLabels,
}

impl Episode {
    pub fn hours(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.matrix.shape()[1]
    }
}

#[derive(Clone, Copy)]
enum Reading {
    Value(f64),
    Category(usize),
}

/// Builds the hourly grid for one stay.
///
/// Bin `h` covers `[intime + h, intime + h + 1)` hours and the grid has
/// `ceil(los)` rows (at least one). Out-of-range continuous values are
/// dropped before the latest reading per (hour, variable) is chosen; ties on
/// timestamp go to the later event in input order. Gaps are forward-filled,
/// then set to the variable's normal value.
pub fn assemble_episode(
    stay: &StayRecord,
    events: &[EventRecord],
    dict: &VariableDictionary,
) -> Result<(Episode, StageReport)> {
    let mut report = StageReport::new("assemble_episode");
    report.input = events.len();
    let los = stay.los_hours();
    let hours = (los.ceil() as usize).max(1);
    let d = dict.width();
    let mut latest: HashMap<(usize, usize), (chrono::DateTime<chrono::Utc>, usize, Reading)> =
        HashMap::new();

    for (idx, e) in events.iter().enumerate() {
        if let Some(id) = &e.icustay_id {
            if id != &stay.icustay_id {
                return Err(Error::invalid(format!(
                    "event {idx} belongs to stay {id}, not {}",
                    stay.icustay_id
                )));
            }
        }
        let (var, _) = dict
            .lookup(&e.variable)
            .ok_or_else(|| Error::UnknownVariable(e.variable.clone()))?;
        let reading = match &dict.variables()[var].kind {
            VariableKind::Continuous {
                plausible_range: [lo, hi],
                ..
            } => {
                let v: f64 = e.value.parse().map_err(|_| {
                    Error::invalid(format!(
                        "variable `{}`: `{}` is not a number",
                        e.variable, e.value
                    ))
                })?;
                if !v.is_finite() || v < *lo || v > *hi {
                    report.drop(DROP_OUTLIER);
                    continue;
                }
                Reading::Value(v)
            }
            VariableKind::Categorical { categories, .. } => {
                let k = categories
                    .iter()
                    .position(|c| c == &e.value)
                    .ok_or_else(|| Error::UnknownCategory {
                        variable: e.variable.clone(),
                        token: e.value.clone(),
                    })?;
                Reading::Category(k)
            }
        };
        let offset = hours_between(&stay.intime, &e.charttime);
        if offset < 0.0 || offset >= hours as f64 {
            report.drop(DROP_OUT_OF_WINDOW);
            continue;
        }
        let bin = offset.floor() as usize;
        match latest.get_mut(&(bin, var)) {
            Some(slot) => {
                report.drop(DROP_SUPERSEDED);
                if (e.charttime, idx) > (slot.0, slot.1) {
                    *slot = (e.charttime, idx, reading);
                }
            }
            None => {
                latest.insert((bin, var), (e.charttime, idx, reading));
            }
        }
    }
    report.kept = latest.len();

    let mut matrix = vec![0.0; hours * d];
    let mut mask = vec![0.0; hours * d];
    for (var, spec) in dict.variables().iter().enumerate() {
        let off = dict.offset(var);
        let mut last: Option<Reading> = None;
        for h in 0..hours {
            let observed = latest.get(&(h, var)).map(|s| s.2);
            if observed.is_some() {
                last = observed;
            }
            let row = h * d + off;
            match &spec.kind {
                VariableKind::Continuous {
                    mean,
                    std,
                    normal_value,
                    ..
                } => {
                    let v = match last {
                        Some(Reading::Value(v)) => v,
                        _ => *normal_value,
                    };
                    matrix[row] = (v - mean) / std;
                }
                VariableKind::Categorical {
                    categories,
                    normal_value,
                } => {
                    let k = match last {
                        Some(Reading::Category(k)) => k,
                        _ => categories
                            .iter()
                            .position(|c| c == normal_value)
                            .expect("validated"),
                    };
                    matrix[row + k] = 1.0;
                }
            }
            if observed.is_some() {
                mask[row..row + spec.width()]
                    .iter_mut()
                    .for_each(|m| *m = 1.0);
            }
        }
    }

    let episode = Episode {
        icustay_id: stay.icustay_id.clone(),
        subject_id: stay.subject_id.clone(),
        matrix: Tensor::new([hours, d], matrix)?,
        mask: Tensor::new([hours, d], mask)?,
        los_hours: los,
        labels: EpisodeLabels {
            mortality: stay.mortality_in_hospital,
            death_hours: stay
                .deathtime
                .as_ref()
                .map(|t| hours_between(&stay.intime, t)),
            phenotypes: None,
        },
    };
    Ok((episode, report))
}

/// Assembles every stay (in parallel with the `parallel` feature). Results
/// follow the order of `stays`; the report sums the per-stay reports.
pub fn assemble_all(
    stays: &[StayRecord],
    events_by_stay: &HashMap<String, Vec<EventRecord>>,
    dict: &VariableDictionary,
) -> Result<(Vec<Episode>, StageReport)> {
    let one = |s: &StayRecord| {
        let events = events_by_stay
            .get(&s.icustay_id)
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        assemble_episode(s, events, dict)
            .map_err(|e| Error::invalid(format!("stay {}: {e}", s.icustay_id)))
    };
    #[cfg(feature = "parallel")]
    let results: Vec<_> = {
        use rayon::prelude::*;
        stays.par_iter().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = stays.iter().map(one).collect();

    let mut total = StageReport::new("assemble_episode");
    let mut episodes = Vec::with_capacity(stays.len());
    for r in results {
        let (ep, rep) = r?;
        total.absorb(&rep);
        episodes.push(ep);
    }
    Ok((episodes, total))
}

/// Attaches phenotype labels by stay id. Stays without a row keep `None`.
pub fn attach_phenotypes(episodes: &mut [Episode], rows: &[(String, Vec<bool>)]) {
    let map: HashMap<&str, &Vec<bool>> = rows.iter().map(|(id, l)| (id.as_str(), l)).collect();
    for ep in episodes {
        ep.labels.phenotypes = map.get(ep.icustay_id.as_str()).map(|l| (*l).clone());
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub icustay_id: String,
    pub subject_id: String,
    pub file: String,
    pub hours: usize,
    pub los_hours: f64,
    #[serde(flatten)]
    pub labels: EpisodeLabels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub format: String,
    pub columns: Vec<String>,
    pub episodes: Vec<EpisodeEntry>,
}

pub const EPISODE_FORMAT: &str = "tscan-episodes-v1";
pub const EPISODE_MANIFEST: &str = "episodes.json";

fn file_name(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("episode_{safe}.csv")
}

/// Writes one CSV per episode (`hour`, the value columns, then `mask:`
/// columns) and `episodes.json`. Values use shortest round-trip formatting,
/// so reading back is exact.
pub fn write_episodes(
    dir: impl AsRef<Path>,
    episodes: &[Episode],
    columns: &[String],
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(episodes.len());
    for ep in episodes {
        if ep.width() != columns.len() {
            return Err(Error::invalid(format!(
                "episode {} has {} columns, expected {}",
                ep.icustay_id,
                ep.width(),
                columns.len()
            )));
        }
        let file = file_name(&ep.icustay_id);
        let mut w = csv::Writer::from_path(dir.join(&file))?;
        let mut header = vec!["hour".to_string()];
        header.extend(columns.iter().cloned());
        header.extend(columns.iter().map(|c| format!("mask:{c}")));
        w.write_record(&header)?;
        for h in 0..ep.hours() {
            let mut rec = vec![h.to_string()];
            rec.extend(ep.matrix.row(h).iter().map(|v| v.to_string()));
            rec.extend(ep.mask.row(h).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        entries.push(EpisodeEntry {
            icustay_id: ep.icustay_id.clone(),
            subject_id: ep.subject_id.clone(),
            file,
            hours: ep.hours(),
            los_hours: ep.los_hours,
            labels: ep.labels.clone(),
        });
    }
    let manifest = EpisodeManifest {
        format: EPISODE_FORMAT.into(),
        columns: columns.to_vec(),
        episodes: entries,
    };
    let path = dir.join(EPISODE_MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

pub fn read_episodes(dir: impl AsRef<Path>) -> Result<(Vec<Episode>, EpisodeManifest)> {
    let dir = dir.as_ref();
    let manifest: EpisodeManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join(EPISODE_MANIFEST))?)?;
    if manifest.format != EPISODE_FORMAT {
        return Err(Error::invalid(format!(
            "unsupported episode format `{}`",
            manifest.format
        )));
    }
    let d = manifest.columns.len();
    let mut episodes = Vec::with_capacity(manifest.episodes.len());
    for entry in &manifest.episodes {
        let mut rdr = csv::Reader::from_path(dir.join(&entry.file))?;
        let mut matrix = Vec::with_capacity(entry.hours * d);
        let mut mask = Vec::with_capacity(entry.hours * d);
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != 1 + 2 * d {
                return Err(Error::Row {
                    row: i + 1,
                    message: format!(
                        "{}: expected {} fields, got {}",
                        entry.file,
                        1 + 2 * d,
                        rec.len()
                    ),
                });
            }
            for (j, field) in rec.iter().skip(1).enumerate() {
                let v: f64 = field.parse().map_err(|_| Error::Row {
                    row: i + 1,
                    message: format!("{}: `{field}` is not a number", entry.file),
                })?;
                if j < d {
                    matrix.push(v);
                } else {
                    mask.push(v);
                }
            }
        }
        episodes.push(Episode {
            icustay_id: entry.icustay_id.clone(),
            subject_id: entry.subject_id.clone(),
            matrix: Tensor::new([entry.hours, d], matrix)?,
            mask: Tensor::new([entry.hours, d], mask)?,
            los_hours: entry.los_hours,
            labels: entry.labels.clone(),
        });
    }
    Ok((episodes, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::records::parse_timestamp;

    fn stay(hours: i64) -> StayRecord {
        let intime = parse_timestamp("2150-01-01T00:00:00Z").unwrap();
        StayRecord {
            subject_id: "1".into(),
            hadm_id: "10".into(),
            icustay_id: "100".into(),
            age_years: 50.0,
            intime,
            outtime: intime + chrono::Duration::hours(hours),
            transfers: 0,
            mortality_in_hospital: false,
            deathtime: None,
        }
    }

    fn ev(minutes: i64, variable: &str, value: &str) -> EventRecord {
        EventRecord {
            subject_id: "1".into(),
            hadm_id: Some("10".into()),
            icustay_id: Some("100".into()),
            charttime: parse_timestamp("2150-01-01T00:00:00Z").unwrap()
                + chrono::Duration::minutes(minutes),
            variable: variable.into(),
            value: value.into(),
        }
    }

    #[test]
    fn heart_rate_at_two_and_a_half_hours_lands_in_bin_two() {
        let dict = VariableDictionary::builtin_24();
        let (_, col) = dict.lookup("Heart Rate").unwrap();
        let (ep, rep) = assemble_episode(&stay(6), &[ev(150, "Heart Rate", "120")], &dict).unwrap();
        assert_eq!(ep.hours(), 6);
        let observed: Vec<usize> = (0..6).filter(|&h| ep.mask.get(&[h, col]) == 1.0).collect();
        assert_eq!(observed, [2]);
        let z = (120.0 - 86.0) / 17.0;
        assert_eq!(ep.matrix.get(&[2, col]), z);
        // forward fill after, normal value before
        assert_eq!(ep.matrix.get(&[5, col]), z);
        assert_eq!(ep.matrix.get(&[1, col]), 0.0);
        assert!(rep.is_conserved());
    }

    #[test]
    fn later_reading_in_same_hour_wins() {
        let dict = VariableDictionary::builtin_24();
        let (_, col) = dict.lookup("Temperature").unwrap();
        let events = [ev(70, "Temperature", "38.5"), ev(65, "Temperature", "37.0")];
        let (ep, rep) = assemble_episode(&stay(3), &events, &dict).unwrap();
        assert_eq!(ep.matrix.get(&[1, col]), (38.5 - 36.9) / 0.7);
        assert_eq!(rep.dropped[DROP_SUPERSEDED], 1);
        assert_eq!(rep.kept, 1);
    }

    #[test]
    fn categorical_is_one_hot_group() {
        let dict = VariableDictionary::builtin_24();
        let (_, off) = dict.lookup("Glascow coma scale eye opening").unwrap();
        let (ep, _) = assemble_episode(
            &stay(2),
            &[ev(0, "Glascow coma scale eye opening", "2")],
            &dict,
        )
        .unwrap();
        for h in 0..2 {
            let group: Vec<f64> = (0..4).map(|k| ep.matrix.get(&[h, off + k])).collect();
            assert_eq!(group, [0.0, 1.0, 0.0, 0.0]);
        }
        assert_eq!(ep.mask.get(&[0, off + 3]), 1.0);
        assert_eq!(ep.mask.get(&[1, off + 3]), 0.0);
    }

    #[test]
    fn outliers_window_and_errors() {
        let dict = VariableDictionary::builtin_24();
        let events = [
            ev(10, "Heart Rate", "900"),
            ev(-30, "Heart Rate", "80"),
            ev(400, "Heart Rate", "80"),
        ];
        let (ep, rep) = assemble_episode(&stay(3), &events, &dict).unwrap();
        assert_eq!(rep.dropped[DROP_OUTLIER], 1);
        assert_eq!(rep.dropped[DROP_OUT_OF_WINDOW], 2);
        assert_eq!(rep.kept, 0);
        assert!(ep.mask.data().iter().all(|&m| m == 0.0));
        assert!(matches!(
            assemble_episode(&stay(3), &[ev(0, "Lactate", "2")], &dict),
            Err(Error::UnknownVariable(_))
        ));
        assert!(matches!(
            assemble_episode(&stay(3), &[ev(0, "Capillary refill rate", "maybe")], &dict),
            Err(Error::UnknownCategory { .. })
        ));
    }

    #[test]
    fn persistence_is_exact() {
        let dict = VariableDictionary::builtin_24();
        let events = [
            ev(5, "Heart Rate", "101.3"),
            ev(100, "pH", "7.21"),
            ev(100, "Glascow coma scale total", "9"),
        ];
        let (mut ep, _) = assemble_episode(&stay(4), &events, &dict).unwrap();
        ep.labels.phenotypes = Some(vec![true, false]);
        let dir = tempfile::tempdir().unwrap();
        write_episodes(dir.path(), std::slice::from_ref(&ep), &dict.column_names()).unwrap();
        let (back, manifest) = read_episodes(dir.path()).unwrap();
        assert_eq!(back, vec![ep]);
        assert_eq!(manifest.columns.len(), 49);
    }
}
