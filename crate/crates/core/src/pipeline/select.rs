//! Cohort selection: which stays and which events enter episode assembly.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::records::{EventRecord, StayRecord};

/// Bookkeeping for one pipeline stage. Every input item is either kept or
/// counted under exactly one drop reason; `notes` holds counts that are
/// neither, such as recovered identifiers.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub input: usize,
    pub kept: usize,
    pub dropped: BTreeMap<String, usize>,
    #[serde(default)]
    pub notes: BTreeMap<String, usize>,
}

impl StageReport {
    pub fn new(stage: &str) -> Self {
        StageReport {
            stage: stage.to_string(),
            ..Default::default()
        }
    }

    pub fn drop(&mut self, reason: &str) {
        *self.dropped.entry(reason.to_string()).or_default() += 1;
    }

    pub fn note(&mut self, key: &str, count: usize) {
        *self.notes.entry(key.to_string()).or_default() += count;
    }

    pub fn total_dropped(&self) -> usize {
        self.dropped.values().sum()
    }

    pub fn is_conserved(&self) -> bool {
        self.kept + self.total_dropped() == self.input
    }

    /// Adds another report of the same stage into this one.
    pub fn absorb(&mut self, other: &StageReport) {
        self.input += other.input;
        self.kept += other.kept;
        for (k, v) in &other.dropped {
            *self.dropped.entry(k.clone()).or_default() += v;
        }
        for (k, v) in &other.notes {
            *self.notes.entry(k.clone()).or_default() += v;
        }
    }
}

pub const DROP_MINOR: &str = "minor";
pub const DROP_MULTIPLE_STAYS: &str = "multiple_stays";
pub const DROP_TRANSFERS: &str = "transfers";
pub const DROP_NO_HADM: &str = "no_hadm";
pub const DROP_UNKNOWN_HADM: &str = "unknown_hadm";
pub const DROP_UNKNOWN_STAY: &str = "unknown_stay";

fn count_subjects<'a>(ids: impl Iterator<Item = &'a str>) -> usize {
    ids.collect::<HashSet<_>>().len()
}

/// Keeps adults (age over 18) with a single ICU stay and no transfers,
/// sorted by `(subject_id, intime)`. A stay failing several rules is counted
/// under the first of minor, multiple_stays, transfers. Subjects with more
/// than one stay in the input lose all of them.
pub fn filter_stays(stays: &[StayRecord]) -> (Vec<StayRecord>, StageReport) {
    let mut report = StageReport::new("filter_stays");
    report.input = stays.len();
    let mut per_subject: HashMap<&str, usize> = HashMap::new();
    for s in stays {
        *per_subject.entry(&s.subject_id).or_default() += 1;
    }
    let mut kept = Vec::new();
    for s in stays {
        if s.age_years <= 18.0 {
            report.drop(DROP_MINOR);
        } else if per_subject[s.subject_id.as_str()] > 1 {
            report.drop(DROP_MULTIPLE_STAYS);
        } else if s.transfers > 0 {
            report.drop(DROP_TRANSFERS);
        } else {
            kept.push(s.clone());
        }
    }
    kept.sort_by(|a, b| {
        a.subject_id
            .cmp(&b.subject_id)
            .then(a.intime.cmp(&b.intime))
            .then(a.icustay_id.cmp(&b.icustay_id))
    });
    report.kept = kept.len();
    report.note(
        "subjects_in",
        count_subjects(stays.iter().map(|s| s.subject_id.as_str())),
    );
    report.note(
        "subjects_kept",
        count_subjects(kept.iter().map(|s| s.subject_id.as_str())),
    );
    (kept, report)
}

/// Keeps events that can be attributed to a retained stay, filling in a
/// missing `icustay_id` when the admission has exactly one stay. Input
/// order is preserved.
pub fn match_events(
    events: &[EventRecord],
    stays: &[StayRecord],
) -> (Vec<EventRecord>, StageReport) {
    let mut report = StageReport::new("match_events");
    report.input = events.len();
    let mut by_hadm: HashMap<&str, Vec<&StayRecord>> = HashMap::new();
    let mut by_stay: HashMap<&str, &StayRecord> = HashMap::new();
    for s in stays {
        by_hadm.entry(&s.hadm_id).or_default().push(s);
        by_stay.insert(&s.icustay_id, s);
    }
    let mut kept = Vec::new();
    let mut recovered = 0;
    for e in events {
        let Some(hadm) = e.hadm_id.as_deref() else {
            report.drop(DROP_NO_HADM);
            continue;
        };
        let Some(candidates) = by_hadm.get(hadm) else {
            report.drop(DROP_UNKNOWN_HADM);
            continue;
        };
        let stay = match e.icustay_id.as_deref() {
            Some(id) => by_stay.get(id).copied().filter(|s| s.hadm_id == hadm),
            None if candidates.len() == 1 => {
                recovered += 1;
                Some(candidates[0])
            }
            None => None,
        };
        match stay {
            Some(s) => {
                let mut e = e.clone();
                e.icustay_id = Some(s.icustay_id.clone());
                kept.push(e);
            }
            None => report.drop(DROP_UNKNOWN_STAY),
        }
    }
    report.kept = kept.len();
    report.note("recovered_icustay_id", recovered);
    (kept, report)
}

/// Groups events by `icustay_id`, preserving input order within each stay.
pub fn group_by_stay(events: Vec<EventRecord>) -> HashMap<String, Vec<EventRecord>> {
    let mut groups: HashMap<String, Vec<EventRecord>> = HashMap::new();
    for e in events {
        let key = e.icustay_id.clone().unwrap_or_default();
        groups.entry(key).or_default().push(e);
    }
    groups
}
