//! Stay and event tables and their CSV form.

use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Timestamp = DateTime<Utc>;

/// `(icustay_id, labels)` of one row of the phenotype table.
pub type PhenotypeRow = (String, Vec<bool>);

/// Accepts RFC 3339 with any offset (converted to UTC) and naive
/// `YYYY-MM-DD[T ]HH:MM:SS` taken as UTC.
pub fn parse_timestamp(s: &str) -> std::result::Result<Timestamp, String> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    for fmt in [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
    ] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t.and_utc());
        }
    }
    Err(format!("malformed timestamp `{s}`"))
}

pub fn format_timestamp(t: &Timestamp) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

/// Hours from `from` to `to`, fractional.
pub fn hours_between(from: &Timestamp, to: &Timestamp) -> f64 {
    let d = *to - *from;
    d.num_milliseconds() as f64 / 3_600_000.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct StayRecord {
    pub subject_id: String,
    pub hadm_id: String,
    pub icustay_id: String,
    pub age_years: f64,
    pub intime: Timestamp,
    pub outtime: Timestamp,
    pub transfers: u32,
    pub mortality_in_hospital: bool,
    pub deathtime: Option<Timestamp>,
}

impl StayRecord {
    pub fn los_hours(&self) -> f64 {
        hours_between(&self.intime, &self.outtime)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.subject_id.is_empty() || self.hadm_id.is_empty() || self.icustay_id.is_empty() {
            return Err("identifiers must be non-empty".into());
        }
        if !self.age_years.is_finite() || self.age_years < 0.0 {
            return Err(format!(
                "age {} is not a nonnegative number",
                self.age_years
            ));
        }
        if self.outtime < self.intime {
            return Err("outtime precedes intime".into());
        }
        if self.mortality_in_hospital != self.deathtime.is_some() {
            return Err("deathtime must be present exactly when mortality is set".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventRecord {
    pub subject_id: String,
    pub hadm_id: Option<String>,
    pub icustay_id: Option<String>,
    pub charttime: Timestamp,
    pub variable: String,
    /// Numeric value or category token, as recorded.
    pub value: String,
}

#[derive(Serialize, Deserialize)]
struct StayRow {
    subject_id: String,
    hadm_id: String,
    icustay_id: String,
    age: f64,
    intime: String,
    outtime: String,
    transfers: u32,
    mortality: u8,
    deathtime: String,
}

#[derive(Serialize, Deserialize)]
struct EventRow {
    subject_id: String,
    hadm_id: String,
    icustay_id: String,
    charttime: String,
    variable: String,
    value: String,
}

fn opt(s: String) -> Option<String> {
    let t = s.trim();
    (!t.is_empty()).then(|| t.to_string())
}

fn row_err(row: usize, message: impl Into<String>) -> Error {
    Error::Row {
        row,
        message: message.into(),
    }
}

impl TryFrom<StayRow> for StayRecord {
    type Error = String;

    fn try_from(r: StayRow) -> std::result::Result<Self, String> {
        let mortality = match r.mortality {
            0 => false,
            1 => true,
            m => return Err(format!("mortality must be 0 or 1, got {m}")),
        };
        let stay = StayRecord {
            subject_id: r.subject_id.trim().to_string(),
            hadm_id: r.hadm_id.trim().to_string(),
            icustay_id: r.icustay_id.trim().to_string(),
            age_years: r.age,
            intime: parse_timestamp(&r.intime)?,
            outtime: parse_timestamp(&r.outtime)?,
            transfers: r.transfers,
            mortality_in_hospital: mortality,
            deathtime: opt(r.deathtime).map(|s| parse_timestamp(&s)).transpose()?,
        };
        stay.validate()?;
        Ok(stay)
    }
}

/// Reads `stays.csv`. Errors name the 1-based data row.
pub fn read_stays<R: Read>(reader: R) -> Result<Vec<StayRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<StayRow>().enumerate() {
        let row = row.map_err(|e| row_err(i + 1, e.to_string()))?;
        out.push(StayRecord::try_from(row).map_err(|e| row_err(i + 1, e))?);
    }
    Ok(out)
}

pub fn write_stays<W: Write>(writer: W, stays: &[StayRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for s in stays {
        w.serialize(StayRow {
            subject_id: s.subject_id.clone(),
            hadm_id: s.hadm_id.clone(),
            icustay_id: s.icustay_id.clone(),
            age: s.age_years,
            intime: format_timestamp(&s.intime),
            outtime: format_timestamp(&s.outtime),
            transfers: s.transfers,
            mortality: s.mortality_in_hospital as u8,
            deathtime: s
                .deathtime
                .as_ref()
                .map(format_timestamp)
                .unwrap_or_default(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `events.csv`; empty `hadm_id` / `icustay_id` cells become `None`.
pub fn read_events<R: Read>(reader: R) -> Result<Vec<EventRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<EventRow>().enumerate() {
        let r = row.map_err(|e| row_err(i + 1, e.to_string()))?;
        let charttime = parse_timestamp(&r.charttime).map_err(|e| row_err(i + 1, e))?;
        if r.variable.trim().is_empty() {
            return Err(row_err(i + 1, "empty variable name"));
        }
        out.push(EventRecord {
            subject_id: r.subject_id.trim().to_string(),
            hadm_id: opt(r.hadm_id),
            icustay_id: opt(r.icustay_id),
            charttime,
            variable: r.variable.trim().to_string(),
            value: r.value.trim().to_string(),
        });
    }
    Ok(out)
}

pub fn write_events<W: Write>(writer: W, events: &[EventRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for e in events {
        w.serialize(EventRow {
            subject_id: e.subject_id.clone(),
            hadm_id: e.hadm_id.clone().unwrap_or_default(),
            icustay_id: e.icustay_id.clone().unwrap_or_default(),
            charttime: format_timestamp(&e.charttime),
            variable: e.variable.clone(),
            value: e.value.clone(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_stays_file(path: impl AsRef<Path>) -> Result<Vec<StayRecord>> {
    read_stays(std::fs::File::open(path)?)
}

pub fn read_events_file(path: impl AsRef<Path>) -> Result<Vec<EventRecord>> {
    read_events(std::fs::File::open(path)?)
}

/// Phenotype labels per stay: `icustay_id` followed by one 0/1 column per label.
pub fn read_phenotypes<R: Read>(reader: R) -> Result<Vec<PhenotypeRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let width = rdr.headers()?.len();
    if width < 2 {
        return Err(Error::invalid(
            "phenotype table needs icustay_id and at least one label column",
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| row_err(i + 1, e.to_string()))?;
        let labels = rec
            .iter()
            .skip(1)
            .map(|c| match c.trim() {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(row_err(
                    i + 1,
                    format!("label must be 0 or 1, got `{other}`"),
                )),
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((rec[0].trim().to_string(), labels));
    }
    Ok(out)
}

pub fn write_phenotypes<W: Write>(
    writer: W,
    names: &[String],
    rows: &[(String, Vec<bool>)],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["icustay_id".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (id, labels) in rows {
        if labels.len() != names.len() {
            return Err(Error::invalid(format!(
                "stay {id}: {} labels for {} columns",
                labels.len(),
                names.len()
            )));
        }
        let mut rec = vec![id.clone()];
        rec.extend(
            labels
                .iter()
                .map(|&l| if l { "1" } else { "0" }.to_string()),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const STAYS: &str =
        "subject_id,hadm_id,icustay_id,age,intime,outtime,transfers,mortality,deathtime
1,10,100,65,2150-01-01T00:00:00Z,2150-01-03T12:00:00Z,0,1,2150-01-03T12:00:00Z
2,20,200,40.5,2150-02-01 08:30:00,2150-02-02 08:30:00,0,0,
";

    #[test]
    fn stays_round_trip() {
        let stays = read_stays(STAYS.as_bytes()).unwrap();
        assert_eq!(stays.len(), 2);
        assert_eq!(stays[0].los_hours(), 60.0);
        assert!(stays[0].mortality_in_hospital && stays[1].deathtime.is_none());
        let mut buf = Vec::new();
        write_stays(&mut buf, &stays).unwrap();
        assert_eq!(read_stays(buf.as_slice()).unwrap(), stays);
    }

    #[test]
    fn malformed_timestamp_reports_row() {
        let bad = STAYS.replace("2150-02-01 08:30:00", "yesterday");
        match read_stays(bad.as_bytes()) {
            Err(Error::Row { row, message }) => {
                assert_eq!(row, 2);
                assert!(message.contains("yesterday"), "{message}");
            }
            other => panic!("expected row error, got {other:?}"),
        }
    }

    #[test]
    fn deathtime_must_match_flag() {
        let bad = STAYS.replace(",1,2150-01-03T12:00:00Z", ",1,");
        assert!(matches!(
            read_stays(bad.as_bytes()),
            Err(Error::Row { row: 1, .. })
        ));
    }

    #[test]
    fn offsets_convert_to_utc() {
        let t = parse_timestamp("2150-01-01T02:00:00+02:00").unwrap();
        assert_eq!(format_timestamp(&t), "2150-01-01T00:00:00Z");
    }

    #[test]
    fn events_with_missing_ids() {
        let text = "subject_id,hadm_id,icustay_id,charttime,variable,value\n1,,,2150-01-01T00:00:00Z,Heart Rate,80\n";
        let ev = read_events(text.as_bytes()).unwrap();
        assert_eq!(ev[0].hadm_id, None);
        let mut buf = Vec::new();
        write_events(&mut buf, &ev).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), text);
    }
}
