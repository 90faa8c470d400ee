//! From stay and event tables to per-task samples.
//!
//! The stages run in order: [`filter_stays`], [`match_events`],
//! [`assemble_episode`] per stay, then [`extract_samples`] per task;
//! [`prepare`] runs them all and assigns patient-level splits. Each
//! selection stage returns a [`StageReport`] whose kept and dropped counts
//! add up to its input.

pub mod dictionary;
pub mod episode;
pub mod prepared;
pub mod records;
pub mod samples;
pub mod select;
pub mod synth;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

pub use dictionary::{VariableDictionary, VariableKind, VariableSpec};
pub use episode::{
    assemble_all, assemble_episode, attach_phenotypes, read_episodes, write_episodes, Episode,
    EpisodeLabels, EpisodeManifest,
};
pub use prepared::{prepare, PrepareConfig, PreparedDataset, PreparedManifest, SampleRef};
pub use records::{
    format_timestamp, parse_timestamp, read_events, read_events_file, read_phenotypes, read_stays,
    read_stays_file, write_events, write_phenotypes, write_stays, EventRecord, PhenotypeRow,
    StayRecord, Timestamp,
};
pub use samples::{
    default_window, extract_samples, los_bucket, prediction_hours, split_subjects, window, Label,
    Sample, Split, LOS_BUCKET_EDGES_HOURS,
};
pub use select::{filter_stays, group_by_stay, match_events, StageReport};
pub use synth::{synth_cohort, synth_cohort_with, SynthCohort, SynthNoise, PHENOTYPE_NAMES};

use crate::error::Result;

pub const STAYS_FILE: &str = "stays.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const PHENOTYPES_FILE: &str = "phenotypes.csv";

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub episodes: Vec<Episode>,
    /// filter_stays, match_events and assemble_episode, in that order.
    pub reports: Vec<StageReport>,
}

/// Runs selection and assembly. Phenotype rows, when given, are attached by
/// stay id.
pub fn run_pipeline(
    stays: &[StayRecord],
    events: &[EventRecord],
    dict: &VariableDictionary,
    phenotypes: Option<&[(String, Vec<bool>)]>,
) -> Result<PipelineOutput> {
    let (stays, filter_report) = filter_stays(stays);
    let (events, match_report) = match_events(events, &stays);
    let grouped = group_by_stay(events);
    let (mut episodes, assemble_report) = assemble_all(&stays, &grouped, dict)?;
    if let Some(rows) = phenotypes {
        attach_phenotypes(&mut episodes, rows);
    }
    Ok(PipelineOutput {
        episodes,
        reports: vec![filter_report, match_report, assemble_report],
    })
}

/// Writes `stays.csv`, `events.csv` and `phenotypes.csv` into `dir`.
pub fn write_cohort(dir: impl AsRef<Path>, cohort: &SynthCohort) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let paths = [
        dir.join(STAYS_FILE),
        dir.join(EVENTS_FILE),
        dir.join(PHENOTYPES_FILE),
    ];
    write_stays(BufWriter::new(File::create(&paths[0])?), &cohort.stays)?;
    write_events(BufWriter::new(File::create(&paths[1])?), &cohort.events)?;
    write_phenotypes(
        BufWriter::new(File::create(&paths[2])?),
        &synth::phenotype_names(),
        &cohort.phenotypes,
    )?;
    Ok(paths.to_vec())
}

/// Stays, events and the optional phenotype table of one cohort.
pub type CohortTables = (Vec<StayRecord>, Vec<EventRecord>, Option<Vec<PhenotypeRow>>);

/// Reads the tables written by [`write_cohort`]. The phenotype table is optional.
pub fn read_cohort(dir: impl AsRef<Path>) -> Result<CohortTables> {
    let dir = dir.as_ref();
    let stays = read_stays_file(dir.join(STAYS_FILE))?;
    let events = read_events_file(dir.join(EVENTS_FILE))?;
    let pheno_path = dir.join(PHENOTYPES_FILE);
    let phenotypes = if pheno_path.exists() {
        Some(read_phenotypes(File::open(pheno_path)?)?)
    } else {
        None
    };
    Ok((stays, events, phenotypes))
}
