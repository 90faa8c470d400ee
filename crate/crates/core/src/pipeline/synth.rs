//! Seeded synthetic ICU cohort with a planted severity signal.
//!
//! Each patient draws a latent severity `s ~ N(0, 1)`. In-hospital death
//! happens when `s + 0.1 ε > 0.9`, so roughly one patient in five dies, and
//! length of stay grows with `s`. Severity shifts the vitals and labs named
//! in [`EFFECTS`] by `effect · std · (0.7 s + 0.6 max(s, 0) · min(h / 48, 1.5))`
//! at hour `h`: deteriorating patients drift further from normal over time.
//! Glasgow coma scores fall and capillary refill becomes abnormal with the
//! same shift. Four phenotypes (renal failure, respiratory failure,
//! septicemia, shock) are more likely with high severity; the rest are
//! independent of it.

use std::collections::HashMap;

use chrono::{Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dictionary::{VariableDictionary, VariableKind};
use super::records::{EventRecord, StayRecord};
use crate::error::{Error, Result};

pub const PHENOTYPE_NAMES: [&str; 25] = [
    "Acute and unspecified renal failure",
    "Acute cerebrovascular disease",
    "Acute myocardial infarction",
    "Cardiac dysrhythmias",
    "Chronic kidney disease",
    "Chronic obstructive pulmonary disease",
    "Complications of surgical/medical care",
    "Conduction disorders",
    "Congestive heart failure; nonhypertensive",
    "Coronary atherosclerosis and related",
    "Diabetes mellitus with complications",
    "Diabetes mellitus without complication",
    "Disorders of lipid metabolism",
    "Essential hypertension",
    "Fluid and electrolyte disorders",
    "Gastrointestinal hemorrhage",
    "Hypertension with complications",
    "Other liver diseases",
    "Other lower respiratory disease",
    "Other upper respiratory disease",
    "Pleurisy; pneumothorax; pulmonary collapse",
    "Pneumonia",
    "Respiratory failure; insufficiency; arrest",
    "Septicemia (except in labor)",
    "Shock",
];

/// Phenotype columns whose prevalence rises with severity.
pub const SEVERITY_PHENOTYPES: [usize; 4] = [0, 22, 23, 24];

/// Severity effect per variable, in standard deviations; the sign is the
/// direction of deterioration.
pub const EFFECTS: [(&str, f64); 15] = [
    ("Heart Rate", 0.8),
    ("Systolic blood pressure", -0.8),
    ("Diastolic blood pressure", -0.6),
    ("Mean blood pressure", -0.8),
    ("Respiratory rate", 0.7),
    ("Oxygen saturation", -0.7),
    ("Temperature", 0.5),
    ("pH", -0.7),
    ("Anion gap", 0.8),
    ("Glucose", 0.4),
    ("Fraction inspired oxygen", 0.6),
    ("Hemoglobin", -0.3),
    ("Albumin", -0.4),
    ("Prothrombin time", 0.3),
    ("Troponin-T", 0.3),
];

pub const DEATH_THRESHOLD: f64 = 0.9;

/// Optional corruption used to exercise the selection stages. All rates
/// default to zero, which yields a cohort that passes every filter intact.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthNoise {
    pub minor_rate: f64,
    pub second_stay_rate: f64,
    pub transfer_rate: f64,
    pub missing_hadm_rate: f64,
    pub missing_icustay_rate: f64,
}

#[derive(Clone, Debug)]
pub struct SynthCohort {
    pub stays: Vec<StayRecord>,
    pub events: Vec<EventRecord>,
    /// `(icustay_id, labels)` in [`PHENOTYPE_NAMES`] order.
    pub phenotypes: Vec<(String, Vec<bool>)>,
    /// Latent severity per stay, aligned with `stays`.
    pub severity: Vec<f64>,
}

/// How often a variable is charted: every `every` hours with probability `p`.
fn schedule(name: &str) -> (usize, f64) {
    match name {
        "Heart Rate"
        | "Systolic blood pressure"
        | "Diastolic blood pressure"
        | "Mean blood pressure"
        | "Respiratory rate"
        | "Oxygen saturation" => (1, 0.7),
        "Temperature" => (2, 0.7),
        n if n.starts_with("Glascow coma scale") => (4, 0.8),
        "Capillary refill rate" | "Fraction inspired oxygen" => (4, 0.5),
        "Height" | "Weight" => (usize::MAX, 0.9),
        "Albumin" | "Anion gap" | "Cholesterol" | "Glucose" | "Hemoglobin" | "Magnesium"
        | "Prothrombin time" | "Troponin-T" | "pH" => (8, 0.7),
        _ => (6, 0.5),
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Severity shift at hour `h`, in standard deviations per unit effect.
pub fn severity_shift(s: f64, h: f64) -> f64 {
    0.7 * s + 0.6 * s.max(0.0) * (h / 48.0).min(1.5)
}

fn gcs_tokens(impairment: f64) -> (usize, usize, usize) {
    let a = impairment.clamp(0.0, 1.0);
    let eye = 4 - (a * 3.0).round() as usize;
    let motor = 6 - (a * 5.0).round() as usize;
    let verbal = 5 - (a * 4.0).round() as usize;
    (eye, motor, verbal)
}

pub fn synth_cohort(
    seed: u64,
    n_patients: usize,
    dict: &VariableDictionary,
) -> Result<SynthCohort> {
    synth_cohort_with(seed, n_patients, dict, &SynthNoise::default())
}

pub fn synth_cohort_with(
    seed: u64,
    n_patients: usize,
    dict: &VariableDictionary,
    noise: &SynthNoise,
) -> Result<SynthCohort> {
    if n_patients == 0 {
        return Err(Error::invalid("n_patients must be at least 1"));
    }
    let effects: HashMap<&str, f64> = EFFECTS.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let epoch = Utc.with_ymd_and_hms(2150, 1, 1, 0, 0, 0).unwrap();
    let mut cohort = SynthCohort {
        stays: Vec::new(),
        events: Vec::new(),
        phenotypes: Vec::new(),
        severity: Vec::new(),
    };

    for p in 0..n_patients {
        let n_stays = if rng.random_bool(noise.second_stay_rate.clamp(0.0, 1.0)) {
            2
        } else {
            1
        };
        let subject_id = format!("{}", 10_000 + p);
        let mut intime = epoch
            + Duration::days(rng.random_range(0..3650))
            + Duration::minutes(rng.random_range(0..24 * 60));
        for k in 0..n_stays {
            let s: f64 = normal(&mut rng);
            let dies = s + 0.1 * normal(&mut rng) > DEATH_THRESHOLD;
            let los_hours = (20.0 + (3.9 + 0.3 * s + 0.5 * normal(&mut rng)).exp()).min(1000.0);
            let outtime = intime + Duration::minutes((los_hours * 60.0).round() as i64);
            let deathtime = dies.then(|| {
                if rng.random_bool(0.6) {
                    outtime
                } else {
                    outtime + Duration::minutes(rng.random_range(60..72 * 60))
                }
            });
            let age = if rng.random_bool(noise.minor_rate.clamp(0.0, 1.0)) {
                rng.random_range(1..=18) as f64
            } else {
                rng.random_range(19..=90) as f64
            };
            let transfers = rng.random_bool(noise.transfer_rate.clamp(0.0, 1.0)) as u32;
            let stay = StayRecord {
                subject_id: subject_id.clone(),
                hadm_id: format!("{}", 20_000 + 2 * p + k),
                icustay_id: format!("{}", 30_000 + 2 * p + k),
                age_years: age,
                intime,
                outtime,
                transfers,
                mortality_in_hospital: dies,
                deathtime,
            };

            let offsets: Vec<f64> = dict
                .variables()
                .iter()
                .map(|_| 0.4 * normal(&mut rng))
                .collect();
            let hours = ((outtime - intime).num_minutes() as f64 / 60.0).ceil() as usize;
            for h in 0..hours {
                let shift = severity_shift(s, h as f64);
                let mut gcs: Option<(usize, usize, usize)> = None;
                for (v, spec) in dict.variables().iter().enumerate() {
                    let (every, prob) = schedule(&spec.name);
                    let due = if every == usize::MAX {
                        h == 0
                    } else {
                        h % every == 0
                    };
                    if !due || !rng.random_bool(prob) {
                        continue;
                    }
                    let minute = rng.random_range(0..60);
                    let charttime = intime + Duration::minutes((h * 60 + minute) as i64);
                    if charttime >= outtime {
                        continue;
                    }
                    let value = match &spec.kind {
                        VariableKind::Continuous {
                            mean,
                            std,
                            plausible_range: [lo, hi],
                            ..
                        } => {
                            let e = effects.get(spec.name.as_str()).copied().unwrap_or(0.0);
                            let z = e * shift + offsets[v] + 0.5 * normal(&mut rng);
                            let x = (mean + std * z).clamp(*lo, *hi);
                            format!("{:.3}", (x * 1000.0).round() / 1000.0)
                        }
                        VariableKind::Categorical {
                            categories,
                            normal_value,
                        } => {
                            let impairment = 0.45 * shift + 0.25 * normal(&mut rng);
                            let triple = *gcs.get_or_insert_with(|| gcs_tokens(impairment));
                            match spec.name.as_str() {
                                "Glascow coma scale eye opening" => triple.0.to_string(),
                                "Glascow coma scale motor response" => triple.1.to_string(),
                                "Glascow coma scale verbal response" => triple.2.to_string(),
                                "Glascow coma scale total" => {
                                    (triple.0 + triple.1 + triple.2).to_string()
                                }
                                "Capillary refill rate" => {
                                    if rng.random_bool(sigmoid(2.0 * shift - 2.0)) {
                                        "1"
                                    } else {
                                        "0"
                                    }
                                    .to_string()
                                }
                                _ => {
                                    if rng.random_bool(0.8) {
                                        normal_value.clone()
                                    } else {
                                        categories[rng.random_range(0..categories.len())].clone()
                                    }
                                }
                            }
                        }
                    };
                    let hadm_id = (!rng.random_bool(noise.missing_hadm_rate.clamp(0.0, 1.0)))
                        .then(|| stay.hadm_id.clone());
                    let icustay_id = (!rng.random_bool(noise.missing_icustay_rate.clamp(0.0, 1.0)))
                        .then(|| stay.icustay_id.clone());
                    cohort.events.push(EventRecord {
                        subject_id: subject_id.clone(),
                        hadm_id,
                        icustay_id,
                        charttime,
                        variable: spec.name.clone(),
                        value,
                    });
                }
            }

            let labels = (0..PHENOTYPE_NAMES.len())
                .map(|j| {
                    let logit = if SEVERITY_PHENOTYPES.contains(&j) {
                        -1.2 + 1.5 * s
                    } else {
                        -1.4
                    };
                    rng.random_bool(sigmoid(logit))
                })
                .collect();
            cohort.phenotypes.push((stay.icustay_id.clone(), labels));
            cohort.severity.push(s);
            intime = outtime + Duration::days(rng.random_range(30..400));
            cohort.stays.push(stay);
        }
    }
    Ok(cohort)
}

pub fn phenotype_names() -> Vec<String> {
    PHENOTYPE_NAMES.iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gcs_total_is_consistent() {
        for a in [0.0, 0.3, 0.5, 1.0] {
            let (e, m, v) = gcs_tokens(a);
            assert!((1..=4).contains(&e) && (1..=6).contains(&m) && (1..=5).contains(&v));
            assert!((3..=15).contains(&(e + m + v)));
        }
        assert_eq!(gcs_tokens(0.0), (4, 6, 5));
        assert_eq!(gcs_tokens(2.0), (1, 1, 1));
    }

    #[test]
    fn zero_patients_rejected() {
        assert!(synth_cohort(1, 0, &VariableDictionary::builtin_24()).is_err());
    }

    #[test]
    fn noise_produces_each_exclusion() {
        let noise = SynthNoise {
            minor_rate: 0.2,
            second_stay_rate: 0.2,
            transfer_rate: 0.2,
            missing_hadm_rate: 0.05,
            missing_icustay_rate: 0.05,
        };
        let c = synth_cohort_with(5, 40, &VariableDictionary::builtin_24(), &noise).unwrap();
        assert!(c.stays.len() > 40);
        assert!(c.stays.iter().any(|s| s.age_years <= 18.0));
        assert!(c.stays.iter().any(|s| s.transfers > 0));
        assert!(c.events.iter().any(|e| e.hadm_id.is_none()));
        assert!(c.events.iter().any(|e| e.icustay_id.is_none()));
    }
}
