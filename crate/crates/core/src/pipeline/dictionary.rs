use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum VariableKind {
    Continuous {
        mean: f64,
        std: f64,
        normal_value: f64,
        plausible_range: [f64; 2],
    },
    Categorical {
        categories: Vec<String>,
        normal_value: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: VariableKind,
}

impl VariableSpec {
    pub fn continuous(name: &str, mean: f64, std: f64, normal_value: f64, range: [f64; 2]) -> Self {
        VariableSpec {
            name: name.to_string(),
            kind: VariableKind::Continuous {
                mean,
                std,
                normal_value,
                plausible_range: range,
            },
        }
    }

    pub fn categorical(name: &str, categories: &[&str], normal_value: &str) -> Self {
        VariableSpec {
            name: name.to_string(),
            kind: VariableKind::Categorical {
                categories: categories.iter().map(|c| c.to_string()).collect(),
                normal_value: normal_value.to_string(),
            },
        }
    }

    /// Number of encoded columns.
    pub fn width(&self) -> usize {
        match &self.kind {
            VariableKind::Continuous { .. } => 1,
            VariableKind::Categorical { categories, .. } => categories.len(),
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, VariableKind::Categorical { .. })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DictionaryFile {
    variables: Vec<VariableSpec>,
}

/// Ordered set of clinical variables and their encoding. Continuous
/// variables take one column each; categorical ones a one-hot group.
#[derive(Clone, Debug, PartialEq)]
pub struct VariableDictionary {
    variables: Vec<VariableSpec>,
    offsets: Vec<usize>,
    index: HashMap<String, usize>,
    width: usize,
}

impl VariableDictionary {
    pub fn new(variables: Vec<VariableSpec>) -> Result<Self> {
        if variables.is_empty() {
            return Err(Error::Config("dictionary has no variables".into()));
        }
        let mut seen = HashSet::new();
        for v in &variables {
            if !seen.insert(v.name.as_str()) {
                return Err(Error::Config(format!("duplicate variable `{}`", v.name)));
            }
            match &v.kind {
                VariableKind::Continuous {
                    std,
                    mean,
                    normal_value,
                    plausible_range: [lo, hi],
                } => {
                    if !(std.is_finite() && *std > 0.0)
                        || !mean.is_finite()
                        || !normal_value.is_finite()
                    {
                        return Err(Error::Config(format!(
                            "`{}`: mean and normal value must be finite, std positive",
                            v.name
                        )));
                    }
                    if lo.is_nan() || hi.is_nan() || lo > hi {
                        return Err(Error::Config(format!(
                            "`{}`: empty plausible range [{lo}, {hi}]",
                            v.name
                        )));
                    }
                }
                VariableKind::Categorical {
                    categories,
                    normal_value,
                } => {
                    let unique: HashSet<_> = categories.iter().collect();
                    if categories.is_empty() || unique.len() != categories.len() {
                        return Err(Error::Config(format!(
                            "`{}`: categories must be non-empty and unique",
                            v.name
                        )));
                    }
                    if !categories.contains(normal_value) {
                        return Err(Error::Config(format!(
                            "`{}`: normal value `{normal_value}` is not a category",
                            v.name
                        )));
                    }
                }
            }
        }
        let mut offsets = Vec::with_capacity(variables.len());
        let mut width = 0;
        for v in &variables {
            offsets.push(width);
            width += v.width();
        }
        let index = variables
            .iter()
            .enumerate()
            .map(|(i, v)| (v.name.clone(), i))
            .collect();
        Ok(VariableDictionary {
            variables,
            offsets,
            index,
            width,
        })
    }

    /// Loads `{"variables": [...]}` JSON.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: DictionaryFile = serde_json::from_str(text)?;
        Self::new(file.variables)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&DictionaryFile {
            variables: self.variables.clone(),
        })?)
    }

    /// One-hot width `d`.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    pub fn variables(&self) -> &[VariableSpec] {
        &self.variables
    }

    /// Position of a variable and the first column of its encoding.
    pub fn lookup(&self, name: &str) -> Option<(usize, usize)> {
        self.index.get(name).map(|&i| (i, self.offsets[i]))
    }

    pub fn offset(&self, var: usize) -> usize {
        self.offsets[var]
    }

    /// Column labels, with categorical groups expanded as `name=category`.
    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.width);
        for v in &self.variables {
            match &v.kind {
                VariableKind::Continuous { .. } => names.push(v.name.clone()),
                VariableKind::Categorical { categories, .. } => {
                    names.extend(categories.iter().map(|c| format!("{}={c}", v.name)))
                }
            }
        }
        names
    }

    /// The 24 variables of the reference feature set: 19 continuous and
    /// 5 categorical, 49 columns once encoded. Statistics are typical adult
    /// ICU values.
    pub fn builtin_24() -> Self {
        let gcs = |n: usize| (1..=n).map(|i| i.to_string()).collect::<Vec<_>>();
        let cat = |name: &str, cats: Vec<String>, normal: &str| VariableSpec {
            name: name.into(),
            kind: VariableKind::Categorical {
                categories: cats,
                normal_value: normal.into(),
            },
        };
        let c = VariableSpec::continuous;
        let vars = vec![
            c("Albumin", 3.0, 0.6, 3.5, [0.5, 7.0]),
            c("Anion gap", 13.0, 4.0, 12.0, [1.0, 50.0]),
            VariableSpec::categorical("Capillary refill rate", &["0", "1"], "0"),
            c("Cholesterol", 160.0, 45.0, 180.0, [40.0, 600.0]),
            c("Diastolic blood pressure", 62.0, 14.0, 59.0, [5.0, 200.0]),
            c("Fraction inspired oxygen", 0.5, 0.15, 0.21, [0.21, 1.0]),
            cat("Glascow coma scale eye opening", gcs(4), "4"),
            cat("Glascow coma scale motor response", gcs(6), "6"),
            cat(
                "Glascow coma scale total",
                (3..=15).map(|i| i.to_string()).collect(),
                "15",
            ),
            cat("Glascow coma scale verbal response", gcs(5), "5"),
            c("Glucose", 135.0, 45.0, 128.0, [10.0, 1500.0]),
            c("Heart Rate", 86.0, 17.0, 86.0, [10.0, 300.0]),
            c("Height", 169.0, 11.0, 170.0, [100.0, 230.0]),
            c("Hemoglobin", 10.5, 2.0, 12.0, [2.0, 25.0]),
            c("Magnesium", 2.0, 0.35, 2.0, [0.3, 10.0]),
            c("Mean blood pressure", 78.0, 14.0, 77.0, [10.0, 250.0]),
            c("Oxygen saturation", 97.0, 3.0, 98.0, [40.0, 100.0]),
            c("Prothrombin time", 14.5, 4.0, 13.0, [5.0, 150.0]),
            c("Respiratory rate", 19.0, 5.5, 19.0, [1.0, 80.0]),
            c("Systolic blood pressure", 120.0, 21.0, 118.0, [20.0, 300.0]),
            c("Temperature", 36.9, 0.7, 36.6, [25.0, 45.0]),
            c("Troponin-T", 0.3, 1.0, 0.01, [0.0, 50.0]),
            c("Weight", 81.0, 23.0, 81.0, [20.0, 350.0]),
            c("pH", 7.38, 0.07, 7.4, [6.5, 8.0]),
        ];
        Self::new(vars).expect("built-in dictionary is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_has_49_columns() {
        let d = VariableDictionary::builtin_24();
        assert_eq!(d.len(), 24);
        assert_eq!(
            d.variables().iter().filter(|v| v.is_categorical()).count(),
            5
        );
        assert_eq!(d.width(), 19 + 2 + 4 + 6 + 13 + 5);
        assert_eq!(d.column_names().len(), d.width());
        let (i, off) = d.lookup("Glascow coma scale eye opening").unwrap();
        assert_eq!(d.variables()[i].width(), 4);
        assert_eq!(d.column_names()[off], "Glascow coma scale eye opening=1");
    }

    #[test]
    fn json_round_trip() {
        let d = VariableDictionary::builtin_24();
        let back = VariableDictionary::from_json(&d.to_json().unwrap()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn rejects_duplicates_and_bad_normal() {
        let v = VariableSpec::continuous("x", 0.0, 1.0, 0.0, [-1.0, 1.0]);
        assert!(VariableDictionary::new(vec![v.clone(), v]).is_err());
        let bad = VariableSpec::categorical("c", &["a", "b"], "z");
        assert!(VariableDictionary::new(vec![bad]).is_err());
        let zero_std = VariableSpec::continuous("x", 0.0, 0.0, 0.0, [-1.0, 1.0]);
        assert!(VariableDictionary::new(vec![zero_std]).is_err());
    }
}
