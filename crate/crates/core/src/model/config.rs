use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::LayerConfig;

/// How the temporal and spatial branch representations become a prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    TemporalOnly,
    SpatialOnly,
    Concatenate,
    Adding,
    Bilinear,
    MaxPool,
}

impl Fusion {
    pub const ALL: [Fusion; 6] = [
        Fusion::TemporalOnly,
        Fusion::SpatialOnly,
        Fusion::Concatenate,
        Fusion::Adding,
        Fusion::Bilinear,
        Fusion::MaxPool,
    ];

    pub fn uses_temporal(self) -> bool {
        self != Fusion::SpatialOnly
    }

    pub fn uses_spatial(self) -> bool {
        self != Fusion::TemporalOnly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::TemporalOnly => "temporal-only",
            Fusion::SpatialOnly => "spatial-only",
            Fusion::Concatenate => "concatenate",
            Fusion::Adding => "adding",
            Fusion::Bilinear => "bilinear",
            Fusion::MaxPool => "max-pool",
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal-only" | "temporal" => Ok(Fusion::TemporalOnly),
            "spatial-only" | "spatial" => Ok(Fusion::SpatialOnly),
            "concatenate" | "concat" => Ok(Fusion::Concatenate),
            "adding" | "add" => Ok(Fusion::Adding),
            "bilinear" => Ok(Fusion::Bilinear),
            "max-pool" | "maxpool" | "max" => Ok(Fusion::MaxPool),
            other => Err(Error::invalid(format!("unknown fusion `{other}`"))),
        }
    }
}

/// Prediction task. Binary tasks use a two-class softmax whose second
/// column is the positive-class probability.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[serde(alias = "in-hospital-mortality")]
    Ihm,
    #[serde(alias = "length-of-stay")]
    Los,
    #[serde(alias = "decomp")]
    Decompensation,
    #[serde(alias = "pheno")]
    Phenotype,
}

pub const LOS_BUCKETS: usize = 10;
pub const N_PHENOTYPES: usize = 25;

impl Task {
    pub fn default_classes(self) -> usize {
        match self {
            Task::Ihm | Task::Decompensation => 2,
            Task::Los => LOS_BUCKETS,
            Task::Phenotype => N_PHENOTYPES,
        }
    }

    /// Multi-label tasks use independent sigmoids instead of a softmax.
    pub fn is_multilabel(self) -> bool {
        self == Task::Phenotype
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Ihm => "ihm",
            Task::Los => "los",
            Task::Decompensation => "decompensation",
            Task::Phenotype => "phenotype",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ihm" | "in-hospital-mortality" => Ok(Task::Ihm),
            "los" | "length-of-stay" => Ok(Task::Los),
            "decomp" | "decompensation" => Ok(Task::Decompensation),
            "pheno" | "phenotype" => Ok(Task::Phenotype),
            other => Err(Error::invalid(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Window length in hours.
    pub t: usize,
    /// Feature width after one-hot encoding.
    pub d: usize,
    /// Number of equal time chunks.
    pub n: usize,
    pub layer: LayerConfig,
    pub fusion: Fusion,
    pub task: Task,
    pub n_classes: usize,
    /// Add positional encodings to the spatial branch's variable tokens.
    /// Off by default: variable order carries no meaning.
    #[serde(default)]
    pub spatial_positional_encoding: bool,
}

impl ModelConfig {
    pub fn new(task: Task, t: usize, d: usize, n: usize) -> Self {
        ModelConfig {
            t,
            d,
            n,
            layer: LayerConfig::default(),
            fusion: Fusion::Concatenate,
            task,
            n_classes: task.default_classes(),
            spatial_positional_encoding: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layer.validate()?;
        if self.t == 0 || self.d == 0 || self.n == 0 {
            return Err(Error::Config("t, d and n must be positive".into()));
        }
        if !self.t.is_multiple_of(self.n) {
            return Err(Error::Config(format!(
                "t = {} is not divisible by n = {}",
                self.t, self.n
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "n_classes must be >= 2, got {}",
                self.n_classes
            )));
        }
        if self.n_classes != self.task.default_classes() {
            return Err(Error::Config(format!(
                "task {} needs {} outputs, got {}",
                self.task,
                self.task.default_classes(),
                self.n_classes
            )));
        }
        Ok(())
    }

    /// Hours per chunk.
    pub fn chunk_len(&self) -> usize {
        self.t / self.n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display_round_trip() {
        for f in Fusion::ALL {
            assert_eq!(f.as_str().parse::<Fusion>().unwrap(), f);
        }
        for t in [Task::Ihm, Task::Los, Task::Decompensation, Task::Phenotype] {
            assert_eq!(t.as_str().parse::<Task>().unwrap(), t);
        }
        assert_eq!("decomp".parse::<Task>().unwrap(), Task::Decompensation);
        assert_eq!("pheno".parse::<Task>().unwrap(), Task::Phenotype);
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig::new(Task::Ihm, 48, 49, 4);
        assert!(c.validate().is_ok());
        assert_eq!(c.chunk_len(), 12);
        c.n = 5;
        assert!(c.validate().is_err());
        c.n = 4;
        c.n_classes = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_uses_kebab_case() {
        let c = ModelConfig::new(Task::Los, 320, 49, 4);
        let s = serde_json::to_string(&c).unwrap();
        assert!(
            s.contains("\"concatenate\"") && s.contains("\"los\""),
            "{s}"
        );
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}
