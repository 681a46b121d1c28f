//! Experiment configuration: one JSON document with every default
//! materialized when it is written back into a run manifest.

use std::fs::File;
use std::path::{Path, PathBuf};

use hilora::adaptation::AdaptConfig;
use hilora::datagen::{self, FederationData, PartitionSpec};
use hilora::federation::{base_model, FederationConfig};
use hilora::model::HeadModel;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub federation: FederationConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub adapt: AdaptConfig,
    pub gradcheck: GradcheckConfig,
    /// Used when `--out` is not given.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Scale of the frozen head `W0`.
    pub base_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            base_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Fraction of clients held out as unseen; 0 keeps everyone.
    pub unseen_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic(SyntheticData::default()),
            unseen_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    Synthetic(SyntheticData),
    Csv(CsvData),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticData {
    pub classes: usize,
    pub feature_dim: usize,
    pub per_class: usize,
    pub separation: f64,
    pub clients: usize,
    pub partition: PartitionSpec,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self {
            classes: 10,
            feature_dim: 16,
            per_class: 100,
            separation: 3.0,
            clients: 20,
            partition: PartitionSpec::GlDir { alpha: 0.3 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvData {
    /// Relative paths resolve against the working directory.
    pub path: PathBuf,
    #[serde(default)]
    pub class_count: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub cases: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            cases: 20,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| CliError::json(path, e))
    }

    /// Checks every section; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        if self.model.hidden == 0 {
            return Err(CliError::field("model.hidden", "must be positive"));
        }
        if !(self.model.base_scale >= 0.0 && self.model.base_scale.is_finite()) {
            return Err(CliError::field("model.base_scale", "must be a nonnegative real"));
        }
        let f = self.data.unseen_fraction;
        if !(0.0..1.0).contains(&f) {
            return Err(CliError::field(
                "data.unseen_fraction",
                format!("must be in [0, 1), got {f}"),
            ));
        }
        if let DataSource::Synthetic(s) = &self.data.source {
            for (field, v) in [
                ("data.source.classes", s.classes),
                ("data.source.feature_dim", s.feature_dim),
                ("data.source.per_class", s.per_class),
                ("data.source.clients", s.clients),
            ] {
                if v == 0 {
                    return Err(CliError::field(field, "must be positive"));
                }
            }
            if s.classes < 2 {
                return Err(CliError::field("data.source.classes", "need at least two classes"));
            }
            if !(s.separation >= 0.0 && s.separation.is_finite()) {
                return Err(CliError::field("data.source.separation", "must be a nonnegative real"));
            }
            let limit = s.classes.min(self.model.hidden);
            if self.federation.rank > limit {
                return Err(CliError::field(
                    "federation.rank",
                    format!("{} exceeds min(classes, hidden) = {limit}", self.federation.rank),
                ));
            }
        }
        if self.adapt.probe_steps == 0 {
            return Err(CliError::field("adapt.probe_steps", "must be positive"));
        }
        if self.gradcheck.cases == 0 {
            return Err(CliError::field("gradcheck.cases", "must be positive"));
        }
        if !(self.gradcheck.step > 0.0 && self.gradcheck.step.is_finite()) {
            return Err(CliError::field("gradcheck.step", "must be positive"));
        }
        Ok(())
    }

    /// Participating and unseen clients, all drawn from the master seed.
    pub fn build_data(&self) -> Result<FederationData> {
        let seed = self.federation.master_seed;
        let data = match &self.data.source {
            DataSource::Synthetic(s) => {
                let pool = datagen::gen_pool(s.classes, s.feature_dim, s.per_class, s.separation, seed)?;
                datagen::partition(&pool, &s.partition, s.clients, seed)?
            }
            DataSource::Csv(c) => {
                let file = File::open(&c.path).map_err(|e| CliError::io(&c.path, e))?;
                datagen::load_csv(std::io::BufReader::new(file), c.class_count, seed)?
            }
        };
        if self.data.unseen_fraction > 0.0 {
            Ok(datagen::split_unseen(&data, self.data.unseen_fraction, seed)?)
        } else {
            Ok(data)
        }
    }

    pub fn build_model(&self, data: &FederationData) -> Result<HeadModel> {
        Ok(base_model(
            data.feature_dim,
            self.model.hidden,
            data.class_count,
            self.model.base_scale,
            self.federation.master_seed,
        )?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"federation": {"rank": 2}, "data": {"source": {"kind": "synthetic", "clients": 5}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.federation.rank, 2);
        assert_eq!(cfg.federation.t_root, 20);
        match cfg.data.source {
            DataSource::Synthetic(s) => assert_eq!((s.clients, s.classes), (5, 10)),
            DataSource::Csv(_) => panic!("expected synthetic data"),
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"federaton": {}}"#).unwrap_err();
        assert!(err.to_string().contains("federaton"));
    }

    #[test]
    fn validation_names_fields() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.unseen_fraction = 1.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("data.unseen_fraction"));
        let mut cfg = ExperimentConfig::default();
        cfg.federation.rank = 11;
        assert!(cfg.validate().unwrap_err().to_string().contains("federation.rank"));
        let mut cfg = ExperimentConfig::default();
        cfg.model.hidden = 0;
        assert!(cfg.validate().unwrap_err().to_string().contains("model.hidden"));
    }
}
