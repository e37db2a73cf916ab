use std::path::PathBuf;

use serde::Deserialize;

use crate::data::{self, SyntheticSpec, Task, DEFAULT_SPLIT};
use crate::fed::Averaging;
use crate::models::ModelSpec;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Local,
    Central,
    CentralDp,
    Federated,
    FederatedDp,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Local => "local",
            Condition::Central => "central",
            Condition::CentralDp => "central_dp",
            Condition::Federated => "federated",
            Condition::FederatedDp => "federated_dp",
        }
    }

    pub fn is_dp(self) -> bool {
        matches!(self, Condition::CentralDp | Condition::FederatedDp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Logistic,
    Mlp,
}

pub const DEFAULT_LRS: [f64; 3] = [1e-3, 1e-2, 1e-1];
pub const DEFAULT_BATCHES: [usize; 3] = [32, 64, 128];
pub const DEFAULT_DP_GRID: [f64; 3] = [0.1, 1.0, 10.0];
pub const DEFAULT_DELTA: f64 = 1e-5;
pub const DEFAULT_DP_EPOCHS: usize = 25;

/// Flat experiment configuration, read from TOML. Unknown keys are rejected.
///
/// The data source is either `csv` (with `width`) or the synthetic generator
/// driven by the `sites`/`admissions`/`tau`/... keys.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub condition: Condition,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_tasks")]
    pub tasks: Vec<Task>,

    #[serde(default = "default_models")]
    pub models: Vec<ModelFamily>,
    #[serde(default = "default_hidden")]
    pub hidden_sizes: Vec<usize>,
    #[serde(default = "default_lrs")]
    pub lrs: Vec<f64>,
    #[serde(default = "default_batches")]
    pub batch_sizes: Vec<usize>,
    /// Training epochs per candidate for local and central training.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Federated rounds (federated and federated_dp).
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default)]
    pub averaging: Averaging,

    /// Noise multipliers z searched by central_dp; a single value for
    /// federated_dp.
    #[serde(default)]
    pub noise_multipliers: Option<Vec<f64>>,
    /// Clipping thresholds S searched by both DP conditions.
    #[serde(default)]
    pub clip_norms: Option<Vec<f64>>,
    /// Epochs of central_dp training (the ε-vs-AUC trajectory length).
    #[serde(default)]
    pub dp_epochs: Option<usize>,
    /// Epochs of the per-site local DP search before federated_dp.
    #[serde(default)]
    pub dp_select_epochs: Option<usize>,

    #[serde(default = "default_min_train")]
    pub min_train: usize,
    #[serde(default = "default_split")]
    pub split: [f64; 3],

    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default)]
    pub sites: Option<usize>,
    #[serde(default)]
    pub admissions: Option<usize>,
    #[serde(default)]
    pub hospital_sites: Option<bool>,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub coef_scale: Option<f64>,
    #[serde(default)]
    pub mortality_incidence: Option<f64>,
    #[serde(default)]
    pub plos_incidence: Option<f64>,
    #[serde(default)]
    pub repeat_admission: Option<f64>,
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}
fn default_tasks() -> Vec<Task> {
    Task::ALL.to_vec()
}
fn default_models() -> Vec<ModelFamily> {
    vec![ModelFamily::Logistic, ModelFamily::Mlp]
}
fn default_hidden() -> Vec<usize> {
    vec![32]
}
fn default_lrs() -> Vec<f64> {
    DEFAULT_LRS.to_vec()
}
fn default_batches() -> Vec<usize> {
    DEFAULT_BATCHES.to_vec()
}
fn default_epochs() -> usize {
    10
}
fn default_rounds() -> usize {
    10
}
fn default_local_epochs() -> usize {
    1
}
fn default_min_train() -> usize {
    1000
}
fn default_split() -> [f64; 3] {
    DEFAULT_SPLIT
}
fn default_width() -> usize {
    50
}

/// One point of the (model, lr, batch) grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub model: ModelSpec,
    pub lr: f64,
    pub batch_size: usize,
}

impl Candidate {
    pub fn describe(&self) -> String {
        let model = match self.model.kind {
            crate::models::ModelKind::Logistic => "logistic".to_string(),
            crate::models::ModelKind::Mlp { hidden } => format!("mlp({hidden})"),
        };
        format!("model={model} lr={} batch={}", self.lr, self.batch_size)
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Defaults for `condition` on the synthetic source.
    pub fn defaults(condition: Condition) -> Self {
        Self::from_toml_str(&format!("condition = \"{}\"", condition.name()))
            .expect("defaults are valid")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |xs: &[f64], key: &str| -> Result<()> {
            if xs.is_empty() || xs.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(config_err(format!("{key} must be a nonempty list of positive numbers")));
            }
            Ok(())
        };
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(config_err("delta must lie in (0, 1)"));
        }
        if self.tasks.is_empty() {
            return Err(config_err("tasks must not be empty"));
        }
        if self.models.is_empty() {
            return Err(config_err("models must not be empty"));
        }
        if self.models.contains(&ModelFamily::Mlp)
            && (self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0))
        {
            return Err(config_err("hidden_sizes must be positive when models include mlp"));
        }
        positive(&self.lrs, "lrs")?;
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(config_err("batch_sizes must be a nonempty list of positive integers"));
        }
        if self.epochs == 0 || self.rounds == 0 || self.local_epochs == 0 {
            return Err(config_err("epochs, rounds and local_epochs must be >= 1"));
        }
        if self.width == 0 {
            return Err(config_err("width must be positive"));
        }

        let dp_keys = [
            ("noise_multipliers", self.noise_multipliers.is_some()),
            ("clip_norms", self.clip_norms.is_some()),
            ("dp_epochs", self.dp_epochs.is_some()),
            ("dp_select_epochs", self.dp_select_epochs.is_some()),
        ];
        if !self.condition.is_dp() {
            if let Some((key, _)) = dp_keys.iter().find(|(_, set)| *set) {
                return Err(config_err(format!(
                    "{key} is only valid for DP conditions, not {}",
                    self.condition.name()
                )));
            }
        } else {
            positive(&self.noise_multipliers(), "noise_multipliers")?;
            positive(&self.clip_norms(), "clip_norms")?;
            if self.condition == Condition::FederatedDp && self.noise_multipliers().len() != 1 {
                return Err(config_err("federated_dp takes exactly one noise multiplier"));
            }
            if self.condition == Condition::FederatedDp && self.dp_epochs.is_some() {
                return Err(config_err("dp_epochs applies to central_dp only"));
            }
            if self.condition == Condition::CentralDp && self.dp_select_epochs.is_some() {
                return Err(config_err("dp_select_epochs applies to federated_dp only"));
            }
            if self.dp_epochs == Some(0) || self.dp_select_epochs == Some(0) {
                return Err(config_err("DP epoch counts must be >= 1"));
            }
        }

        let synthetic_keys = [
            ("sites", self.sites.is_some()),
            ("admissions", self.admissions.is_some()),
            ("hospital_sites", self.hospital_sites.is_some()),
            ("tau", self.tau.is_some()),
            ("coef_scale", self.coef_scale.is_some()),
            ("mortality_incidence", self.mortality_incidence.is_some()),
            ("plos_incidence", self.plos_incidence.is_some()),
            ("repeat_admission", self.repeat_admission.is_some()),
        ];
        if self.csv.is_some() {
            if let Some((key, _)) = synthetic_keys.iter().find(|(_, set)| *set) {
                return Err(config_err(format!("{key} conflicts with csv")));
            }
        } else {
            self.synthetic_spec().validate().map_err(|e| config_err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn noise_multipliers(&self) -> Vec<f64> {
        self.noise_multipliers.clone().unwrap_or_else(|| match self.condition {
            Condition::FederatedDp => vec![crate::fed::LOCAL_DP_NOISE],
            _ => DEFAULT_DP_GRID.to_vec(),
        })
    }

    pub fn clip_norms(&self) -> Vec<f64> {
        let mut v = self.clip_norms.clone().unwrap_or_else(|| DEFAULT_DP_GRID.to_vec());
        v.sort_by(f64::total_cmp);
        v
    }

    pub fn dp_epochs(&self) -> usize {
        self.dp_epochs.unwrap_or(DEFAULT_DP_EPOCHS)
    }

    pub fn dp_select_epochs(&self) -> usize {
        self.dp_select_epochs.unwrap_or(crate::fed::LOCAL_DP_EPOCHS)
    }

    /// Synthetic generator settings implied by this config.
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let base = if self.hospital_sites == Some(true) {
            SyntheticSpec::hospital_cohort(self.width, self.seed)
        } else {
            SyntheticSpec::uniform(
                self.sites.unwrap_or(5),
                self.admissions.unwrap_or(2000),
                self.width,
                self.seed,
            )
        };
        SyntheticSpec {
            tau: self.tau.unwrap_or(base.tau),
            coef_scale: self.coef_scale.unwrap_or(base.coef_scale),
            mortality_incidence: self.mortality_incidence.unwrap_or(data::MORTALITY_INCIDENCE),
            plos_incidence: self.plos_incidence.unwrap_or(data::PLOS_INCIDENCE),
            repeat_admission: self.repeat_admission.unwrap_or(base.repeat_admission),
            ..base
        }
    }

    /// Tasks in ascending order, deduplicated.
    pub fn sorted_tasks(&self) -> Vec<Task> {
        let mut t = self.tasks.clone();
        t.sort();
        t.dedup();
        t
    }

    /// Grid in declared order: smallest model first (logistic, then mlp by
    /// hidden size), then learning rate, then batch size, each ascending.
    pub fn candidates(&self, width: usize) -> Vec<Candidate> {
        let mut models = Vec::new();
        let mut families = self.models.clone();
        families.sort();
        families.dedup();
        for f in families {
            match f {
                ModelFamily::Logistic => models.push(ModelSpec::logistic(width)),
                ModelFamily::Mlp => {
                    let mut hs = self.hidden_sizes.clone();
                    hs.sort_unstable();
                    hs.dedup();
                    models.extend(hs.into_iter().map(|h| ModelSpec::mlp(width, h)));
                }
            }
        }
        let mut lrs = self.lrs.clone();
        lrs.sort_by(f64::total_cmp);
        lrs.dedup();
        let mut batches = self.batch_sizes.clone();
        batches.sort_unstable();
        batches.dedup();
        let mut out = Vec::new();
        for &model in &models {
            for &lr in &lrs {
                for &batch_size in &batches {
                    out.push(Candidate { model, lr, batch_size });
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse() {
        let c = ExperimentConfig::defaults(Condition::Federated);
        assert_eq!(c.delta, 1e-5);
        assert_eq!(c.lrs, DEFAULT_LRS);
        assert_eq!(c.candidates(10).len(), 18);
        let dp = ExperimentConfig::defaults(Condition::CentralDp);
        assert_eq!(dp.noise_multipliers(), DEFAULT_DP_GRID);
        assert_eq!(dp.dp_epochs(), 25);
        let fdp = ExperimentConfig::defaults(Condition::FederatedDp);
        assert_eq!(fdp.noise_multipliers(), vec![1.0]);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml_str("condition = \"local\"\nlearning_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn dp_keys_only_for_dp_conditions() {
        let err = ExperimentConfig::from_toml_str("condition = \"federated\"\nclip_norms = [1.0]").unwrap_err();
        assert!(err.to_string().contains("clip_norms"), "{err}");
        assert!(ExperimentConfig::from_toml_str("condition = \"central_dp\"\nclip_norms = [1.0]").is_ok());
        assert!(ExperimentConfig::from_toml_str(
            "condition = \"federated_dp\"\nnoise_multipliers = [1.0, 2.0]"
        )
        .is_err());
    }

    #[test]
    fn csv_excludes_synthetic_keys() {
        assert!(ExperimentConfig::from_toml_str("condition = \"local\"\ncsv = \"a.csv\"\ntau = 0.1").is_err());
        assert!(ExperimentConfig::from_toml_str("condition = \"local\"\ncsv = \"a.csv\"").is_ok());
    }

    #[test]
    fn candidate_order() {
        let c = ExperimentConfig::from_toml_str(
            "condition = \"local\"\nmodels = [\"mlp\", \"logistic\"]\nhidden_sizes = [8, 4]\nlrs = [0.1, 0.01]\nbatch_sizes = [64, 32]",
        )
        .unwrap();
        let cands = c.candidates(3);
        assert_eq!(cands.len(), 12);
        assert_eq!(cands[0].model, ModelSpec::logistic(3));
        assert_eq!((cands[0].lr, cands[0].batch_size), (0.01, 32));
        assert_eq!((cands[1].lr, cands[1].batch_size), (0.01, 64));
        assert_eq!(cands[4].model, ModelSpec::mlp(3, 4));
        assert_eq!(cands[8].model, ModelSpec::mlp(3, 8));
    }

    #[test]
    fn rejects_bad_values() {
        for bad in [
            "condition = \"local\"\ndelta = 1.5",
            "condition = \"local\"\nlrs = []",
            "condition = \"local\"\nbatch_sizes = [0]",
            "condition = \"local\"\nepochs = 0",
            "condition = \"local\"\ntau = -1.0",
            "condition = \"nonsense\"",
        ] {
            assert!(ExperimentConfig::from_toml_str(bad).is_err(), "{bad}");
        }
    }
}
