//! Experiment configuration as a TOML document with `[cohort]`, `[model]`,
//! `[loss]` and `[train]` sections. Unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::CohortConfig;
use crate::error::{Error, Result};
use crate::model::{Dims, LossWeights, ModelConfig, Task, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    MacroF1,
    Accuracy,
    Auprc,
}

impl SelectionMetric {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Progression => SelectionMetric::MacroF1,
            Task::Los => SelectionMetric::Accuracy,
            Task::Mortality => SelectionMetric::Auprc,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SelectionMetric::MacroF1 => "macro_f1",
            SelectionMetric::Accuracy => "accuracy",
            SelectionMetric::Auprc => "auprc",
        }
    }
}

impl fmt::Display for SelectionMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// defaults to the task's metric
    pub selection_metric: Option<SelectionMetric>,
    /// fraction of EHR rows dropped from training and validation episodes
    pub missing_ehr_rate: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            batch_size: 8,
            accumulation_steps: 4,
            max_epochs: 100,
            patience: 10,
            selection_metric: None,
            missing_ehr_rate: 0.0,
            train_fraction: 0.7,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default)]
    pub ablation: Variant,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub cohort: CohortConfig,
    #[serde(default)]
    pub model: ModelConfig,
    /// defaults to the task preset
    #[serde(default)]
    pub loss: Option<LossWeights>,
    #[serde(default)]
    pub train: TrainConfig,
    /// search axes used by the sweep
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

impl ExperimentConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            ablation: Variant::Full,
            seeds: default_seeds(),
            cohort: CohortConfig::default(),
            model: ModelConfig::default(),
            loss: None,
            train: TrainConfig::default(),
            grid: None,
        }
    }

    /// Small configuration for gradient checking: width 8, 3 regions,
    /// 2 diseases, 3 snapshots and 6 hourly EHR rows.
    pub fn micro() -> Self {
        let mut c = Self::new(Task::Progression);
        c.cohort = CohortConfig {
            n_patients: 5,
            regions: 3,
            diseases: 2,
            d_in: 6,
            n_ehr: 4,
            n_dem: 3,
            static_dim: 2,
            phys_dim: 2,
            t_probs: [0.0, 1.0, 0.0, 0.0],
            horizon_hours: 5,
            min_snapshot_gap: 1.0,
            label_priors: vec![[0.35, 0.3, 0.35]],
            ..CohortConfig::default()
        };
        c.model = ModelConfig {
            hidden: 8,
            ehr_heads: 4,
            fusion_heads: 4,
            dropout: 0.0,
            normalize_mask: false,
        };
        c.loss = Some(LossWeights {
            pred: 2.0,
            orth: 1.0,
            temp: 0.5,
            pae: 2.0,
            static_rev: 1.0,
        });
        c.seeds = vec![0, 1, 2, 3, 4];
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// `micro` names the builtin gradient-check preset; anything else is a path.
    pub fn load_or_builtin(name: &str) -> Result<Self> {
        if name == "micro" && !Path::new(name).exists() {
            return Ok(Self::micro());
        }
        Self::load(Path::new(name))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex sha256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.loss_weights().validate()?;
        let t = &self.train;
        if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", t.learning_rate)));
        }
        if !(t.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if t.batch_size == 0 || t.accumulation_steps == 0 || t.max_epochs == 0 {
            return Err(Error::Config("batch_size, accumulation_steps and max_epochs must be >= 1".into()));
        }
        if t.patience > t.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                t.patience, t.max_epochs
            )));
        }
        if !(0.0..=1.0).contains(&t.missing_ehr_rate) {
            return Err(Error::Config("missing_ehr_rate must lie in [0, 1]".into()));
        }
        if !(t.train_fraction > 0.0 && t.val_fraction > 0.0 && t.train_fraction + t.val_fraction < 1.0) {
            return Err(Error::Config("split fractions must be positive and leave a test share".into()));
        }
        if let Some(m) = t.selection_metric {
            if m != SelectionMetric::for_task(self.task) {
                return Err(Error::Config(format!(
                    "selection metric {m} does not match task {} ({})",
                    self.task,
                    SelectionMetric::for_task(self.task)
                )));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if self.model.hidden % self.model.ehr_heads != 0 || self.model.hidden % self.model.fusion_heads != 0 {
            return Err(Error::Config("hidden width must be divisible by the head counts".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        Dims::from(&self.cohort)
    }

    /// Loss weights with the ablation applied.
    pub fn loss_weights(&self) -> LossWeights {
        self.loss
            .unwrap_or_else(|| LossWeights::preset(self.task))
            .for_variant(self.ablation)
    }

    pub fn selection_metric(&self) -> SelectionMetric {
        self.train
            .selection_metric
            .unwrap_or_else(|| SelectionMetric::for_task(self.task))
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::from_toml(s)
    }
}

/// Search axes for [`crate::experiment::grid_search`]. An axis left out of
/// a `[grid]` table (or given as `[]`) keeps the base config's value; the
/// `Default` value is the full tuning table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub learning_rate: Vec<f64>,
    #[serde(default)]
    pub dropout: Vec<f64>,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub lambda_temp: Vec<f64>,
    #[serde(default)]
    pub lambda_pred: Vec<f64>,
    #[serde(default)]
    pub lambda_pae: Vec<f64>,
    #[serde(default)]
    pub lambda_orth: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            learning_rate: vec![8e-6, 5e-6, 1e-5, 5e-5],
            dropout: vec![0.1, 0.2, 0.3],
            hidden: vec![64, 128, 256],
            lambda_temp: vec![0.01, 0.001, 0.1, 1.0],
            lambda_pred: vec![2.0, 6.0, 10.0],
            lambda_pae: vec![0.01, 0.1, 2.0],
            lambda_orth: vec![0.001, 0.01, 0.1, 10.0],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_hash_stable() {
        let c = ExperimentConfig::micro();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash(), back.hash());
        assert_eq!(c.hash().len(), 64);
        let mut d = c.clone();
        d.train.learning_rate *= 2.0;
        assert_ne!(c.hash(), d.hash());
    }

    #[test]
    fn minimal_document_uses_defaults() {
        let c = ExperimentConfig::from_toml("task = \"mortality\"\n").unwrap();
        assert_eq!(c.ablation, Variant::Full);
        assert_eq!(c.train.accumulation_steps, 4);
        assert_eq!(c.train.max_epochs, 100);
        assert_eq!(c.train.patience, 10);
        assert_eq!(c.selection_metric(), SelectionMetric::Auprc);
        assert_eq!(c.loss_weights(), LossWeights::preset(Task::Mortality));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [
            "task = \"los\"\nlerning_rate = 1.0\n",
            "task = \"los\"\n[train]\nlerning_rate = 1.0\n",
            "task = \"los\"\n[model]\nhiden = 4\n",
            "task = \"los\"\n[cohort]\nregion = 4\n",
        ] {
            assert!(matches!(ExperimentConfig::from_toml(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn invariants_are_enforced() {
        let bad = [
            "task = \"los\"\n[train]\npatience = 20\nmax_epochs = 10\n",
            "task = \"los\"\n[loss]\north = -1.0\n",
            "task = \"los\"\n[train]\nselection_metric = \"auprc\"\n",
            "task = \"nope\"\n",
            "task = \"los\"\nablation = \"A9\"\n",
        ];
        for doc in bad {
            assert!(ExperimentConfig::from_toml(doc).is_err(), "{doc}");
        }
        let ok = "task = \"progression\"\nablation = \"B2\"\n[train]\nselection_metric = \"macro_f1\"\n";
        let c = ExperimentConfig::from_toml(ok).unwrap();
        assert_eq!(c.loss_weights().pae, 0.0);
    }

    #[test]
    fn task_metrics() {
        assert_eq!(SelectionMetric::for_task(Task::Progression), SelectionMetric::MacroF1);
        assert_eq!(SelectionMetric::for_task(Task::Los), SelectionMetric::Accuracy);
        assert_eq!(SelectionMetric::for_task(Task::Mortality), SelectionMetric::Auprc);
    }

    #[test]
    fn grid_axes_match_tuning_table() {
        let g = GridSpec::default();
        assert_eq!(g.learning_rate, vec![8e-6, 5e-6, 1e-5, 5e-5]);
        assert_eq!(g.dropout, vec![0.1, 0.2, 0.3]);
        assert_eq!(g.hidden, vec![64, 128, 256]);
        assert_eq!(g.lambda_temp, vec![0.01, 0.001, 0.1, 1.0]);
        assert_eq!(g.lambda_pred, vec![2.0, 6.0, 10.0]);
        assert_eq!(g.lambda_pae, vec![0.01, 0.1, 2.0]);
        assert_eq!(g.lambda_orth, vec![0.001, 0.01, 0.1, 10.0]);
    }

    #[test]
    fn micro_preset_shape() {
        let c = ExperimentConfig::micro();
        assert_eq!(c.model.hidden, 8);
        assert_eq!((c.cohort.regions, c.cohort.diseases), (3, 2));
        assert_eq!(c.cohort.max_snapshots(), 3);
        assert_eq!(c.cohort.horizon_hours + 1, 6);
    }
}
