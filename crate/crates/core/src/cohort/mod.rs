//! Synthetic ICU cohorts with known static and dynamic generative factors.

mod generate;
mod io;
mod missing;

pub use generate::{generate_cohort, generate_episode, CohortGenerator};
pub use io::{count_records, read_cohort, read_oracle, write_cohort, write_oracle};
pub use missing::inject_missing_ehr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Snapshot-count proportions for T = 2, 3, 4, 5 (1975/661/82/2 stays).
pub const DEFAULT_T_PROBS: [f64; 4] = [
    1975.0 / 2720.0,
    661.0 / 2720.0,
    82.0 / 2720.0,
    2.0 / 2720.0,
];

/// Per-disease (worsened, no change, improved) label frequencies from
/// annotated interval counts.
pub const DEFAULT_LABEL_PRIORS: [[f64; 3]; 7] = [
    [674.0 / 2145.0, 1143.0 / 2145.0, 328.0 / 2145.0],
    [141.0 / 1799.0, 1575.0 / 1799.0, 83.0 / 1799.0],
    [285.0 / 872.0, 463.0 / 872.0, 124.0 / 872.0],
    [597.0 / 1793.0, 624.0 / 1793.0, 572.0 / 1793.0],
    [1273.0 / 4082.0, 2025.0 / 4082.0, 784.0 / 4082.0],
    [702.0 / 2426.0, 1407.0 / 2426.0, 317.0 / 2426.0],
    [387.0 / 772.0, 287.0 / 772.0, 98.0 / 772.0],
];

/// Length-of-stay class frequencies for [2,3), [3,4), [4,6), >=6 days.
pub const DEFAULT_LOS_PRIORS: [f64; 4] = [
    793.0 / 2720.0,
    641.0 / 2720.0,
    687.0 / 2720.0,
    599.0 / 2720.0,
];

/// Class index for a progression label: -1 -> 0, 0 -> 1, +1 -> 2.
pub fn label_to_class(y: i8) -> Result<usize> {
    match y {
        -1 => Ok(0),
        0 => Ok(1),
        1 => Ok(2),
        _ => Err(Error::Label(format!("progression label {y} not in {{-1,0,1}}"))),
    }
}

pub fn class_to_label(c: usize) -> Result<i8> {
    match c {
        0 => Ok(-1),
        1 => Ok(0),
        2 => Ok(1),
        _ => Err(Error::Label(format!("progression class {c} not in 0..3"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MortalityConfig {
    pub prevalence: f64,
    /// weight on the (negated) mean dynamic drift; worsening raises risk
    pub w_dynamic: f64,
    pub w_static: f64,
    pub w_phys: f64,
    /// per-region weights on the drift and static terms; uniform when absent
    pub region_weights: Option<Vec<f64>>,
}

impl Default for MortalityConfig {
    fn default() -> Self {
        Self {
            prevalence: 0.171,
            w_dynamic: 1.5,
            w_static: 0.5,
            w_phys: 1.0,
            region_weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LosConfig {
    pub priors: [f64; 4],
    pub w_dynamic: f64,
    pub w_static: f64,
    pub w_phys: f64,
    pub noise: f64,
    /// per-region weights on the drift and static terms; uniform when absent
    pub region_weights: Option<Vec<f64>>,
}

impl Default for LosConfig {
    fn default() -> Self {
        Self {
            priors: DEFAULT_LOS_PRIORS,
            w_dynamic: 1.0,
            w_static: 0.5,
            w_phys: 1.0,
            noise: 0.3,
            region_weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortConfig {
    pub n_patients: usize,
    pub regions: usize,
    pub diseases: usize,
    pub d_in: usize,
    pub n_ehr: usize,
    pub n_dem: usize,
    /// width of each region's static latent
    pub static_dim: usize,
    /// width of the per-stay physiologic latent seen only through the EHR
    pub phys_dim: usize,
    pub t_probs: [f64; 4],
    /// last EHR timestamp in hours; rows are hourly from 0
    pub horizon_hours: usize,
    pub min_snapshot_gap: f64,
    pub feature_noise: f64,
    pub ehr_noise: f64,
    pub dem_noise: f64,
    pub prototype_scale: f64,
    pub static_spread: f64,
    pub drift_scale: f64,
    /// per-disease (worsened, no change, improved); cycled when shorter than `diseases`
    pub label_priors: Vec<[f64; 3]>,
    /// probability that a (interval, region, disease) slot carries a label
    pub annotation_rate: f64,
    pub missing_ehr_rate: f64,
    pub mortality: MortalityConfig,
    pub los: LosConfig,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_patients: 500,
            regions: 6,
            diseases: 7,
            d_in: 16,
            n_ehr: 38,
            n_dem: 7,
            static_dim: 6,
            phys_dim: 4,
            t_probs: DEFAULT_T_PROBS,
            horizon_hours: 48,
            min_snapshot_gap: 2.0,
            feature_noise: 0.05,
            ehr_noise: 0.1,
            dem_noise: 0.1,
            prototype_scale: 1.0,
            static_spread: 0.5,
            drift_scale: 1.0,
            label_priors: DEFAULT_LABEL_PRIORS.to_vec(),
            annotation_rate: 1.0,
            missing_ehr_rate: 0.0,
            mortality: MortalityConfig::default(),
            los: LosConfig::default(),
            seed: 0,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("regions", self.regions),
            ("diseases", self.diseases),
            ("d_in", self.d_in),
            ("n_ehr", self.n_ehr),
            ("n_dem", self.n_dem),
            ("static_dim", self.static_dim),
            ("phys_dim", self.phys_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("cohort.{name} must be >= 1")));
            }
        }
        check_probs("t_probs", &self.t_probs)?;
        check_probs("los.priors", &self.los.priors)?;
        if self.label_priors.is_empty() {
            return Err(Error::Config("cohort.label_priors is empty".into()));
        }
        for p in &self.label_priors {
            check_probs("label_priors", p)?;
        }
        for (name, v) in [
            ("annotation_rate", self.annotation_rate),
            ("missing_ehr_rate", self.missing_ehr_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("cohort.{name} must lie in [0, 1], got {v}")));
            }
        }
        let p = self.mortality.prevalence;
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Config(format!("mortality.prevalence must lie in (0, 1), got {p}")));
        }
        for (name, weights) in [
            ("mortality", &self.mortality.region_weights),
            ("los", &self.los.region_weights),
        ] {
            if let Some(w) = weights {
                if w.len() != self.regions {
                    return Err(Error::Config(format!(
                        "{name}.region_weights has {} entries for {} regions",
                        w.len(),
                        self.regions
                    )));
                }
            }
        }
        for (name, v) in [
            ("feature_noise", self.feature_noise),
            ("ehr_noise", self.ehr_noise),
            ("dem_noise", self.dem_noise),
            ("static_spread", self.static_spread),
            ("min_snapshot_gap", self.min_snapshot_gap),
            ("los.noise", self.los.noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("cohort.{name} must be >= 0, got {v}")));
            }
        }
        if self.min_snapshot_gap <= 0.0 {
            return Err(Error::Config("cohort.min_snapshot_gap must be > 0".into()));
        }
        let max_t = self.max_snapshots();
        if (max_t - 1) as f64 * self.min_snapshot_gap > self.horizon_hours as f64 {
            return Err(Error::Config(format!(
                "horizon {}h cannot hold {max_t} snapshots {}h apart",
                self.horizon_hours, self.min_snapshot_gap
            )));
        }
        if self.horizon_hours < 1 {
            return Err(Error::Config("cohort.horizon_hours must be >= 1".into()));
        }
        Ok(())
    }

    /// Largest T with nonzero probability.
    pub fn max_snapshots(&self) -> usize {
        (0..4).rev().find(|&k| self.t_probs[k] > 0.0).map_or(2, |k| k + 2)
    }

    pub fn label_prior(&self, disease: usize) -> [f64; 3] {
        self.label_priors[disease % self.label_priors.len()]
    }
}

fn check_probs(name: &str, p: &[f64]) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.iter().any(|v| *v < 0.0 || !v.is_finite()) || (s - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("{name} must be nonnegative and sum to 1 (sum {s})")));
    }
    Ok(())
}

/// One synthetic ICU stay as seen by the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    pub patient_id: String,
    /// hours since admission, strictly increasing, length T
    pub snapshot_times: Vec<f64>,
    /// T x R x d_in
    pub region_features: Vec<Vec<Vec<f64>>>,
    /// hours, strictly increasing, length M + 1
    pub ehr_times: Vec<f64>,
    /// (M + 1) x N
    pub ehr_values: Vec<Vec<f64>>,
    pub demographics: Vec<f64>,
    /// (T - 1) x R x K with -1 worsened, 0 no change, +1 improved; `None` when unannotated
    pub progression_labels: Vec<Vec<Vec<Option<i8>>>>,
    pub mortality: u8,
    pub los_class: u8,
}

impl Episode {
    pub fn num_snapshots(&self) -> usize {
        self.snapshot_times.len()
    }

    pub fn num_regions(&self) -> usize {
        self.region_features.first().map_or(0, Vec::len)
    }

    pub fn num_diseases(&self) -> usize {
        self.progression_labels
            .first()
            .and_then(|r| r.first())
            .map_or(0, Vec::len)
    }

    /// Snapshot intervals with no EHR timestamp inside them; attention over
    /// such an interval falls back to the nearest row.
    pub fn empty_intervals(&self) -> usize {
        self.snapshot_times
            .windows(2)
            .filter(|w| !self.ehr_times.iter().any(|&t| t >= w[0] && t <= w[1]))
            .count()
    }

    /// Checks every shape and ordering invariant.
    pub fn validate(&self) -> Result<()> {
        let t = self.snapshot_times.len();
        let id = &self.patient_id;
        if t < 2 {
            return Err(Error::contract(format!("{id}: need T >= 2 snapshots, got {t}")));
        }
        strictly_increasing(&self.snapshot_times, id, "snapshot_times")?;
        strictly_increasing(&self.ehr_times, id, "ehr_times")?;
        if self.ehr_times.len() < 2 {
            return Err(Error::contract(format!("{id}: need at least 2 EHR rows")));
        }
        if self.region_features.len() != t {
            return Err(Error::dim(format!(
                "{id}: {} feature snapshots for {t} times",
                self.region_features.len()
            )));
        }
        let r = self.num_regions();
        let d_in = self.region_features[0].first().map_or(0, Vec::len);
        if r == 0 || d_in == 0 {
            return Err(Error::dim(format!("{id}: empty region features")));
        }
        for snap in &self.region_features {
            if snap.len() != r || snap.iter().any(|f| f.len() != d_in) {
                return Err(Error::dim(format!("{id}: ragged region features")));
            }
        }
        if self.ehr_values.len() != self.ehr_times.len() {
            return Err(Error::dim(format!(
                "{id}: {} EHR rows for {} timestamps",
                self.ehr_values.len(),
                self.ehr_times.len()
            )));
        }
        let n = self.ehr_values[0].len();
        if n == 0 || self.ehr_values.iter().any(|row| row.len() != n) {
            return Err(Error::dim(format!("{id}: ragged EHR rows")));
        }
        if self.progression_labels.len() != t - 1 {
            return Err(Error::dim(format!(
                "{id}: {} label intervals for T = {t}",
                self.progression_labels.len()
            )));
        }
        let k = self.num_diseases();
        for interval in &self.progression_labels {
            if interval.len() != r || interval.iter().any(|v| v.len() != k) {
                return Err(Error::dim(format!("{id}: ragged progression labels")));
            }
            for y in interval.iter().flatten().flatten() {
                label_to_class(*y)?;
            }
        }
        if self.mortality > 1 {
            return Err(Error::Label(format!("{id}: mortality {}", self.mortality)));
        }
        if self.los_class > 3 {
            return Err(Error::Label(format!("{id}: los_class {}", self.los_class)));
        }
        let all_finite = self
            .region_features
            .iter()
            .flatten()
            .flatten()
            .chain(self.ehr_values.iter().flatten())
            .chain(&self.demographics)
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::numeric(format!("{id}: non-finite input value")));
        }
        Ok(())
    }
}

fn strictly_increasing(v: &[f64], id: &str, what: &str) -> Result<()> {
    if v.windows(2).any(|w| w[1] <= w[0]) || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::contract(format!("{id}: {what} not strictly increasing")));
    }
    Ok(())
}

/// Generator-only factors, stored in the oracle sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HiddenFactors {
    pub patient_id: String,
    /// R x static_dim
    pub hidden_static: Vec<Vec<f64>>,
    /// (T - 1) x R x K drift per interval
    pub hidden_dynamic: Vec<Vec<Vec<f64>>>,
    pub physiologic: Vec<f64>,
}
