use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{inject_missing_ehr, CohortConfig, Episode, HiddenFactors};
use crate::error::Result;
use crate::rng::{stream, streams};

const CALIBRATION_DRAWS: usize = 4000;

/// Row-major matrix with `cols` columns.
#[derive(Debug, Clone)]
struct Mat {
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Self {
        let scale = 1.0 / (cols as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { cols, data }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.data
            .chunks(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v = gaussian_vec(rng, n);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // rounding slack lands on the last class with nonzero mass
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Latent draw for one stay before any observation noise.
struct Latents {
    times: Vec<f64>,
    statics: Vec<Vec<f64>>,
    labels: Vec<Vec<Vec<i8>>>,
    drift: Vec<Vec<Vec<f64>>>,
    phys: Vec<f64>,
}

/// Cohort-level generative state: mixing matrices, region prototypes and
/// outcome calibration, all derived from `config.seed`.
#[derive(Debug, Clone)]
pub struct CohortGenerator {
    config: CohortConfig,
    static_mix: Mat,
    dynamic_mix: Mat,
    ehr_mix: Mat,
    dem_mix: Mat,
    prototypes: Vec<Vec<f64>>,
    mort_static_dir: Vec<f64>,
    mort_phys_dir: Vec<f64>,
    los_static_dir: Vec<f64>,
    los_phys_dir: Vec<f64>,
    region_weights: Vec<f64>,
    los_region_weights: Vec<f64>,
    mortality_bias: f64,
    los_cuts: [f64; 3],
}

impl CohortGenerator {
    pub fn new(config: &CohortConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = stream(c.seed, streams::MIXING);
        let static_mix = Mat::gaussian(&mut rng, c.d_in, c.static_dim);
        let dynamic_mix = Mat::gaussian(&mut rng, c.d_in, c.diseases);
        let ehr_mix = Mat::gaussian(&mut rng, c.n_ehr, c.diseases + c.phys_dim);
        let dem_mix = Mat::gaussian(&mut rng, c.n_dem, c.static_dim);
        let prototypes = (0..c.regions)
            .map(|_| {
                gaussian_vec(&mut rng, c.static_dim)
                    .into_iter()
                    .map(|v| v * c.prototype_scale)
                    .collect()
            })
            .collect();
        let mort_static_dir = unit_vec(&mut rng, c.static_dim);
        let mort_phys_dir = unit_vec(&mut rng, c.phys_dim);
        let los_static_dir = unit_vec(&mut rng, c.static_dim);
        let los_phys_dir = unit_vec(&mut rng, c.phys_dim);
        let region_weights = c
            .mortality
            .region_weights
            .clone()
            .unwrap_or_else(|| vec![1.0 / c.regions as f64; c.regions]);
        let los_region_weights = c
            .los
            .region_weights
            .clone()
            .unwrap_or_else(|| vec![1.0 / c.regions as f64; c.regions]);
        let mut g = Self {
            config: c.clone(),
            static_mix,
            dynamic_mix,
            ehr_mix,
            dem_mix,
            prototypes,
            mort_static_dir,
            mort_phys_dir,
            los_static_dir,
            los_phys_dir,
            region_weights,
            los_region_weights,
            mortality_bias: 0.0,
            los_cuts: [0.0; 3],
        };
        g.calibrate();
        Ok(g)
    }

    pub fn config(&self) -> &CohortConfig {
        &self.config
    }

    /// Sets the mortality intercept and LOS cut points so that outcome
    /// frequencies match the configured priors on a large reference draw.
    fn calibrate(&mut self) {
        let mut rng = stream(self.config.seed, streams::CALIBRATION);
        let mut mort = Vec::with_capacity(CALIBRATION_DRAWS);
        let mut sev = Vec::with_capacity(CALIBRATION_DRAWS);
        for _ in 0..CALIBRATION_DRAWS {
            let lat = self.draw_latents(&mut rng);
            mort.push(self.mortality_score(&lat));
            let z: f64 = rng.sample(StandardNormal);
            sev.push(self.los_score(&lat) + self.config.los.noise * z);
        }
        let target = self.config.mortality.prevalence;
        let mean_risk = |b: f64| mort.iter().map(|s| sigmoid(s + b)).sum::<f64>() / mort.len() as f64;
        let (mut lo, mut hi) = (-60.0, 60.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mean_risk(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.mortality_bias = 0.5 * (lo + hi);

        sev.sort_by(f64::total_cmp);
        let mut cum = 0.0;
        for (k, p) in self.config.los.priors[..3].iter().enumerate() {
            cum += p;
            let idx = ((cum * sev.len() as f64) as usize).min(sev.len() - 1);
            self.los_cuts[k] = sev[idx];
        }
    }

    fn draw_latents(&self, rng: &mut ChaCha8Rng) -> Latents {
        let c = &self.config;
        let t = categorical(rng, &c.t_probs) + 2;
        let span = c.horizon_hours as f64 - (t - 1) as f64 * c.min_snapshot_gap;
        let mut base: Vec<f64> = (0..t).map(|_| rng.random::<f64>() * span).collect();
        base.sort_by(f64::total_cmp);
        let times = base
            .iter()
            .enumerate()
            .map(|(i, b)| b + i as f64 * c.min_snapshot_gap)
            .collect();
        let statics = self
            .prototypes
            .iter()
            .map(|mu| {
                mu.iter()
                    .map(|m| m + c.static_spread * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let mut labels = vec![vec![vec![0i8; c.diseases]; c.regions]; t - 1];
        let mut drift = vec![vec![vec![0.0; c.diseases]; c.regions]; t - 1];
        for i in 0..t - 1 {
            for r in 0..c.regions {
                for k in 0..c.diseases {
                    let y = categorical(rng, &c.label_prior(k)) as i8 - 1;
                    let magnitude = c.drift_scale * rng.random_range(0.5..1.5);
                    labels[i][r][k] = y;
                    drift[i][r][k] = y as f64 * magnitude;
                }
            }
        }
        let phys = gaussian_vec(rng, c.phys_dim);
        Latents {
            times,
            statics,
            labels,
            drift,
            phys,
        }
    }

    /// Per-region mean drift over intervals and diseases.
    fn region_drift(lat: &Latents, r: usize) -> f64 {
        let n = (lat.drift.len() * lat.drift[0][r].len()) as f64;
        lat.drift.iter().map(|iv| iv[r].iter().sum::<f64>()).sum::<f64>() / n
    }

    fn mortality_score(&self, lat: &Latents) -> f64 {
        let m = &self.config.mortality;
        let mut dyn_term = 0.0;
        let mut static_term = 0.0;
        for (r, w) in self.region_weights.iter().enumerate() {
            dyn_term -= w * Self::region_drift(lat, r);
            static_term += w * dot(&self.mort_static_dir, &lat.statics[r]);
        }
        m.w_dynamic * dyn_term + m.w_static * static_term + m.w_phys * dot(&self.mort_phys_dir, &lat.phys)
    }

    fn los_score(&self, lat: &Latents) -> f64 {
        let l = &self.config.los;
        let mut dyn_term = 0.0;
        let mut static_term = 0.0;
        for (r, w) in self.los_region_weights.iter().enumerate() {
            dyn_term -= w * Self::region_drift(lat, r);
            static_term += w * dot(&self.los_static_dir, &lat.statics[r]);
        }
        l.w_dynamic * dyn_term + l.w_static * static_term + l.w_phys * dot(&self.los_phys_dir, &lat.phys)
    }

    /// Episode `index` of this cohort; deterministic in `(config.seed, index)`.
    pub fn episode(&self, index: u64) -> (Episode, HiddenFactors) {
        let mut rng = stream(self.config.seed, streams::EPISODE_BASE + index);
        self.episode_from_rng(&mut rng, format!("P{index:06}"))
    }

    fn episode_from_rng(&self, rng: &mut ChaCha8Rng, patient_id: String) -> (Episode, HiddenFactors) {
        let c = &self.config;
        let lat = self.draw_latents(rng);
        let t = lat.times.len();

        // cumulative dynamic state per snapshot, zero at the first one
        let mut state = vec![vec![vec![0.0; c.diseases]; c.regions]; t];
        for i in 1..t {
            for r in 0..c.regions {
                for k in 0..c.diseases {
                    state[i][r][k] = state[i - 1][r][k] + lat.drift[i - 1][r][k];
                }
            }
        }

        let region_features = (0..t)
            .map(|i| {
                (0..c.regions)
                    .map(|r| {
                        let a = self.static_mix.apply(&lat.statics[r]);
                        let b = self.dynamic_mix.apply(&state[i][r]);
                        a.iter()
                            .zip(&b)
                            .map(|(x, y)| x + y + c.feature_noise * rng.sample::<f64, _>(StandardNormal))
                            .collect()
                    })
                    .collect()
            })
            .collect();

        let pooled: Vec<Vec<f64>> = state
            .iter()
            .map(|snap| {
                (0..c.diseases)
                    .map(|k| snap.iter().map(|reg| reg[k]).sum::<f64>() / c.regions as f64)
                    .collect()
            })
            .collect();
        let ehr_times: Vec<f64> = (0..=c.horizon_hours).map(|j| j as f64).collect();
        let ehr_values = ehr_times
            .iter()
            .map(|&tj| {
                let mut z = interpolate(&lat.times, &pooled, tj);
                z.extend_from_slice(&lat.phys);
                self.ehr_mix
                    .apply(&z)
                    .into_iter()
                    .map(|v| v + c.ehr_noise * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();

        let mean_static: Vec<f64> = (0..c.static_dim)
            .map(|q| lat.statics.iter().map(|s| s[q]).sum::<f64>() / c.regions as f64)
            .collect();
        let demographics = self
            .dem_mix
            .apply(&mean_static)
            .into_iter()
            .map(|v| v + c.dem_noise * rng.sample::<f64, _>(StandardNormal))
            .collect();

        let progression_labels = lat
            .labels
            .iter()
            .map(|iv| {
                iv.iter()
                    .map(|reg| {
                        reg.iter()
                            .map(|&y| (rng.random::<f64>() < c.annotation_rate).then_some(y))
                            .collect()
                    })
                    .collect()
            })
            .collect();

        let risk = sigmoid(self.mortality_score(&lat) + self.mortality_bias);
        let mortality = u8::from(rng.random::<f64>() < risk);
        let z: f64 = rng.sample(StandardNormal);
        let severity = self.los_score(&lat) + c.los.noise * z;
        let los_class = self.los_cuts.iter().filter(|cut| severity > **cut).count() as u8;

        let episode = Episode {
            patient_id: patient_id.clone(),
            snapshot_times: lat.times,
            region_features,
            ehr_times,
            ehr_values,
            demographics,
            progression_labels,
            mortality,
            los_class,
        };
        let hidden = HiddenFactors {
            patient_id,
            hidden_static: lat.statics,
            hidden_dynamic: lat.drift,
            physiologic: lat.phys,
        };
        (episode, hidden)
    }
}

/// Piecewise-linear interpolation of `values` (one row per knot), held
/// constant outside the knot range.
fn interpolate(knots: &[f64], values: &[Vec<f64>], t: f64) -> Vec<f64> {
    if t <= knots[0] {
        return values[0].clone();
    }
    let last = knots.len() - 1;
    if t >= knots[last] {
        return values[last].clone();
    }
    let i = knots.windows(2).position(|w| t >= w[0] && t <= w[1]).unwrap_or(0);
    let w = (t - knots[i]) / (knots[i + 1] - knots[i]);
    values[i]
        .iter()
        .zip(&values[i + 1])
        .map(|(a, b)| a + w * (b - a))
        .collect()
}

/// One episode drawn with an explicit per-episode seed.
pub fn generate_episode(config: &CohortConfig, seed: u64) -> Result<(Episode, HiddenFactors)> {
    let g = CohortGenerator::new(config)?;
    let mut rng = stream(seed, streams::EPISODE_BASE);
    Ok(g.episode_from_rng(&mut rng, format!("S{seed}")))
}

/// The full cohort described by `config`, with the configured EHR missingness applied.
pub fn generate_cohort(config: &CohortConfig) -> Result<(Vec<Episode>, Vec<HiddenFactors>)> {
    let g = CohortGenerator::new(config)?;
    let mut episodes = Vec::with_capacity(config.n_patients);
    let mut hidden = Vec::with_capacity(config.n_patients);
    for i in 0..config.n_patients as u64 {
        let (mut e, h) = g.episode(i);
        if config.missing_ehr_rate > 0.0 {
            e = inject_missing_ehr(&e, config.missing_ehr_rate, config.seed ^ (streams::MISSING_BASE + i))?;
        }
        episodes.push(e);
        hidden.push(h);
    }
    Ok((episodes, hidden))
}
