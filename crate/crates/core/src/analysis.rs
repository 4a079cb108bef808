//! Post-training diagnostics: linear probes against hidden factors, reversal
//! statistics, and per-region attention export.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{Episode, HiddenFactors};
use crate::error::{Error, Result};
use crate::metrics::argmax;
use crate::model::{Model, PairFeatures, Task};
use crate::progression::{negate_label, present_slots};
use crate::train::csv_err;

const RIDGE: f64 = 1e-6;

/// Least-squares affine map fitted on `(x, y)` rows.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    /// `(in + 1) x out`, last row is the intercept
    coef: DMatrix<f64>,
}

fn design(x: &[Vec<f64>]) -> DMatrix<f64> {
    let cols = x[0].len() + 1;
    DMatrix::from_fn(x.len(), cols, |i, j| if j + 1 == cols { 1.0 } else { x[i][j] })
}

impl LinearProbe {
    pub fn fit(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::dim(format!("probe needs matching nonempty rows ({} vs {})", x.len(), y.len())));
        }
        let a = design(x);
        let b = DMatrix::from_fn(y.len(), y[0].len(), |i, j| y[i][j]);
        let mut gram = a.transpose() * &a;
        for i in 0..gram.nrows() {
            gram[(i, i)] += RIDGE;
        }
        let rhs = a.transpose() * b;
        let coef = gram
            .cholesky()
            .ok_or_else(|| Error::numeric("probe normal equations are not positive definite"))?
            .solve(&rhs);
        Ok(Self { coef })
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let p = design(x) * &self.coef;
        (0..p.nrows()).map(|i| p.row(i).iter().copied().collect()).collect()
    }
}

/// Residual sum of squares over total sum of squares around the target mean.
pub fn relative_error(pred: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let n = y.len() as f64;
    let dims = y[0].len();
    let mean: Vec<f64> = (0..dims).map(|j| y.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut rss = 0.0;
    let mut tss = 0.0;
    for (p, t) in pred.iter().zip(y) {
        for j in 0..dims {
            rss += (p[j] - t[j]).powi(2);
            tss += (t[j] - mean[j]).powi(2);
        }
    }
    if tss == 0.0 {
        0.0
    } else {
        rss / tss
    }
}

/// Fits on the first set and reports relative error on the second.
pub fn probe_error(train_x: &[Vec<f64>], train_y: &[Vec<f64>], test_x: &[Vec<f64>], test_y: &[Vec<f64>]) -> Result<f64> {
    let p = LinearProbe::fit(train_x, train_y)?;
    Ok(relative_error(&p.predict(test_x), test_y))
}

/// Pair features with the matching hidden factors, one row per (interval, region).
#[derive(Debug, Clone, Default)]
pub struct ProbeRows {
    pub statics: Vec<Vec<f64>>,
    pub dynamics: Vec<Vec<f64>>,
    pub static_factor: Vec<Vec<f64>>,
    pub drift_factor: Vec<Vec<f64>>,
}

pub fn probe_rows(model: &Model, episodes: &[&Episode], hidden: &[&HiddenFactors]) -> Result<ProbeRows> {
    if model.variant == crate::model::Variant::A4 {
        return Err(Error::contract("probes need a model with static/dynamic splitting"));
    }
    let feats: Vec<Result<PairFeatures>> = episodes.par_iter().map(|ep| model.pair_features(ep)).collect();
    let mut out = ProbeRows::default();
    for ((f, ep), h) in feats.into_iter().zip(episodes).zip(hidden) {
        let f = f?;
        if h.patient_id != ep.patient_id {
            return Err(Error::contract(format!("oracle {} does not match {}", h.patient_id, ep.patient_id)));
        }
        let r = ep.num_regions();
        for (row, (s, d)) in f.statics.into_iter().zip(f.dynamics).enumerate() {
            out.statics.push(s);
            out.dynamics.push(d);
            out.static_factor.push(h.hidden_static[row % r].clone());
            out.drift_factor.push(h.hidden_dynamic[row / r][row % r].clone());
        }
    }
    Ok(out)
}

/// Disentanglement diagnostics on held-out episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub mean_abs_cos: f64,
    pub static_from_s: f64,
    pub static_from_d: f64,
    pub drift_from_s: f64,
    pub drift_from_d: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::autodiff::COSINE_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::autodiff::COSINE_EPS);
    dot / (na * nb)
}

pub fn probe_report(fit: &ProbeRows, test: &ProbeRows) -> Result<ProbeReport> {
    let cos: f64 = test
        .statics
        .iter()
        .zip(&test.dynamics)
        .map(|(s, d)| cosine(s, d).abs())
        .sum::<f64>()
        / test.statics.len().max(1) as f64;
    Ok(ProbeReport {
        mean_abs_cos: cos,
        static_from_s: probe_error(&fit.statics, &fit.static_factor, &test.statics, &test.static_factor)?,
        static_from_d: probe_error(&fit.dynamics, &fit.static_factor, &test.dynamics, &test.static_factor)?,
        drift_from_s: probe_error(&fit.statics, &fit.drift_factor, &test.statics, &test.drift_factor)?,
        drift_from_d: probe_error(&fit.dynamics, &fit.drift_factor, &test.dynamics, &test.drift_factor)?,
    })
}

/// Behaviour of the progression heads and statics under pair reversal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReversalReport {
    /// annotated slots with a nonzero label
    pub nonzero_slots: usize,
    /// share of those whose reversed prediction is the negation of a nonzero forward prediction
    pub flip_rate: f64,
    pub mean_static_gap: f64,
    pub mean_static_norm: f64,
}

pub fn reversal_report(model: &Model, episodes: &[&Episode]) -> Result<ReversalReport> {
    if !model.has_reversal_heads() {
        return Err(Error::contract("reversal report needs progression heads"));
    }
    let feats: Vec<Result<PairFeatures>> = episodes.par_iter().map(|ep| model.pair_features(ep)).collect();
    let (mut slots, mut flips, mut rows) = (0usize, 0usize, 0usize);
    let (mut gap, mut norm) = (0.0, 0.0);
    for (f, ep) in feats.into_iter().zip(episodes) {
        let f = f?;
        for (s, sr) in f.statics.iter().zip(&f.statics_rev) {
            gap += s.iter().zip(sr).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            norm += s.iter().map(|a| a * a).sum::<f64>();
            rows += 1;
        }
        for (row, k, y) in present_slots(&ep.progression_labels) {
            if y == 0 {
                continue;
            }
            slots += 1;
            let fwd = argmax(f.forward_logits[k].row(row)) as i8 - 1;
            let rev = argmax(f.reversed_logits[k].row(row)) as i8 - 1;
            if fwd != 0 && rev == negate_label(fwd)? {
                flips += 1;
            }
        }
    }
    Ok(ReversalReport {
        nonzero_slots: slots,
        flip_rate: if slots == 0 { 0.0 } else { flips as f64 / slots as f64 },
        mean_static_gap: gap / rows.max(1) as f64,
        mean_static_norm: norm / rows.max(1) as f64,
    })
}

/// Mean normalized static-attention mass per region over `episodes`.
pub fn region_attention(model: &Model, episodes: &[Episode]) -> Result<Vec<f64>> {
    let per: Vec<Result<Option<Vec<f64>>>> = episodes
        .par_iter()
        .map(|ep| model.predict(ep).map(|p| p.region_attention))
        .collect();
    let mut total = vec![0.0; model.dims.regions];
    let mut n = 0usize;
    for p in per {
        let Some(m) = p? else {
            return Err(Error::contract(format!(
                "variant {} has no static attention to export",
                model.variant
            )));
        };
        for (t, v) in total.iter_mut().zip(m) {
            *t += v;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::contract("no episodes to export attention from"));
    }
    for t in &mut total {
        *t /= n as f64;
    }
    Ok(total)
}

/// One `(task, region, weight)` row per region.
pub fn write_region_attention(task: Task, weights: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["task", "region", "weight"]).map_err(csv_err)?;
    for (r, v) in weights.iter().enumerate() {
        w.write_record([task.name().to_string(), r.to_string(), v.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::generate_cohort;
    use crate::config::ExperimentConfig;
    use proptest::prelude::*;

    #[test]
    fn probe_recovers_affine_map() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64 * 0.3).sin(), (i as f64 * 0.7).cos()]).collect();
        let y: Vec<Vec<f64>> = x.iter().map(|r| vec![2.0 * r[0] - r[1] + 0.5]).collect();
        let p = LinearProbe::fit(&x, &y).unwrap();
        assert!(relative_error(&p.predict(&x), &y) < 1e-10);
    }

    #[test]
    fn unrelated_target_has_unit_scale_error() {
        let x: Vec<Vec<f64>> = (0..200).map(|i| vec![(i as f64 * 1.3).sin()]).collect();
        let y: Vec<Vec<f64>> = (0..200).map(|i| vec![(i as f64 * 2.9 + 0.4).cos()]).collect();
        let e = probe_error(&x[..100], &y[..100], &x[100..], &y[100..]).unwrap();
        assert!(e > 0.8, "{e}");
    }

    proptest! {
        #[test]
        fn relative_error_matches_definition(
            rows in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..30)
        ) {
            let y: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.0]).collect();
            let p: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.1]).collect();
            let mean = rows.iter().map(|r| r.0).sum::<f64>() / rows.len() as f64;
            let rss: f64 = rows.iter().map(|r| (r.1 - r.0).powi(2)).sum();
            let tss: f64 = rows.iter().map(|r| (r.0 - mean).powi(2)).sum();
            prop_assume!(tss > 1e-9);
            prop_assert!((relative_error(&p, &y) - rss / tss).abs() < 1e-9 * (1.0 + rss / tss));
        }
    }

    #[test]
    fn reports_on_untrained_model_are_well_formed() {
        let c = ExperimentConfig::micro();
        let (eps, hidden) = generate_cohort(&c.cohort).unwrap();
        let m = Model::new(c.dims(), c.model.clone(), c.task, c.ablation, 0).unwrap();
        let e: Vec<&Episode> = eps.iter().collect();
        let h: Vec<&HiddenFactors> = hidden.iter().collect();
        let rows = probe_rows(&m, &e, &h).unwrap();
        assert_eq!(rows.statics.len(), 5 * 2 * 3);
        assert_eq!(rows.static_factor[0].len(), c.cohort.static_dim);
        assert_eq!(rows.drift_factor[0].len(), c.cohort.diseases);
        let rev = reversal_report(&m, &e).unwrap();
        assert!((0.0..=1.0).contains(&rev.flip_rate));
        assert!(rev.mean_static_norm > 0.0);
        let att = region_attention(&m, &eps).unwrap();
        assert!((att.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
