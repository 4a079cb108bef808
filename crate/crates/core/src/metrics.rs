//! Classification metrics and region-to-disease label aggregation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the largest score; ties resolve to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub true_class: usize,
    pub predicted_class: usize,
    pub scores: Vec<f64>,
    pub task: String,
    pub region: Option<usize>,
    pub disease: Option<usize>,
}

impl PredictionRecord {
    /// Builds a record from post-softmax scores, deriving the predicted class.
    pub fn from_scores(task: &str, true_class: usize, scores: Vec<f64>) -> Result<Self> {
        let total: f64 = scores.iter().sum();
        if scores.is_empty() || (total - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "scores must sum to 1 (got {total} over {} classes)",
                scores.len()
            )));
        }
        if true_class >= scores.len() {
            return Err(Error::Label(format!(
                "true class {true_class} out of range for {} classes",
                scores.len()
            )));
        }
        Ok(Self {
            true_class,
            predicted_class: argmax(&scores),
            scores,
            task: task.to_string(),
            region: None,
            disease: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Macro precision/recall/F1 from parallel label slices.
pub fn macro_prf1_labels(truth: &[usize], pred: &[usize]) -> Result<Prf1> {
    if truth.is_empty() || truth.len() != pred.len() {
        return Err(Error::contract(format!(
            "macro_prf1 needs equal non-empty inputs (truth {}, pred {})",
            truth.len(),
            pred.len()
        )));
    }
    let classes: BTreeSet<usize> = truth.iter().copied().collect();
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for &c in &classes {
        let tp = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p == c).count();
        let pred_c = pred.iter().filter(|p| **p == c).count();
        let true_c = truth.iter().filter(|t| **t == c).count();
        let p = ratio(tp, pred_c);
        let r = ratio(tp, true_c);
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        p_sum += p;
        r_sum += r;
        f_sum += f;
    }
    let n = classes.len() as f64;
    Ok(Prf1 {
        precision: p_sum / n,
        recall: r_sum / n,
        f1: f_sum / n,
    })
}

pub fn macro_prf1(records: &[PredictionRecord]) -> Result<Prf1> {
    let (t, p) = split_labels(records);
    macro_prf1_labels(&t, &p)
}

fn split_labels(records: &[PredictionRecord]) -> (Vec<usize>, Vec<usize>) {
    records.iter().map(|r| (r.true_class, r.predicted_class)).unzip()
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> Result<f64> {
    if truth.is_empty() || truth.len() != pred.len() {
        return Err(Error::contract("accuracy needs equal non-empty inputs"));
    }
    let hits = truth.iter().zip(pred).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::numeric("NaN score"));
    }
    Ok(())
}

/// Mann-Whitney AUROC with ties counted one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_binary(scores, labels)?;
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both positive and negative labels".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision: sum over distinct descending thresholds of `(R_n - R_{n-1}) * P_n`.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_binary(scores, labels)?;
    let n_pos = labels.iter().filter(|l| **l).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs at least one positive".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            seen += 1;
            if labels[k] {
                tp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

fn one_vs_rest<F>(records: &[PredictionRecord], metric: F) -> Result<f64>
where
    F: Fn(&[f64], &[bool]) -> Result<f64>,
{
    let k = records
        .first()
        .map(|r| r.scores.len())
        .ok_or_else(|| Error::contract("no records"))?;
    if k == 2 {
        let s: Vec<f64> = records.iter().map(|r| r.scores[1]).collect();
        let l: Vec<bool> = records.iter().map(|r| r.true_class == 1).collect();
        return metric(&s, &l);
    }
    let mut vals = Vec::new();
    for c in 0..k {
        let l: Vec<bool> = records.iter().map(|r| r.true_class == c).collect();
        if !l.iter().any(|v| *v) || l.iter().all(|v| *v) {
            continue;
        }
        let s: Vec<f64> = records.iter().map(|r| r.scores[c]).collect();
        vals.push(metric(&s, &l)?);
    }
    if vals.is_empty() {
        return Err(Error::UndefinedMetric(
            "one-vs-rest metric needs at least two classes in the truth".into(),
        ));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Binary AUROC on the positive-class score, or one-vs-rest macro average for more classes.
pub fn auroc_records(records: &[PredictionRecord]) -> Result<f64> {
    one_vs_rest(records, auroc)
}

pub fn auprc_records(records: &[PredictionRecord]) -> Result<f64> {
    one_vs_rest(records, auprc)
}

/// Cohen's kappa; 0 when chance agreement is 1.
pub fn cohens_kappa(truth: &[usize], pred: &[usize]) -> Result<f64> {
    if truth.is_empty() || truth.len() != pred.len() {
        return Err(Error::contract("cohens_kappa needs equal non-empty inputs"));
    }
    let k = truth.iter().chain(pred).max().copied().unwrap_or(0) + 1;
    let n = truth.len() as f64;
    let mut t_counts = vec![0usize; k];
    let mut p_counts = vec![0usize; k];
    for (&t, &p) in truth.iter().zip(pred) {
        t_counts[t] += 1;
        p_counts[p] += 1;
    }
    let p_o = accuracy(truth, pred)?;
    let p_e: f64 = t_counts
        .iter()
        .zip(&p_counts)
        .map(|(a, b)| (*a * *b) as f64)
        .sum::<f64>()
        / (n * n);
    if (1.0 - p_e).abs() < 1e-15 {
        return Ok(0.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// How region-level progression labels collapse to one disease label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    /// any worsened region wins, then any improved, else unchanged
    #[default]
    WorseningDominant,
    /// most frequent label; ties broken toward worsened, then improved
    Majority,
}

/// `region_labels` uses -1/0/+1 with `None` for unannotated regions.
pub fn disease_label_from_regions(
    region_labels: &[Option<i8>],
    rule: AggregationRule,
) -> Option<i8> {
    let present: Vec<i8> = region_labels.iter().flatten().copied().collect();
    if present.is_empty() {
        return None;
    }
    let count = |v: i8| present.iter().filter(|x| **x == v).count();
    match rule {
        AggregationRule::WorseningDominant => Some(if count(-1) > 0 {
            -1
        } else if count(1) > 0 {
            1
        } else {
            0
        }),
        AggregationRule::Majority => {
            let mut best = (-1i8, count(-1));
            for v in [1i8, 0] {
                if count(v) > best.1 {
                    best = (v, count(v));
                }
            }
            Some(best.0)
        }
    }
}

/// Metric bundle reported for a classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub kappa: f64,
    /// `None` when the evaluation split lacks a class needed for the curve.
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub n: usize,
}

impl MetricSummary {
    pub fn compute(records: &[PredictionRecord]) -> Result<Self> {
        let (t, p) = split_labels(records);
        let prf = macro_prf1_labels(&t, &p)?;
        let optional = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(Self {
            accuracy: accuracy(&t, &p)?,
            macro_precision: prf.precision,
            macro_recall: prf.recall,
            macro_f1: prf.f1,
            kappa: cohens_kappa(&t, &p)?,
            auroc: optional(auroc_records(records))?,
            auprc: optional(auprc_records(records))?,
            n: records.len(),
        })
    }

    /// `(name, value)` pairs for flat tabular output, skipping undefined metrics.
    pub fn pairs(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![
            ("accuracy", self.accuracy),
            ("macro_precision", self.macro_precision),
            ("macro_recall", self.macro_recall),
            ("macro_f1", self.macro_f1),
            ("kappa", self.kappa),
        ];
        if let Some(v) = self.auroc {
            out.push(("auroc", v));
        }
        if let Some(v) = self.auprc {
            out.push(("auprc", v));
        }
        out
    }
}
