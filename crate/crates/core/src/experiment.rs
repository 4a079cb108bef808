//! Multi-seed experiment runners: ablation rows, grid search, missing-EHR
//! robustness sweeps, and flat metric record files.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{grad_check_report, GradCheckReport, Tape, Var};
use crate::cohort::{generate_cohort, Episode};
use crate::config::{ExperimentConfig, GridSpec, SelectionMetric};
use crate::error::{Error, Result};
use crate::metrics::MetricSummary;
use crate::model::{Model, Variant};
use crate::train::{csv_err, evaluate, train, with_missing_ehr, History};

/// Central-difference check of the full training loss, averaged over the
/// cohort generated with `seed`, for a model initialized with `seed`.
pub fn composite_grad_check(config: &ExperimentConfig, seed: u64, step: f64) -> Result<GradCheckReport> {
    let mut cohort = config.cohort.clone();
    cohort.seed = seed;
    let (eps, _) = generate_cohort(&cohort)?;
    let model = Model::new(config.dims(), config.model.clone(), config.task, config.ablation, seed)?;
    let w = config.loss_weights();
    let reverse = model.needs_reverse(&w);
    let scale = 1.0 / eps.len() as f64;
    grad_check_report(
        &model.params,
        |tape: &mut Tape, store| {
            let mut local = model.clone();
            local.params = store.clone();
            let mut total: Option<Var> = None;
            for ep in &eps {
                let fwd = local.forward(tape, ep, None, reverse)?;
                let (l, _) = local.loss(tape, ep, &fwd, &w)?;
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            let total = total.ok_or_else(|| Error::contract("gradient check needs episodes"))?;
            Ok(tape.scale(total, scale))
        },
        step,
        None,
    )
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// One trained seed evaluated on its held-out test split.
pub struct SeedRun {
    pub seed: u64,
    pub model: Model,
    pub history: History,
    pub test: MetricSummary,
}

pub fn run_seed(config: &ExperimentConfig, episodes: &[Episode], seed: u64) -> Result<SeedRun> {
    let outcome = train(config, episodes, seed)?;
    let test_eps: Vec<Episode> = outcome.split.test.iter().map(|&i| episodes[i].clone()).collect();
    let test = evaluate(&outcome.model, &test_eps)?.summary;
    Ok(SeedRun {
        seed,
        model: outcome.model,
        history: outcome.history,
        test,
    })
}

/// Per-metric mean and spread over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Aggregates every metric defined in at least one summary, in first-seen order.
pub fn aggregate(summaries: &[&MetricSummary]) -> Vec<Aggregate> {
    let mut names: Vec<&'static str> = Vec::new();
    for s in summaries {
        for (name, _) in s.pairs() {
            if !names.contains(&name) {
                names.push(name);
            }
        }
    }
    names
        .into_iter()
        .map(|name| {
            let vals: Vec<f64> = summaries
                .iter()
                .filter_map(|s| s.pairs().into_iter().find(|(n, _)| *n == name).map(|(_, v)| v))
                .collect();
            let (mean, std) = mean_std(&vals);
            Aggregate {
                metric: name.to_string(),
                mean,
                std,
                n: vals.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedKey {
    Seed(u64),
    Mean,
    Std,
}

impl fmt::Display for SeedKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeedKey::Seed(s) => write!(f, "{s}"),
            SeedKey::Mean => f.write_str("mean"),
            SeedKey::Std => f.write_str("std"),
        }
    }
}

/// Row of the flat metric file: `(task, variant, metric, seed, value)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub task: String,
    pub variant: String,
    pub metric: String,
    pub seed: SeedKey,
    pub value: f64,
}

pub fn write_records(records: &[MetricRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["task", "variant", "metric", "seed", "value"]).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.task.clone(),
            r.variant.clone(),
            r.metric.clone(),
            r.seed.to_string(),
            r.value.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Test metrics of one variant over the configured seeds.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub task: String,
    /// `(seed, best validation metric, test summary)`
    pub runs: Vec<(u64, f64, MetricSummary)>,
    pub aggregate: Vec<Aggregate>,
}

impl AblationRow {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.aggregate.iter().find(|a| a.metric == metric).map(|a| a.mean)
    }

    /// Per-seed rows followed by mean and std rows.
    pub fn records(&self) -> Vec<MetricRecord> {
        let rec = |metric: &str, seed, value| MetricRecord {
            task: self.task.clone(),
            variant: self.variant.to_string(),
            metric: metric.to_string(),
            seed,
            value,
        };
        let mut out = Vec::new();
        for (seed, _, s) in &self.runs {
            for (m, v) in s.pairs() {
                out.push(rec(m, SeedKey::Seed(*seed), v));
            }
        }
        for a in &self.aggregate {
            out.push(rec(&a.metric, SeedKey::Mean, a.mean));
            out.push(rec(&a.metric, SeedKey::Std, a.std));
        }
        out
    }
}

/// Trains `variant` on every configured seed and reports test metrics.
pub fn run_ablation(variant: Variant, config: &ExperimentConfig, episodes: &[Episode]) -> Result<AblationRow> {
    let mut cfg = config.clone();
    cfg.ablation = variant;
    cfg.validate()?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let r = run_seed(&cfg, episodes, seed)?;
        runs.push((seed, r.history.best_metric, r.test));
    }
    let aggregate = aggregate(&runs.iter().map(|(_, _, s)| s).collect::<Vec<_>>());
    Ok(AblationRow {
        variant,
        task: cfg.task.name().to_string(),
        runs,
        aggregate,
    })
}

/// Summary table: one row per (variant, metric) with mean and std.
pub fn write_ablation_table(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["variant", "metric", "mean", "std", "n"]).map_err(csv_err)?;
    for row in rows {
        for a in &row.aggregate {
            w.write_record([
                row.variant.to_string(),
                a.metric.clone(),
                a.mean.to_string(),
                a.std.to_string(),
                a.n.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One point of the hyperparameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridPoint {
    pub learning_rate: f64,
    pub dropout: f64,
    pub hidden: usize,
    pub lambda_pred: f64,
    pub lambda_orth: f64,
    pub lambda_temp: f64,
    pub lambda_pae: f64,
}

impl GridPoint {
    fn key(&self) -> [f64; 7] {
        [
            self.learning_rate,
            self.dropout,
            self.hidden as f64,
            self.lambda_pred,
            self.lambda_orth,
            self.lambda_temp,
            self.lambda_pae,
        ]
    }

    /// Lexicographic order over the fields in declaration order.
    pub fn lex_cmp(&self, other: &Self) -> Ordering {
        self.key()
            .iter()
            .zip(other.key().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }

    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        c.train.learning_rate = self.learning_rate;
        c.model.dropout = self.dropout;
        c.model.hidden = self.hidden;
        let mut w = base.loss.unwrap_or_else(|| crate::model::LossWeights::preset(base.task));
        w.pred = self.lambda_pred;
        w.orth = self.lambda_orth;
        w.temp = self.lambda_temp;
        w.pae = self.lambda_pae;
        c.loss = Some(w);
        c.grid = None;
        c
    }
}

/// Cartesian product of the axes in lexicographic order; an empty axis
/// contributes the base config's value.
pub fn grid_points(axes: &GridSpec, base: &ExperimentConfig) -> Vec<GridPoint> {
    let w = base.loss.unwrap_or_else(|| crate::model::LossWeights::preset(base.task));
    let or = |axis: &[f64], v: f64| if axis.is_empty() { vec![v] } else { axis.to_vec() };
    let hidden = if axes.hidden.is_empty() { vec![base.model.hidden] } else { axes.hidden.clone() };
    let mut out = Vec::new();
    for learning_rate in or(&axes.learning_rate, base.train.learning_rate) {
        for dropout in or(&axes.dropout, base.model.dropout) {
            for &hidden in &hidden {
                for lambda_pred in or(&axes.lambda_pred, w.pred) {
                    for lambda_orth in or(&axes.lambda_orth, w.orth) {
                        for lambda_temp in or(&axes.lambda_temp, w.temp) {
                            for lambda_pae in or(&axes.lambda_pae, w.pae) {
                                out.push(GridPoint {
                                    learning_rate,
                                    dropout,
                                    hidden,
                                    lambda_pred,
                                    lambda_orth,
                                    lambda_temp,
                                    lambda_pae,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    out.sort_by(GridPoint::lex_cmp);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeaderboardEntry {
    pub rank: usize,
    pub point: GridPoint,
    /// mean over seeds of the best validation metric
    pub val_metric: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub best: ExperimentConfig,
    pub metric: SelectionMetric,
    pub leaderboard: Vec<LeaderboardEntry>,
}

impl GridResult {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record([
            "rank",
            "learning_rate",
            "dropout",
            "hidden",
            "lambda_pred",
            "lambda_orth",
            "lambda_temp",
            "lambda_pae",
            self.metric.name(),
        ])
        .map_err(csv_err)?;
        for e in &self.leaderboard {
            let p = &e.point;
            w.write_record([
                e.rank.to_string(),
                p.learning_rate.to_string(),
                p.dropout.to_string(),
                p.hidden.to_string(),
                p.lambda_pred.to_string(),
                p.lambda_orth.to_string(),
                p.lambda_temp.to_string(),
                p.lambda_pae.to_string(),
                e.val_metric.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Exhaustive sweep. Points are scored by validation metric averaged over
/// the configured seeds; ties go to the lexicographically smaller point.
pub fn grid_search(config: &ExperimentConfig, grid: &GridSpec, episodes: &[Episode]) -> Result<GridResult> {
    let points = grid_points(grid, config);
    let scored: Vec<Result<(GridPoint, Vec<f64>)>> = points
        .par_iter()
        .map(|p| {
            let cfg = p.apply(config);
            cfg.validate()?;
            let per_seed = cfg
                .seeds
                .iter()
                .map(|&s| train(&cfg, episodes, s).map(|o| o.history.best_metric))
                .collect::<Result<Vec<f64>>>()?;
            Ok((*p, per_seed))
        })
        .collect();
    let mut board = Vec::with_capacity(scored.len());
    for s in scored {
        let (point, per_seed) = s?;
        let val_metric = mean_std(&per_seed).0;
        board.push(LeaderboardEntry {
            rank: 0,
            point,
            val_metric,
            per_seed,
        });
    }
    board.sort_by(|a, b| b.val_metric.total_cmp(&a.val_metric).then_with(|| a.point.lex_cmp(&b.point)));
    for (i, e) in board.iter_mut().enumerate() {
        e.rank = i + 1;
    }
    Ok(GridResult {
        best: board[0].point.apply(config),
        metric: config.selection_metric(),
        leaderboard: board,
    })
}

/// One (rate, seed) run of the missing-EHR sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessRun {
    pub rate: f64,
    pub seed: u64,
    /// validation metric averaged over all trained epochs
    pub mean_val: f64,
    pub best_val: f64,
    pub epochs: usize,
    /// training and validation intervals left without an EHR row
    pub empty_intervals: usize,
    /// no loss term or metric was NaN or infinite and training did not diverge
    pub finite: bool,
    pub test: MetricSummary,
}

#[derive(Debug, Clone)]
pub struct RobustnessTable {
    pub task: String,
    pub metric: SelectionMetric,
    pub rates: Vec<f64>,
    pub runs: Vec<RobustnessRun>,
}

impl RobustnessTable {
    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = Vec::new();
        for r in &self.runs {
            if !s.contains(&r.seed) {
                s.push(r.seed);
            }
        }
        s
    }

    /// Mean validation metric of `seed` at each rate, rates ascending.
    pub fn curve(&self, seed: u64) -> Vec<(f64, f64)> {
        let mut c: Vec<(f64, f64)> = self
            .runs
            .iter()
            .filter(|r| r.seed == seed)
            .map(|r| (r.rate, r.mean_val))
            .collect();
        c.sort_by(|a, b| a.0.total_cmp(&b.0));
        c
    }

    /// Seeds whose mean validation metric never rises as the rate grows.
    pub fn monotone_seeds(&self) -> Vec<u64> {
        self.seeds()
            .into_iter()
            .filter(|&s| self.curve(s).windows(2).all(|w| w[1].1 <= w[0].1))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.runs.iter().all(|r| r.finite)
    }

    /// Rate by metric table: mean and std over seeds of the mean validation
    /// metric and of every test metric.
    pub fn summary(&self) -> Vec<(f64, Vec<Aggregate>)> {
        self.rates
            .iter()
            .map(|&rate| {
                let runs: Vec<&RobustnessRun> = self.runs.iter().filter(|r| r.rate == rate).collect();
                let vals: Vec<f64> = runs.iter().map(|r| r.mean_val).collect();
                let (mean, std) = mean_std(&vals);
                let mut aggs = vec![Aggregate {
                    metric: format!("val_{}_epoch_mean", self.metric),
                    mean,
                    std,
                    n: vals.len(),
                }];
                aggs.extend(
                    aggregate(&runs.iter().map(|r| &r.test).collect::<Vec<_>>())
                        .into_iter()
                        .map(|mut a| {
                            a.metric = format!("test_{}", a.metric);
                            a
                        }),
                );
                (rate, aggs)
            })
            .collect()
    }

    pub fn write_table(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["rate", "metric", "mean", "std", "n"]).map_err(csv_err)?;
        for (rate, aggs) in self.summary() {
            for a in aggs {
                w.write_record([
                    rate.to_string(),
                    a.metric,
                    a.mean.to_string(),
                    a.std.to_string(),
                    a.n.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_runs(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record([
            "rate",
            "seed",
            "epochs",
            "val_epoch_mean",
            "val_best",
            "empty_intervals",
            "finite",
            "test_accuracy",
            "test_macro_f1",
            "test_auroc",
            "test_auprc",
        ])
        .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.runs {
            w.write_record([
                r.rate.to_string(),
                r.seed.to_string(),
                r.epochs.to_string(),
                r.mean_val.to_string(),
                r.best_val.to_string(),
                r.empty_intervals.to_string(),
                r.finite.to_string(),
                r.test.accuracy.to_string(),
                r.test.macro_f1.to_string(),
                opt(r.test.auroc),
                opt(r.test.auprc),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn history_is_finite(h: &History) -> bool {
    h.diverged.is_none()
        && h.epochs.iter().all(|e| {
            let t = &e.train;
            [t.total, t.pred, t.orth, t.temp, t.pae, e.val_metric]
                .iter()
                .chain(e.val.pairs().iter().map(|(_, v)| v))
                .all(|v| v.is_finite())
        })
}

/// Trains every configured seed at each missing-EHR rate. Rows are dropped
/// from training and validation episodes; the test split stays complete.
pub fn robustness(config: &ExperimentConfig, episodes: &[Episode], rates: &[f64]) -> Result<RobustnessTable> {
    if rates.is_empty() {
        return Err(Error::contract("robustness needs at least one rate"));
    }
    let mut jobs = Vec::new();
    for &rate in rates {
        let mut cfg = config.clone();
        cfg.train.missing_ehr_rate = rate;
        cfg.validate()?;
        for &seed in &config.seeds {
            jobs.push((rate, seed, cfg.clone()));
        }
    }
    let runs = jobs
        .par_iter()
        .map(|(rate, seed, cfg)| {
            let r = run_seed(cfg, episodes, *seed)?;
            let split = crate::train::split_indices(
                episodes.len(),
                cfg.train.train_fraction,
                cfg.train.val_fraction,
                *seed,
            )?;
            let mut seen = split.train.clone();
            seen.extend_from_slice(&split.val);
            let empty_intervals = with_missing_ehr(episodes, &seen, *rate, *seed)?
                .iter()
                .map(Episode::empty_intervals)
                .sum();
            let vals: Vec<f64> = r.history.epochs.iter().map(|e| e.val_metric).collect();
            Ok(RobustnessRun {
                rate: *rate,
                seed: *seed,
                mean_val: mean_std(&vals).0,
                best_val: r.history.best_metric,
                epochs: vals.len(),
                empty_intervals,
                finite: history_is_finite(&r.history),
                test: r.test,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RobustnessTable {
        task: config.task.name().to_string(),
        metric: config.selection_metric(),
        rates: rates.to_vec(),
        runs,
    })
}
