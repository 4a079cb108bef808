//! Splits, batching, gradient accumulation, early stopping and evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, Tape};
use crate::cohort::{inject_missing_ehr, label_to_class, Episode};
use crate::config::{ExperimentConfig, SelectionMetric};
use crate::error::{Error, Result};
use crate::metrics::{MetricSummary, PredictionRecord};
use crate::model::{LossTerms, LossWeights, Model, Task};
use crate::optim::{cosine_lr, AdamW};
use crate::rng::{derive, stream, streams};

/// Episode indices of the train / validation / test partitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n` cut at the given fractions; every part must be nonempty.
pub fn split_indices(n: usize, train_fraction: f64, val_fraction: f64, seed: u64) -> Result<Split> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, streams::SPLIT));
    let n_train = (n as f64 * train_fraction).round() as usize;
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::contract(format!(
            "{n} episodes cannot fill train/val/test at {train_fraction}/{val_fraction}"
        )));
    }
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Split { train: idx, val, test })
}

/// Groups `indices` by snapshot count, shuffles within groups, cuts batches of
/// at most `batch_size`, then shuffles the batch order.
pub fn make_batches(episodes: &[Episode], indices: &[usize], batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = stream(seed, streams::SHUFFLE);
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        groups.entry(episodes[i].num_snapshots()).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, mut g) in groups {
        g.shuffle(&mut rng);
        batches.extend(g.chunks(batch_size.max(1)).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}

/// Loss and gradient of one episode. The dropout stream is keyed by the run
/// seed, the epoch and the episode index.
pub fn episode_gradient(
    model: &Model,
    ep: &Episode,
    weights: &LossWeights,
    dropout_key: Option<[u64; 3]>,
) -> Result<(Grads, LossTerms)> {
    let mut tape = Tape::new();
    let mut rng = dropout_key
        .filter(|_| model.config.dropout > 0.0)
        .map(|[s, e, i]| stream(derive(s, &[e, i]), streams::DROPOUT));
    let fwd = model.forward(&mut tape, ep, rng.as_mut(), model.needs_reverse(weights))?;
    let (loss, terms) = model.loss(&mut tape, ep, &fwd, weights)?;
    tape.backward(loss)?;
    let mut g = Grads::zeros_like(&model.params);
    tape.accumulate_param_grads(&mut g);
    if !g.is_finite() {
        return Err(Error::numeric(format!("{}: non-finite gradient", ep.patient_id)));
    }
    Ok((g, terms))
}

/// Mean gradient and mean loss terms of a micro-batch. Episodes run in
/// parallel; their gradients are summed in input order.
pub fn batch_gradient(
    model: &Model,
    batch: &[(usize, &Episode)],
    weights: &LossWeights,
    dropout: Option<(u64, u64)>,
) -> Result<(Grads, LossTerms)> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let parts: Vec<Result<(Grads, LossTerms)>> = batch
        .par_iter()
        .map(|(i, ep)| episode_gradient(model, ep, weights, dropout.map(|(s, e)| [s, e, *i as u64])))
        .collect();
    let mut sum = Grads::zeros_like(&model.params);
    let mut terms = LossTerms::default();
    for p in parts {
        let (g, t) = p?;
        sum.add_assign(&g);
        terms.add(&t);
    }
    let s = 1.0 / batch.len() as f64;
    sum.scale(s);
    terms.scale(s);
    Ok((sum, terms))
}

/// Owns the model and optimizer state across update steps.
pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Trainer {
    pub fn new(model: Model, weights: LossWeights, weight_decay: f64, seed: u64) -> Self {
        let opt = AdamW::new(&model.params, weight_decay);
        Self {
            model,
            opt,
            weights,
            seed,
        }
    }

    /// One optimizer update over a window of micro-batches. The applied
    /// gradient is the mean over every episode in the window.
    pub fn step(&mut self, window: &[Vec<(usize, &Episode)>], epoch: usize, lr: f64) -> Result<LossTerms> {
        let total: usize = window.iter().map(Vec::len).sum();
        if total == 0 {
            return Err(Error::contract("empty accumulation window"));
        }
        let mut acc = Grads::zeros_like(&self.model.params);
        let mut terms = LossTerms::default();
        for batch in window {
            let (mut g, mut t) = batch_gradient(&self.model, batch, &self.weights, Some((self.seed, epoch as u64)))?;
            let share = batch.len() as f64 / total as f64;
            g.scale(share);
            t.scale(share);
            acc.add_assign(&g);
            terms.add(&t);
        }
        self.opt.step(&mut self.model.params, &acc, lr);
        Ok(terms)
    }
}

/// Predictions and metrics on a set of episodes.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub records: Vec<PredictionRecord>,
    pub summary: MetricSummary,
}

/// Evaluation-mode records: one per episode for mortality and length of
/// stay, one per annotated (interval, region, disease) slot for progression.
pub fn predict_records(model: &Model, episodes: &[Episode]) -> Result<Vec<PredictionRecord>> {
    let per: Vec<Result<Vec<PredictionRecord>>> = episodes
        .par_iter()
        .map(|ep| {
            let p = model.predict(ep)?;
            let task = model.task.name();
            match model.task {
                Task::Mortality | Task::Los => {
                    let y = if model.task == Task::Mortality {
                        ep.mortality
                    } else {
                        ep.los_class
                    } as usize;
                    Ok(vec![PredictionRecord::from_scores(task, y, p.task_probs.expect("task head"))?])
                }
                Task::Progression => p
                    .slots
                    .into_iter()
                    .map(|(row, k, y, probs)| {
                        let mut r = PredictionRecord::from_scores(task, label_to_class(y)?, probs)?;
                        r.region = Some(row % model.dims.regions);
                        r.disease = Some(k);
                        Ok(r)
                    })
                    .collect(),
            }
        })
        .collect();
    let mut out = Vec::new();
    for p in per {
        out.extend(p?);
    }
    Ok(out)
}

pub fn evaluate(model: &Model, episodes: &[Episode]) -> Result<Evaluation> {
    let records = predict_records(model, episodes)?;
    if records.is_empty() {
        return Err(Error::contract("evaluation set has no labelled targets"));
    }
    let summary = MetricSummary::compute(&records)?;
    Ok(Evaluation { records, summary })
}

/// Value of the selection metric; an undefined AUPRC counts as 0.
pub fn selection_value(summary: &MetricSummary, metric: SelectionMetric) -> f64 {
    match metric {
        SelectionMetric::MacroF1 => summary.macro_f1,
        SelectionMetric::Accuracy => summary.accuracy,
        SelectionMetric::Auprc => summary.auprc.unwrap_or(0.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: u64,
    pub train: LossTerms,
    pub val_metric: f64,
    pub val: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub metric: SelectionMetric,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub stopped_early: bool,
    /// message of the numeric failure that ended training, if any
    pub diverged: Option<String>,
}

impl History {
    /// One row per epoch: lr, mean training loss terms, validation metrics.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record([
            "epoch",
            "lr",
            "steps",
            "loss_total",
            "loss_pred",
            "loss_orth",
            "loss_temp",
            "loss_pae",
            "val_selection",
            "val_accuracy",
            "val_macro_precision",
            "val_macro_recall",
            "val_macro_f1",
            "val_kappa",
            "val_auroc",
            "val_auprc",
        ])
        .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.lr.to_string(),
                e.steps.to_string(),
                e.train.total.to_string(),
                e.train.pred.to_string(),
                e.train.orth.to_string(),
                e.train.temp.to_string(),
                e.train.pae.to_string(),
                e.val_metric.to_string(),
                e.val.accuracy.to_string(),
                e.val.macro_precision.to_string(),
                e.val.macro_recall.to_string(),
                e.val.macro_f1.to_string(),
                e.val.kappa.to_string(),
                opt(e.val.auroc),
                opt(e.val.auprc),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

pub struct TrainOutcome {
    /// parameters of the best validation epoch
    pub model: Model,
    pub history: History,
    pub split: Split,
}

/// Applies the configured EHR missingness to the selected episodes.
pub fn with_missing_ehr(episodes: &[Episode], indices: &[usize], rate: f64, seed: u64) -> Result<Vec<Episode>> {
    indices
        .iter()
        .map(|&i| {
            if rate > 0.0 {
                inject_missing_ehr(&episodes[i], rate, derive(seed, &[streams::TRAIN_MISSING, i as u64]))
            } else {
                Ok(episodes[i].clone())
            }
        })
        .collect()
}

/// Trains one seed. Numeric failures stop training and keep the best model so far.
pub fn train(config: &ExperimentConfig, episodes: &[Episode], seed: u64) -> Result<TrainOutcome> {
    config.validate()?;
    let split = split_indices(
        episodes.len(),
        config.train.train_fraction,
        config.train.val_fraction,
        seed,
    )?;
    train_on_split(config, episodes, split, seed)
}

pub fn train_on_split(config: &ExperimentConfig, episodes: &[Episode], split: Split, seed: u64) -> Result<TrainOutcome> {
    let tc = &config.train;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::contract("train and validation splits must be nonempty"));
    }
    let model = Model::new(config.dims(), config.model.clone(), config.task, config.ablation, seed)?;
    let metric = config.selection_metric();
    let train_eps = with_missing_ehr(episodes, &split.train, tc.missing_ehr_rate, seed)?;
    let val_eps = with_missing_ehr(episodes, &split.val, tc.missing_ehr_rate, seed)?;
    let local: Vec<usize> = (0..train_eps.len()).collect();

    let mut trainer = Trainer::new(model, config.loss_weights(), tc.weight_decay, seed);
    let mut best_params = trainer.model.params.clone();
    let mut history = History {
        metric,
        epochs: Vec::new(),
        best_epoch: 0,
        best_metric: f64::NEG_INFINITY,
        stopped_early: false,
        diverged: None,
    };
    let mut since_best = 0;
    'epochs: for epoch in 0..tc.max_epochs {
        let lr = cosine_lr(tc.learning_rate, 0.0, epoch, tc.max_epochs);
        let batches = make_batches(&train_eps, &local, tc.batch_size, derive(seed, &[epoch as u64]));
        let mut terms = LossTerms::default();
        let mut seen = 0usize;
        for window in batches.chunks(tc.accumulation_steps) {
            let w: Vec<Vec<(usize, &Episode)>> = window
                .iter()
                .map(|b| b.iter().map(|&i| (split.train[i], &train_eps[i])).collect())
                .collect();
            let n: usize = window.iter().map(Vec::len).sum();
            match trainer.step(&w, epoch, lr) {
                Ok(mut t) => {
                    t.scale(n as f64);
                    terms.add(&t);
                    seen += n;
                }
                Err(e) if e.is_numeric() => {
                    history.diverged = Some(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        terms.scale(1.0 / seen.max(1) as f64);
        let val = match evaluate(&trainer.model, &val_eps) {
            Ok(v) => v.summary,
            Err(e) if e.is_numeric() => {
                history.diverged = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let score = selection_value(&val, metric);
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            steps: trainer.opt.steps(),
            train: terms,
            val_metric: score,
            val,
        });
        if score > history.best_metric {
            history.best_metric = score;
            history.best_epoch = epoch + 1;
            best_params = trainer.model.params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    let mut model = trainer.model;
    model.params = best_params;
    Ok(TrainOutcome { model, history, split })
}
