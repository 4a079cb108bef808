//! Verb implementations. Each writes its manifest before any result.

use std::path::{Path, PathBuf};

use chrono::Utc;

use progfuse::analysis::{region_attention, write_region_attention};
use progfuse::checkpoint::Checkpoint;
use progfuse::cohort::{generate_cohort, read_cohort, write_cohort, write_oracle, Episode};
use progfuse::config::ExperimentConfig;
use progfuse::experiment::{
    aggregate, composite_grad_check, grid_search, robustness as run_robustness, run_ablation, run_seed,
    write_ablation_table, write_records, AblationRow, MetricRecord, SeedKey,
};
use progfuse::metrics::MetricSummary;
use progfuse::model::{Task, Variant};
use progfuse::train::{evaluate, split_indices};

use crate::manifest::{InputFile, Manifest};
use crate::{CliError, ConfigArgs};

const GRADCHECK_STEP: f64 = 1e-5;
const GRADCHECK_TOL: f64 = 1e-4;

fn out_dir(out: Option<PathBuf>, verb: &str) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from("runs").join(format!("{verb}-{}", Utc::now().format("%Y%m%d-%H%M%S"))))
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    let mut c = ExperimentConfig::load_or_builtin(&args.config)?;
    if let Some(s) = args.seed {
        c.seeds = vec![s];
    }
    if let Some(t) = &args.task {
        c.task = t.parse::<Task>()?;
        c.train.selection_metric = None;
    }
    if let Some(v) = &args.ablation {
        c.ablation = v.parse::<Variant>()?;
    }
    c.validate()?;
    Ok(c)
}

/// Episodes from `--cohort`, or the config's generated cohort.
fn episodes(config: &ExperimentConfig, cohort: Option<&Path>, m: &mut Manifest) -> Result<Vec<Episode>, CliError> {
    match cohort {
        Some(p) => {
            m.cohort = Some(InputFile::hash(p)?);
            m.write()?;
            let eps = read_cohort(p)?;
            if eps.is_empty() {
                return Err(CliError::Usage(format!("{} holds no episodes", p.display())));
            }
            Ok(eps)
        }
        None => Ok(generate_cohort(&config.cohort)?.0),
    }
}

/// Runs `body` between the opening and closing manifest writes.
fn with_manifest<F>(mut m: Manifest, body: F) -> Result<(), CliError>
where
    F: FnOnce(&mut Manifest) -> Result<(), CliError>,
{
    m.write()?;
    let r = body(&mut m);
    m.finish(if r.is_ok() { "ok" } else { "failed" })?;
    r
}

fn print_summary(label: &str, s: &MetricSummary) {
    let pairs: Vec<String> = s.pairs().iter().map(|(n, v)| format!("{n}={v:.4}")).collect();
    println!("{label}: {}", pairs.join(" "));
}

pub fn synth(config: &str, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), CliError> {
    let mut c = ExperimentConfig::load_or_builtin(config)?;
    if let Some(s) = seed {
        c.cohort.seed = s;
    }
    c.validate()?;
    let out = out_dir(out, "synth");
    let m = Manifest::start("synth", &out, &c)?;
    with_manifest(m, |m| {
        let (eps, hidden) = generate_cohort(&c.cohort)?;
        let cohort = out.join("cohort.jsonl");
        let oracle = out.join("oracle.jsonl");
        write_cohort(&eps, &cohort)?;
        write_oracle(&hidden, &oracle)?;
        m.artifact(&cohort);
        m.artifact(&oracle);
        println!("wrote {} episodes to {}", eps.len(), cohort.display());
        Ok(())
    })
}

pub fn train(args: &ConfigArgs, out: Option<PathBuf>, cohort: Option<PathBuf>) -> Result<(), CliError> {
    let c = load_config(args)?;
    let out = out_dir(out, "train");
    let m = Manifest::start("train", &out, &c)?;
    with_manifest(m, |m| {
        let eps = episodes(&c, cohort.as_deref(), m)?;
        let mut runs = Vec::new();
        for &seed in &c.seeds {
            let r = run_seed(&c, &eps, seed)?;
            let dir = out.join(format!("seed-{seed}"));
            std::fs::create_dir_all(&dir)?;
            let ck = dir.join("checkpoint.pfck");
            let hist = dir.join("history.csv");
            Checkpoint::from_model(&c, seed, &r.model).save(&ck)?;
            r.history.write_csv(&hist)?;
            m.artifact(&ck);
            m.artifact(&hist);
            if let Some(msg) = &r.history.diverged {
                eprintln!("seed {seed}: training stopped on numeric failure, kept best epoch: {msg}");
            }
            println!(
                "seed {seed}: best epoch {} val {}={:.4}",
                r.history.best_epoch, r.history.metric, r.history.best_metric
            );
            print_summary(&format!("seed {seed} test"), &r.test);
            runs.push((seed, r.history.best_metric, r.test));
        }
        let row = AblationRow {
            variant: c.ablation,
            task: c.task.name().to_string(),
            aggregate: aggregate(&runs.iter().map(|(_, _, s)| s).collect::<Vec<_>>()),
            runs,
        };
        let metrics = out.join("metrics.csv");
        write_records(&row.records(), &metrics)?;
        m.artifact(&metrics);
        for a in &row.aggregate {
            println!("{} {:.4} ± {:.4}", a.metric, a.mean, a.std);
        }
        Ok(())
    })
}

/// Episodes for checkpoint-driven verbs: `--cohort` or the held-out test split.
fn checkpoint_episodes(ck: &Checkpoint, cohort: Option<&Path>, m: &mut Manifest) -> Result<Vec<Episode>, CliError> {
    if cohort.is_some() {
        return episodes(&ck.config, cohort, m);
    }
    let all = generate_cohort(&ck.config.cohort)?.0;
    let split = split_indices(
        all.len(),
        ck.config.train.train_fraction,
        ck.config.train.val_fraction,
        ck.seed,
    )?;
    Ok(split.test.iter().map(|&i| all[i].clone()).collect())
}

fn open_checkpoint(path: &Path, verb: &str, out: &Path) -> Result<(Checkpoint, Manifest), CliError> {
    let ck = Checkpoint::load(path)?;
    let mut m = Manifest::start(verb, out, &ck.config)?;
    m.seeds = vec![ck.seed];
    m.checkpoint = Some(InputFile::hash(path)?);
    Ok((ck, m))
}

pub fn eval(checkpoint: &Path, out: Option<PathBuf>, cohort: Option<PathBuf>) -> Result<(), CliError> {
    let out = out_dir(out, "eval");
    let (ck, m) = open_checkpoint(checkpoint, "eval", &out)?;
    with_manifest(m, |m| {
        let model = ck.to_model()?;
        let eps = checkpoint_episodes(&ck, cohort.as_deref(), m)?;
        let ev = evaluate(&model, &eps)?;
        let records: Vec<MetricRecord> = ev
            .summary
            .pairs()
            .into_iter()
            .map(|(metric, value)| MetricRecord {
                task: ck.config.task.name().to_string(),
                variant: ck.config.ablation.to_string(),
                metric: metric.to_string(),
                seed: SeedKey::Seed(ck.seed),
                value,
            })
            .collect();
        let metrics = out.join("metrics.csv");
        write_records(&records, &metrics)?;
        m.artifact(&metrics);
        print_summary(&format!("eval ({} targets)", ev.summary.n), &ev.summary);
        Ok(())
    })
}

pub fn gradcheck(args: &ConfigArgs, out: Option<PathBuf>) -> Result<(), CliError> {
    let c = load_config(args)?;
    let out = out_dir(out, "gradcheck");
    let m = Manifest::start("gradcheck", &out, &c)?;
    with_manifest(m, |m| {
        let mut worst = 0.0f64;
        let mut lines = vec!["seed,max_relative_error,worst_param,worst_index,coords".to_string()];
        for &seed in &c.seeds {
            let r = composite_grad_check(&c, seed, GRADCHECK_STEP)?;
            println!(
                "seed {seed}: max relative error {:.3e} ({}[{}], {} coords)",
                r.max_relative_error, r.worst_param, r.worst_index, r.coords_checked
            );
            lines.push(format!(
                "{seed},{},{},{},{}",
                r.max_relative_error, r.worst_param, r.worst_index, r.coords_checked
            ));
            worst = worst.max(r.max_relative_error);
        }
        let path = out.join("gradcheck.csv");
        std::fs::write(&path, lines.join("\n") + "\n")?;
        m.artifact(&path);
        println!("max relative error {worst:.3e}");
        if worst < GRADCHECK_TOL {
            Ok(())
        } else {
            Err(CliError::GradCheck(worst))
        }
    })
}

pub fn ablate(args: &ConfigArgs, out: Option<PathBuf>, cohort: Option<PathBuf>, all: bool) -> Result<(), CliError> {
    let c = load_config(args)?;
    let variants: Vec<Variant> = if all { Variant::ALL.to_vec() } else { vec![c.ablation] };
    let out = out_dir(out, "ablate");
    let m = Manifest::start("ablate", &out, &c)?;
    with_manifest(m, |m| {
        let eps = episodes(&c, cohort.as_deref(), m)?;
        let mut rows = Vec::new();
        for v in variants {
            let row = run_ablation(v, &c, &eps)?;
            let metric = c.selection_metric().name();
            if let Some(a) = row.aggregate.iter().find(|a| a.metric == metric) {
                println!("{v}: test {metric} {:.4} ± {:.4}", a.mean, a.std);
            }
            rows.push(row);
        }
        let table = out.join("ablation.csv");
        let metrics = out.join("metrics.csv");
        write_ablation_table(&rows, &table)?;
        let records: Vec<MetricRecord> = rows.iter().flat_map(AblationRow::records).collect();
        write_records(&records, &metrics)?;
        m.artifact(&table);
        m.artifact(&metrics);
        Ok(())
    })
}

pub fn sweep(args: &ConfigArgs, out: Option<PathBuf>, cohort: Option<PathBuf>) -> Result<(), CliError> {
    let c = load_config(args)?;
    let grid = c.grid.clone().unwrap_or_default();
    let out = out_dir(out, "sweep");
    let m = Manifest::start("sweep", &out, &c)?;
    with_manifest(m, |m| {
        let eps = episodes(&c, cohort.as_deref(), m)?;
        let res = grid_search(&c, &grid, &eps)?;
        let board = out.join("leaderboard.csv");
        let best = out.join("best.toml");
        res.write_csv(&board)?;
        std::fs::write(&best, res.best.to_toml())?;
        m.artifact(&board);
        m.artifact(&best);
        let top = &res.leaderboard[0];
        println!(
            "{} points; best val {}={:.4} at {:?}",
            res.leaderboard.len(),
            res.metric,
            top.val_metric,
            top.point
        );
        Ok(())
    })
}

pub fn robustness(
    args: &ConfigArgs,
    out: Option<PathBuf>,
    cohort: Option<PathBuf>,
    rates: Vec<f64>,
) -> Result<(), CliError> {
    let c = load_config(args)?;
    if let Some(r) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(CliError::Usage(format!("rate {r} outside [0, 1]")));
    }
    let out = out_dir(out, "robustness");
    let mut m = Manifest::start("robustness", &out, &c)?;
    m.rates = Some(rates.clone());
    with_manifest(m, |m| {
        let eps = episodes(&c, cohort.as_deref(), m)?;
        let t = run_robustness(&c, &eps, &rates)?;
        let table = out.join("robustness.csv");
        let runs = out.join("robustness_runs.csv");
        t.write_table(&table)?;
        t.write_runs(&runs)?;
        m.artifact(&table);
        m.artifact(&runs);
        let metric = t.metric.name();
        println!("rate  val_{metric}_epoch_mean  test_{metric}");
        for (rate, aggs) in t.summary() {
            let val = &aggs[0];
            let test = aggs.iter().find(|a| a.metric == format!("test_{metric}"));
            let test = test.map_or("n/a".to_string(), |a| format!("{:.4} ± {:.4}", a.mean, a.std));
            println!("{rate:<5} {:.4} ± {:.4}  {test}", val.mean, val.std);
        }
        let mono = t.monotone_seeds();
        println!(
            "monotone seeds {}/{}; empty intervals {}; finite {}",
            mono.len(),
            t.seeds().len(),
            t.runs.iter().map(|r| r.empty_intervals).sum::<usize>(),
            t.all_finite()
        );
        Ok(())
    })
}

pub fn attn_export(checkpoint: &Path, out: Option<PathBuf>, cohort: Option<PathBuf>) -> Result<(), CliError> {
    let out = out_dir(out, "attn-export");
    let (ck, m) = open_checkpoint(checkpoint, "attn-export", &out)?;
    with_manifest(m, |m| {
        let model = ck.to_model()?;
        let eps = checkpoint_episodes(&ck, cohort.as_deref(), m)?;
        let weights = region_attention(&model, &eps)?;
        let path = out.join("attention.csv");
        write_region_attention(ck.config.task, &weights, &path)?;
        m.artifact(&path);
        for (r, w) in weights.iter().enumerate() {
            println!("region {r}: {w:.4}");
        }
        Ok(())
    })
}
