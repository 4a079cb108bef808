//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs without the libtest harness so the lines always print. Set
//! `ACCEPTANCE_ONLY=3,8` to run a subset.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::Rng;

use progfuse::analysis::{probe_report, probe_rows, reversal_report};
use progfuse::autodiff::{Tape, Tensor};
use progfuse::checkpoint::Checkpoint;
use progfuse::cohort::{generate_cohort, Episode, HiddenFactors};
use progfuse::config::ExperimentConfig;
use progfuse::experiment::run_ablation;
use progfuse::fusion::MultiscaleFusion;
use progfuse::metrics::{accuracy, auprc, auroc, cohens_kappa, macro_prf1_labels};
use progfuse::model::{Model, Variant};
use progfuse::nn::Builder;
use progfuse::rng::stream;
use progfuse::train::{train, Trainer};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&fixture(name)).expect("fixture parses")
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_progfuse"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn read_csv(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).expect("csv opens");
    r.records().map(|x| x.expect("csv row")).collect()
}

fn subset<'a>(eps: &'a [Episode], idx: &[usize]) -> Vec<&'a Episode> {
    idx.iter().map(|&i| &eps[i]).collect()
}

fn gradient_soundness() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let (code, stdout, stderr) = cli(&["gradcheck", "--config", "micro", "--out", dir.path().to_str().unwrap()]);
    let elapsed = t0.elapsed();
    let worst = stdout
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix("max relative error "))
        .and_then(|v| v.trim().parse::<f64>().ok());
    let configs = stdout.lines().filter(|l| l.starts_with("seed ")).count();
    match worst {
        Some(w) => outcome(
            code == 0 && configs == 5 && w < 1e-4 && elapsed < Duration::from_secs(60),
            format!("{configs} micro configs, max relative error {w:.3e}, {:.1}s", elapsed.as_secs_f64()),
        ),
        None => outcome(false, format!("exit {code}, no error line: {stderr}")),
    }
}

fn mask_locality() -> Outcome {
    let t0 = Instant::now();
    let d = 8;
    let mut store = progfuse::autodiff::ParamStore::new();
    let mut init = stream(11, 0);
    let mmf = MultiscaleFusion::new(
        &mut Builder {
            store: &mut store,
            rng: &mut init,
        },
        d,
        false,
    )
    .unwrap();
    let mut rng = stream(2024, 9);
    let (mut strict, mut fallback, mut bad) = (0usize, 0usize, Vec::new());
    for case in 0..1000 {
        let m = rng.random_range(2..=16);
        let mut times: Vec<f64> = vec![rng.random_range(0.0..2.0)];
        for _ in 1..m {
            let t = times.last().unwrap() + rng.random_range(0.05..3.0);
            times.push(t);
        }
        let span: f64 = times[m - 1] + 1.0;
        let t_i = rng.random_range(-1.0..span);
        let t_next = t_i + rng.random_range(0.01..span.max(0.5));
        let inside: Vec<bool> = times.iter().map(|&t| t >= t_i && t <= t_next).collect();
        let base: Vec<f64> = (0..m * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut moved = base.clone();
        let mut allowed = inside.clone();
        if inside.iter().any(|b| *b) {
            strict += 1;
        } else {
            fallback += 1;
            // nearest row, earliest on ties
            let dist = |t: f64| if t < t_i { t_i - t } else { t - t_next };
            let mut best = 0;
            for j in 1..m {
                if dist(times[j]) < dist(times[best]) {
                    best = j;
                }
            }
            allowed[best] = true;
        }
        for j in (0..m).filter(|&j| !allowed[j]) {
            for v in &mut moved[j * d..(j + 1) * d] {
                *v = rng.random_range(-50.0..50.0);
            }
        }
        let run = |e: &[f64]| {
            let mut tape = Tape::new();
            let eg = tape.constant(Tensor::matrix(m, d, e.to_vec()).unwrap());
            let loc = mmf.local_ehr_attend(&mut tape, &store, eg, &times, t_i, t_next).unwrap();
            (tape.value(loc.e_local).clone(), tape.value(loc.weights).clone())
        };
        let (e0, w0) = run(&base);
        let (e1, _) = run(&moved);
        let mut ok = e0.data() == e1.data();
        for r in 0..m {
            let row = w0.row(r);
            let mass: f64 = (0..m).filter(|&j| allowed[j]).map(|j| row[j]).sum();
            ok &= (mass - 1.0).abs() <= 1e-12;
            ok &= (0..m).filter(|&j| !allowed[j]).all(|j| row[j] == 0.0);
        }
        if !ok {
            bad.push(case);
        }
    }
    let elapsed = t0.elapsed();
    outcome(
        bad.is_empty() && elapsed < Duration::from_secs(10),
        format!(
            "1000 intervals ({strict} populated, {fallback} empty with nearest-row fallback), {} violations, {:.2}s",
            bad.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn reversal_antisymmetry() -> Outcome {
    let cfg = load("reversal.toml");
    let (eps, _) = generate_cohort(&cfg.cohort).unwrap();
    let mut ok = eps.len() == 500;
    let mut parts = Vec::new();
    for &seed in &cfg.seeds {
        let out = train(&cfg, &eps, seed).unwrap();
        let r = reversal_report(&out.model, &subset(&eps, &out.split.test)).unwrap();
        let ratio = r.mean_static_gap / r.mean_static_norm;
        ok &= r.flip_rate >= 0.9 && ratio < 0.05;
        parts.push(format!("seed {seed}: flip {:.3}, gap/norm {:.4}", r.flip_rate, ratio));
    }
    outcome(ok, parts.join("; "))
}

fn disentanglement_recovery() -> Outcome {
    let cfg = load("disentangle.toml");
    let (eps, hidden) = generate_cohort(&cfg.cohort).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for &seed in &cfg.seeds {
        let out = train(&cfg, &eps, seed).unwrap();
        let h = |idx: &[usize]| -> Vec<&HiddenFactors> { idx.iter().map(|&i| &hidden[i]).collect() };
        let fit = probe_rows(&out.model, &subset(&eps, &out.split.train), &h(&out.split.train)).unwrap();
        let test = probe_rows(&out.model, &subset(&eps, &out.split.test), &h(&out.split.test)).unwrap();
        let p = probe_report(&fit, &test).unwrap();
        // "beats by >= 20%": the winning probe's relative error is at most 0.8x the loser's
        let pass = p.mean_abs_cos < 0.1 && p.static_from_s <= 0.8 * p.static_from_d && p.drift_from_d <= 0.8 * p.drift_from_s;
        ok &= pass;
        parts.push(format!(
            "seed {seed}: |cos| {:.3}, static S {:.3} vs D {:.3}, drift D {:.3} vs S {:.3}",
            p.mean_abs_cos, p.static_from_s, p.static_from_d, p.drift_from_d, p.drift_from_s
        ));
    }
    outcome(ok, parts.join("; "))
}

fn ablation_direction() -> Outcome {
    let t0 = Instant::now();
    let cfg = load("ablation.toml");
    let (eps, _) = generate_cohort(&cfg.cohort).unwrap();
    let f1 = |v: Variant| -> Vec<f64> {
        run_ablation(v, &cfg, &eps)
            .unwrap()
            .runs
            .iter()
            .map(|(_, _, s)| s.macro_f1)
            .collect()
    };
    let full = f1(Variant::Full);
    let a2 = f1(Variant::A2);
    let a4 = f1(Variant::A4);
    let wins = |other: &[f64]| full.iter().zip(other).filter(|(f, o)| f >= o).count();
    let elapsed = t0.elapsed();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    outcome(
        wins(&a4) >= 2 && wins(&a2) >= 2 && elapsed < Duration::from_secs(30 * 60),
        format!(
            "macro-F1 full {} A2 {} A4 {}; full >= A4 in {}/3, >= A2 in {}/3; {:.0}s",
            fmt(&full),
            fmt(&a2),
            fmt(&a4),
            wins(&a4),
            wins(&a2),
            elapsed.as_secs_f64()
        ),
    )
}

fn oracle_prf1(truth: &[usize], pred: &[usize]) -> (f64, f64, f64) {
    let k = truth.iter().chain(pred).max().unwrap() + 1;
    let mut cm = vec![vec![0usize; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        cm[t][p] += 1;
    }
    let present: BTreeSet<usize> = truth.iter().copied().collect();
    let (mut ps, mut rs, mut fs) = (0.0, 0.0, 0.0);
    for &c in &present {
        let tp = cm[c][c] as f64;
        let col: usize = (0..k).map(|r| cm[r][c]).sum();
        let row: usize = cm[c].iter().sum();
        let p = if col == 0 { 0.0 } else { tp / col as f64 };
        let r = if row == 0 { 0.0 } else { tp / row as f64 };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        ps += p;
        rs += r;
        fs += f;
    }
    let n = present.len() as f64;
    (ps / n, rs / n, fs / n)
}

fn oracle_auroc(s: &[f64], y: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in (0..s.len()).filter(|&i| y[i]) {
        for j in (0..s.len()).filter(|&j| !y[j]) {
            den += 1.0;
            num += if s[i] > s[j] {
                1.0
            } else if s[i] == s[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

fn oracle_auprc(s: &[f64], y: &[bool]) -> f64 {
    let pos = y.iter().filter(|b| **b).count() as f64;
    let mut thresholds: Vec<f64> = s.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut prev_r, mut ap) = (0.0, 0.0);
    for t in thresholds {
        let sel: Vec<usize> = (0..s.len()).filter(|&i| s[i] >= t).collect();
        let tp = sel.iter().filter(|&&i| y[i]).count() as f64;
        let r = tp / pos;
        ap += (r - prev_r) * (tp / sel.len() as f64);
        prev_r = r;
    }
    ap
}

fn oracle_kappa(truth: &[usize], pred: &[usize]) -> f64 {
    let k = truth.iter().chain(pred).max().unwrap() + 1;
    let n = truth.len() as f64;
    let p_o = truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / n;
    let p_e: f64 = (0..k)
        .map(|c| {
            let a = truth.iter().filter(|&&t| t == c).count() as f64;
            let b = pred.iter().filter(|&&p| p == c).count() as f64;
            a * b / (n * n)
        })
        .sum();
    if p_e == 1.0 {
        0.0
    } else {
        (p_o - p_e) / (1.0 - p_e)
    }
}

fn metric_oracles() -> Outcome {
    let mut rng = stream(77, 3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=50);
        let k = rng.random_range(2..=4);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n)
            .map(|i| if rng.random_bool(0.5) { truth[i] } else { rng.random_range(0..k) })
            .collect();
        let got = macro_prf1_labels(&truth, &pred).unwrap();
        let (p, r, f) = oracle_prf1(&truth, &pred);
        let acc = truth.iter().zip(&pred).filter(|(a, b)| a == b).count() as f64 / n as f64;
        worst = worst
            .max((got.precision - p).abs())
            .max((got.recall - r).abs())
            .max((got.f1 - f).abs())
            .max((accuracy(&truth, &pred).unwrap() - acc).abs())
            .max((cohens_kappa(&truth, &pred).unwrap() - oracle_kappa(&truth, &pred)).abs());

        // ties on half the instances
        let coarse = rng.random_bool(0.5);
        let mut y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        y[0] = true;
        y[1] = false;
        let s: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.random();
                if coarse {
                    (v * 5.0).floor() / 5.0
                } else {
                    v
                }
            })
            .collect();
        worst = worst
            .max((auroc(&s, &y).unwrap() - oracle_auroc(&s, &y)).abs())
            .max((auprc(&s, &y).unwrap() - oracle_auprc(&s, &y)).abs());
    }
    let fixed_auroc = auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
    let fixed_auprc = auprc(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
    // truth [0,0,1,2] vs pred [0,0,0,2]: p_o = 3/4, p_e = (2*3 + 1*0 + 1*1)/16 = 7/16
    let kappa_fixture = cohens_kappa(&[0, 0, 1, 2], &[0, 0, 0, 2]).unwrap();
    // truth [0,0,1,2] vs pred [0,1,1,2]: p_o = 3/4, p_e = (2*1 + 1*2 + 1*1)/16 = 5/16
    let kappa_listed = cohens_kappa(&[0, 0, 1, 2], &[0, 1, 1, 2]).unwrap();
    let fixed_ok = (fixed_auroc - 0.75).abs() < 1e-12
        && (fixed_auprc - 5.0 / 6.0).abs() < 1e-12
        && (kappa_fixture - 5.0 / 9.0).abs() < 1e-12
        && (kappa_listed - 7.0 / 11.0).abs() < 1e-12;
    outcome(
        worst < 1e-9 && fixed_ok,
        format!(
            "100 instances, max deviation {worst:.1e}; AUROC fixture {fixed_auroc}, AUPRC fixture {fixed_auprc:.6}, \
             kappa 0.5555 fixture {kappa_fixture:.6}, kappa on pred [0,1,1,2] {kappa_listed:.6} (= 7/11)"
        ),
    )
}

fn training_mechanics() -> Outcome {
    let doc = r#"
task = "progression"
[cohort]
n_patients = 30
regions = 3
diseases = 2
d_in = 6
n_ehr = 4
n_dem = 3
static_dim = 2
phys_dim = 2
horizon_hours = 12
min_snapshot_gap = 1.0
t_probs = [0.5, 0.5, 0.0, 0.0]
[model]
hidden = 8
ehr_heads = 2
fusion_heads = 2
dropout = 0.2
[train]
batch_size = 2
max_epochs = 3
patience = 3
"#;
    let cfg = ExperimentConfig::from_toml(doc).unwrap();
    let (eps, _) = generate_cohort(&cfg.cohort).unwrap();

    let model = Model::new(cfg.dims(), cfg.model.clone(), cfg.task, Variant::Full, 5).unwrap();
    let mut a = Trainer::new(model.clone(), cfg.loss_weights(), 0.01, 5);
    let mut b = Trainer::new(model, cfg.loss_weights(), 0.01, 5);
    let mut drift = 0.0f64;
    for step in 0..3 {
        let ids: Vec<usize> = (step * 8..step * 8 + 8).collect();
        let micro: Vec<Vec<(usize, &Episode)>> = ids.chunks(2).map(|c| c.iter().map(|&i| (i, &eps[i])).collect()).collect();
        let big = vec![ids.iter().map(|&i| (i, &eps[i])).collect::<Vec<_>>()];
        a.step(&micro, 0, 1e-2).unwrap();
        b.step(&big, 0, 1e-2).unwrap();
        for ((_, _, x), (_, _, y)) in a.model.params.iter().zip(b.model.params.iter()) {
            for (u, v) in x.data().iter().zip(y.data()) {
                drift = drift.max((u - v).abs());
            }
        }
    }
    let accum_ok = drift < 1e-8;

    let mut stops = Vec::new();
    for patience in [1usize, 3] {
        let mut c = cfg.clone();
        c.task = progfuse::model::Task::Los;
        c.loss = None;
        c.train.learning_rate = 0.0;
        c.train.max_epochs = 8;
        c.train.patience = patience;
        let h = train(&c, &eps, 0).unwrap().history;
        stops.push((patience, h.epochs.len(), h.stopped_early));
    }
    let stop_ok = stops.iter().all(|&(p, n, early)| n == p + 1 && early);

    let r1 = train(&cfg, &eps, 7).unwrap();
    let r2 = train(&cfg, &eps, 7).unwrap();
    let bytes = |r: &progfuse::train::TrainOutcome| Checkpoint::from_model(&cfg, 7, &r.model).to_bytes();
    let det_ok = r1.history == r2.history && bytes(&r1) == bytes(&r2);

    outcome(
        accum_ok && stop_ok && det_ok,
        format!(
            "accumulation drift {drift:.1e} over 3 steps; frozen runs stop at {:?} epochs for patience {:?}; \
             repeated seed identical: {det_ok}",
            stops.iter().map(|s| s.1).collect::<Vec<_>>(),
            stops.iter().map(|s| s.0).collect::<Vec<_>>()
        ),
    )
}

fn robustness_shape() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture("robustness.toml");
    let (code, _, stderr) = cli(&[
        "robustness",
        "--config",
        fx.to_str().unwrap(),
        "--rates",
        "0,0.25,0.5,0.75",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    if code != 0 {
        return outcome(false, format!("exit {code}: {stderr}"));
    }
    let rows = read_csv(&dir.path().join("robustness_runs.csv"));
    let table = read_csv(&dir.path().join("robustness.csv"));
    let mut finite = true;
    let mut empty_at_high = 0usize;
    let mut curves: std::collections::BTreeMap<u64, Vec<(f64, f64)>> = Default::default();
    for r in &rows {
        let rate: f64 = r[0].parse().unwrap();
        let seed: u64 = r[1].parse().unwrap();
        let mean_val: f64 = r[3].parse().unwrap();
        finite &= &r[6] == "true" && mean_val.is_finite();
        if rate > 0.0 {
            empty_at_high += r[5].parse::<usize>().unwrap();
        }
        curves.entry(seed).or_default().push((rate, mean_val));
    }
    let mut monotone = 0;
    let mut parts = Vec::new();
    for (seed, c) in &mut curves {
        c.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mono = c.windows(2).all(|w| w[1].1 <= w[0].1);
        monotone += mono as usize;
        let vals: Vec<String> = c.iter().map(|(_, v)| format!("{v:.3}")).collect();
        parts.push(format!("seed {seed} [{}]{}", vals.join(" "), if mono { "" } else { " non-monotone" }));
    }
    let rates_in_table: BTreeSet<String> = table.iter().map(|r| r[0].to_string()).collect();
    outcome(
        finite && empty_at_high > 0 && monotone >= 2 && curves.len() == 3 && rates_in_table.len() == 4,
        format!(
            "mean val accuracy by rate: {}; monotone {monotone}/3; NaN-free {finite}; {empty_at_high} empty intervals hit fallback",
            parts.join(", ")
        ),
    )
}

fn planted_attention() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture("attention.toml");
    let run = dir.path().join("train");
    let (code, _, stderr) = cli(&[
        "train",
        "--config",
        fx.to_str().unwrap(),
        "--seed",
        "0",
        "--out",
        run.to_str().unwrap(),
    ]);
    if code != 0 {
        return outcome(false, format!("train exit {code}: {stderr}"));
    }
    let ck = run.join("seed-0/checkpoint.pfck");
    let export = dir.path().join("attn");
    let (code, _, stderr) = cli(&[
        "attn-export",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out",
        export.to_str().unwrap(),
    ]);
    if code != 0 {
        return outcome(false, format!("attn-export exit {code}: {stderr}"));
    }
    let rows = read_csv(&export.join("attention.csv"));
    let weights: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    let top = (0..weights.len()).fold(0, |b, i| if weights[i] > weights[b] { i } else { b });
    let shown: Vec<String> = weights.iter().map(|w| format!("{w:.3}")).collect();
    outcome(
        top == 0 && rows.iter().all(|r| &r[0] == "mortality"),
        format!("region weights [{}], max at region {top}", shown.join(", ")),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "gradient soundness", gradient_soundness),
        (2, "mask locality", mask_locality),
        (3, "reversal antisymmetry", reversal_antisymmetry),
        (4, "disentanglement recovery", disentanglement_recovery),
        (5, "ablation direction", ablation_direction),
        (6, "metric oracles", metric_oracles),
        (7, "training mechanics", training_mechanics),
        (8, "robustness protocol", robustness_shape),
        (9, "planted-signal attention", planted_attention),
    ];
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t0 = Instant::now();
        let o = f();
        ran += 1;
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {id} {}: {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
