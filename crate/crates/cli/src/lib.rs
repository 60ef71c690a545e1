//! Implementation of the `dtpp` subcommands.
//!
//! Run directory layout:
//!
//! ```text
//! <run>/config.json          resolved training configuration
//! <run>/train_log.csv        one row per iteration
//! <run>/checkpoints/         per-model weights and run_state.json
//! <run>/uncertainty/         optional uncertainty dumps
//! <run>/eval/per_sample.csv  per-sample, per-class scores
//! <run>/eval/summary.json    fold means
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use dualteacher::config::{Mode, TrainConfig};
use dualteacher::metrics::{
    bland_altman, evaluate_fold, paired_t_test, write_bland_altman_csv, write_fold_csv, write_fold_json,
    write_t_test_csv, FoldReport, FoldSummary, TTest,
};
use dualteacher::phantom::{generate_phantom, load_dataset, make_folds, save_dataset, Dataset, Domain, PhantomSpec, NUM_FOLDS};
use dualteacher::trainer::{load_student, TrainData, Trainer};
use dualteacher::Error;
use serde::{Deserialize, Serialize};

pub const RUN_ROOT_ENV: &str = "DTPP_RUN_ROOT";

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NON_FINITE: i32 = 4;

/// A failed command and the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) | Error::Divergence { .. } => EXIT_NON_FINITE,
        Error::Io(_)
        | Error::Csv(_)
        | Error::CorruptHeader { .. }
        | Error::UnknownVersion { .. }
        | Error::PayloadSize { .. } => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

/// `$DTPP_RUN_ROOT`, or `runs` in the working directory.
pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::config(format!("invalid {what} {}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub out: PathBuf,
    pub counts: BTreeMap<String, usize>,
    /// `(labeled_target, test)` sizes per fold.
    pub folds: Vec<(usize, usize)>,
}

impl std::fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "dataset written to {}", self.out.display())?;
        for (d, n) in &self.counts {
            writeln!(f, "  {d:<18} {n}")?;
        }
        for (k, (l, t)) in self.folds.iter().enumerate() {
            writeln!(f, "  fold {k}: {l} labeled target, {t} test")?;
        }
        Ok(())
    }
}

/// `gen-data`: generates and writes a phantom dataset. Without a spec file
/// the default benchmark is used.
pub fn gen_data(spec_path: Option<&Path>, out: &Path) -> CliResult<DatasetSummary> {
    let spec: PhantomSpec = match spec_path {
        Some(p) => read_json(p, "phantom spec")?,
        None => PhantomSpec::default(),
    };
    let dataset = generate_phantom(&spec)?;
    save_dataset(&dataset, out)?;
    summarize(&dataset, out)
}

fn summarize(dataset: &Dataset, out: &Path) -> CliResult<DatasetSummary> {
    let counts = Domain::ALL
        .iter()
        .map(|&d| (d.to_string(), dataset.by_domain(d).len()))
        .collect();
    let folds = if dataset.by_domain(Domain::LabeledTarget).is_empty() {
        Vec::new()
    } else {
        (0..NUM_FOLDS)
            .map(|k| make_folds(dataset, k).map(|m| (m.labeled_target.len(), m.test.len())))
            .collect::<Result<_, _>>()?
    };
    Ok(DatasetSummary {
        out: out.to_path_buf(),
        counts,
        folds,
    })
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> CliResult<TrainConfig> {
    let base: TrainConfig = match path {
        Some(p) => read_json(p, "training config")?,
        None => TrainConfig::default(),
    };
    let config = base.with_overrides(overrides)?;
    config.validate()?;
    Ok(config)
}

fn open_dataset(dir: &Path) -> CliResult<Dataset> {
    load_dataset(dir).map_err(|e| match e {
        Error::Io(io) => Failure::io(format!("cannot load dataset {}: {io}", dir.display())),
        other => other.into(),
    })
}

pub fn default_run_dir(config: &TrainConfig, fold: usize) -> PathBuf {
    run_root().join(format!("{}_seed{}_fold{fold}", config.mode, config.seed))
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub fold: usize,
    pub out: Option<PathBuf>,
    pub overrides: Vec<String>,
    /// Continue from `out/checkpoints` instead of starting over.
    pub resume: bool,
}

/// `train`: runs one fold to the configured epoch count. Returns the run
/// directory.
pub fn train(args: &TrainArgs) -> CliResult<PathBuf> {
    let config = load_config(args.config.as_deref(), &args.overrides)?;
    let dataset = open_dataset(&args.data)?;
    let data = TrainData::from_fold(&dataset, args.fold)?;
    let out = args.out.clone().unwrap_or_else(|| default_run_dir(&config, args.fold));
    let mut trainer = if args.resume {
        if !out.join("checkpoints").join("run_state.json").exists() {
            return Err(Failure::io(format!("no checkpoint to resume in {}", out.display())));
        }
        Trainer::resume(&out, data)?
    } else {
        Trainer::new(config, data, Some(&out))?
    };
    trainer.train()?;
    Ok(out)
}

/// `eval`: scores the student of a finished run on the fold's test split
/// and writes `eval/per_sample.csv` and `eval/summary.json`.
pub fn eval(run: &Path, data: &Path, fold: usize) -> CliResult<FoldReport> {
    let ckpt = run.join("checkpoints");
    if !ckpt.join("run_state.json").exists() || !ckpt.join("student.bin").exists() {
        return Err(Failure::io(format!("missing checkpoints in {}", run.display())));
    }
    let (_, student) = load_student(&ckpt)?;
    let dataset = open_dataset(data)?;
    let split = make_folds(&dataset, fold)?;
    let test = dataset.lookup(&split.test)?;
    let report = evaluate_fold(&student, &test, fold)?;
    let dir = run.join("eval");
    fs::create_dir_all(&dir).map_err(Error::from)?;
    write_fold_csv(&report, &dir.join("per_sample.csv"))?;
    write_fold_json(&report, &dir.join("summary.json"))?;
    Ok(report)
}

/// One row of `per_sample.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub sample: String,
    pub class: String,
    pub dice: f64,
    pub asd: Option<f64>,
    pub dice_both_empty: bool,
    pub asd_valid: bool,
}

pub fn read_sample_rows(path: &Path) -> CliResult<Vec<SampleRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Failure::io(format!("{}: {e}", path.display()))))
        .collect()
}

/// An evaluated run as seen by `report`.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub name: String,
    pub mode: Mode,
    pub seed: u64,
    pub summary: FoldSummary,
    pub rows: Vec<SampleRow>,
}

pub fn read_run(dir: &Path) -> CliResult<RunResult> {
    let config: TrainConfig = read_json(&dir.join("config.json"), "run config")?;
    let eval = dir.join("eval");
    if !eval.join("summary.json").exists() {
        return Err(Failure::io(format!("{} has not been evaluated", dir.display())));
    }
    let summary: FoldSummary = read_json(&eval.join("summary.json"), "fold summary")?;
    let rows = read_sample_rows(&eval.join("per_sample.csv"))?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(RunResult {
        name,
        mode: config.mode,
        seed: config.seed,
        summary,
        rows,
    })
}

/// One row of `table.csv`: means over runs of each run's fold means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub mode: String,
    pub runs: usize,
    pub mean_dice: f64,
    pub sd_dice: f64,
    pub mean_asd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub table: Vec<TableRow>,
    /// `(unit a, unit b, test)` where the statistic is on `a - b`.
    pub t_tests: Vec<(String, String, TTest)>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

/// Comparison units: modes, unless two runs share a `(mode, seed, fold)`
/// key, in which case every run is its own unit.
fn units(runs: &[RunResult]) -> (Vec<String>, Vec<String>) {
    let mut keys = BTreeSet::new();
    let distinct = runs.iter().all(|r| keys.insert((r.mode.to_string(), r.seed, r.summary.fold)));
    let labels: Vec<String> = runs
        .iter()
        .map(|r| if distinct { r.mode.to_string() } else { r.name.clone() })
        .collect();
    let mut order = Vec::new();
    for l in &labels {
        if !order.contains(l) {
            order.push(l.clone());
        }
    }
    (labels, order)
}

type PairKey = (u64, usize, String, String);

fn dice_by_key(runs: &[&RunResult]) -> BTreeMap<PairKey, f64> {
    let mut out = BTreeMap::new();
    for r in runs {
        for row in &r.rows {
            out.insert((r.seed, r.summary.fold, row.sample.clone(), row.class.clone()), row.dice);
        }
    }
    out
}

/// `report`: merges evaluated runs into a per-mode table plus paired
/// comparisons of per-sample, per-class Dice between every two units.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> CliResult<Report> {
    if run_dirs.is_empty() {
        return Err(Failure::config("no runs given"));
    }
    let runs = run_dirs.iter().map(|d| read_run(d)).collect::<CliResult<Vec<_>>>()?;
    fs::create_dir_all(out).map_err(Error::from)?;

    let mut by_mode: Vec<(Mode, Vec<&RunResult>)> = Vec::new();
    for r in &runs {
        match by_mode.iter_mut().find(|(m, _)| *m == r.mode) {
            Some((_, v)) => v.push(r),
            None => by_mode.push((r.mode, vec![r])),
        }
    }
    let table: Vec<TableRow> = by_mode
        .iter()
        .map(|(mode, rs)| {
            let dice: Vec<f64> = rs.iter().map(|r| r.summary.mean_dice).collect();
            let asd: Vec<f64> = rs.iter().filter_map(|r| r.summary.mean_asd).collect();
            let (mean_dice, sd_dice) = mean_sd(&dice);
            TableRow {
                mode: mode.to_string(),
                runs: rs.len(),
                mean_dice,
                sd_dice,
                mean_asd: (!asd.is_empty()).then(|| mean_sd(&asd).0),
            }
        })
        .collect();
    let mut w = csv::Writer::from_path(out.join("table.csv")).map_err(Error::from)?;
    for row in &table {
        w.serialize(row).map_err(Error::from)?;
    }
    w.flush().map_err(Error::from)?;

    let mut rw = csv::Writer::from_path(out.join("runs.csv")).map_err(Error::from)?;
    rw.write_record(["run", "mode", "seed", "fold", "mean_dice", "mean_asd"])
        .map_err(Error::from)?;
    for r in &runs {
        rw.write_record([
            r.name.clone(),
            r.mode.to_string(),
            r.seed.to_string(),
            r.summary.fold.to_string(),
            r.summary.mean_dice.to_string(),
            r.summary.mean_asd.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(Error::from)?;
    }
    rw.flush().map_err(Error::from)?;

    let (labels, order) = units(&runs);
    let mut t_tests = Vec::new();
    for (i, a) in order.iter().enumerate() {
        for b in &order[i + 1..] {
            let pick = |u: &String| -> Vec<&RunResult> {
                runs.iter().zip(&labels).filter(|(_, l)| *l == u).map(|(r, _)| r).collect()
            };
            let (da, db) = (dice_by_key(&pick(a)), dice_by_key(&pick(b)));
            let (xa, xb): (Vec<f64>, Vec<f64>) = if order.len() == runs.len() {
                // Per-run units pair on sample and class only.
                let strip = |m: &BTreeMap<PairKey, f64>| -> BTreeMap<(String, String), f64> {
                    m.iter().map(|((_, _, s, c), v)| ((s.clone(), c.clone()), *v)).collect()
                };
                let (sa, sb) = (strip(&da), strip(&db));
                sa.iter().filter_map(|(k, v)| sb.get(k).map(|w| (*v, *w))).unzip()
            } else {
                da.iter().filter_map(|(k, v)| db.get(k).map(|w| (*v, *w))).unzip()
            };
            if xa.len() < 2 {
                log::warn!("{a} and {b} share fewer than two paired scores; skipped");
                continue;
            }
            let t = paired_t_test(&xa, &xb)?;
            write_bland_altman_csv(&bland_altman(&xa, &xb)?, &out.join(format!("bland_altman_{a}__{b}.csv")))?;
            t_tests.push((a.clone(), b.clone(), t));
        }
    }
    let named: Vec<(String, TTest)> = t_tests.iter().map(|(a, b, t)| (format!("{a} - {b}"), t.clone())).collect();
    write_t_test_csv(&named, &out.join("t_tests.csv"))?;
    Ok(Report { table, t_tests })
}

impl std::fmt::Display for Report {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<22} {:>5} {:>10} {:>8} {:>9}", "mode", "runs", "dice", "sd", "asd")?;
        for r in &self.table {
            let asd = r.mean_asd.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
            writeln!(f, "{:<22} {:>5} {:>10.2} {:>8.2} {:>9}", r.mode, r.runs, r.mean_dice, r.sd_dice, asd)?;
        }
        for (a, b, t) in &self.t_tests {
            match t.p {
                Some(p) => writeln!(f, "{a} vs {b}: mean diff {:.3}, p = {p:.4} (n = {})", t.mean_diff, t.n)?,
                None => writeln!(f, "{a} vs {b}: degenerate (all differences equal)")?,
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AblateArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub folds: Vec<usize>,
    pub out: PathBuf,
    pub overrides: Vec<String>,
}

pub fn ablation_run_dir(out: &Path, mode: Mode, seed: u64, fold: usize) -> PathBuf {
    out.join(mode.name()).join(format!("seed{seed}_fold{fold}"))
}

/// `ablate`: trains and evaluates every `(seed, fold, mode)` in turn, then
/// writes a report to `out/report`. Runs that already have an evaluation
/// are kept.
pub fn ablate(args: &AblateArgs) -> CliResult<Report> {
    if args.modes.is_empty() {
        return Err(Failure::config("no modes given"));
    }
    let base = load_config(args.config.as_deref(), &args.overrides)?;
    let dataset = open_dataset(&args.data)?;
    let mut dirs = Vec::new();
    for &seed in &args.seeds {
        for &fold in &args.folds {
            for &mode in &args.modes {
                let dir = ablation_run_dir(&args.out, mode, seed, fold);
                dirs.push(dir.clone());
                if dir.join("eval").join("summary.json").exists() {
                    log::info!("{} already evaluated", dir.display());
                    continue;
                }
                let config = TrainConfig {
                    mode,
                    seed,
                    ..base.clone()
                };
                let mut trainer = Trainer::new(config, TrainData::from_fold(&dataset, fold)?, Some(&dir))?;
                trainer.train()?;
                let r = eval(&dir, &args.data, fold)?;
                log::info!("{mode} seed {seed} fold {fold}: dice {:.2}", r.mean_dice);
            }
        }
    }
    report(&dirs, &args.out.join("report"))
}
