use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use dualteacher::phantom::load_dataset;
use dualteacher_cli::{read_run, read_sample_rows, TableRow};

fn dtpp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dtpp"))
}

const SMALL_SPEC: &str = r#"{
  "image_size": 16,
  "num_classes": 4,
  "num_samples_per_split": {"source": 4, "labeled_target": 8, "unlabeled_target": 4, "test": 0},
  "shift_params": {
    "source": {"gain": -0.75, "bias": 0.85, "gamma": 1.3, "noise_std": 0.12, "blur_radius": 1},
    "target": {"gain": 1.0, "bias": 0.0, "gamma": 1.0, "noise_std": 0.12, "blur_radius": 0}
  },
  "seed": 5
}"#;

const SMALL_CONFIG: &str = r#"{
  "epochs": 1,
  "t_max": 1,
  "n_passes": 2,
  "segmenter": {"num_classes": 4, "base_width": 2, "depth": 1},
  "generator": {"width": 2, "res_blocks": 1},
  "discriminator": {"width": 2}
}"#;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("spec.json"), SMALL_SPEC).unwrap();
        fs::write(dir.path().join("config.json"), SMALL_CONFIG).unwrap();
        let f = Self { dir };
        let out = f.run(&["gen-data", "--spec", &f.s("spec.json"), "--out", &f.s("data")]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        f
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.p(rel).display().to_string()
    }

    fn run(&self, args: &[&str]) -> std::process::Output {
        dtpp().args(args).env("DTPP_RUN_ROOT", self.p("root")).output().unwrap()
    }

    fn train(&self, out: &str, extra: &[&str]) -> std::process::Output {
        let mut args = vec!["train", "--config", "C", "--data", "D", "--fold", "0", "--out", out];
        let (c, d) = (self.s("config.json"), self.s("data"));
        args[2] = &c;
        args[4] = &d;
        let o = self.s(out);
        args[8] = &o;
        args.extend_from_slice(extra);
        self.run(&args)
    }
}

fn code(o: &std::process::Output) -> i32 {
    o.status.code().unwrap()
}

fn hash_dir(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn gen_data_is_deterministic_and_round_trips() {
    let f = Fixture::new();
    let out = f.run(&["gen-data", "--spec", &f.s("spec.json"), "--out", &f.s("again")]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("labeled_target"));
    assert_eq!(hash_dir(&f.p("data")), hash_dir(&f.p("again")));
    let d = load_dataset(&f.p("data")).unwrap();
    assert_eq!(d.samples.len(), 16);
    assert_eq!(d.num_classes, 4);
}

#[test]
fn gen_data_names_the_missing_field() {
    let f = Fixture::new();
    let broken = SMALL_SPEC.replace("\"num_classes\": 4,", "");
    fs::write(f.p("broken.json"), broken).unwrap();
    let out = f.run(&["gen-data", "--spec", &f.s("broken.json"), "--out", &f.s("x")]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("num_classes"));
}

#[test]
fn train_respects_the_mode_and_is_reproducible() {
    let f = Fixture::new();
    for run in ["a", "b"] {
        let out = f.train(run, &["--set", "mode=supervised_only"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let log_a = fs::read_to_string(f.p("a/train_log.csv")).unwrap();
    assert_eq!(log_a, fs::read_to_string(f.p("b/train_log.csv")).unwrap());
    let logs = dualteacher::trainer::read_log(&f.p("a/train_log.csv")).unwrap();
    assert!(!logs.is_empty());
    assert!(logs.iter().all(|r| r.phases == "student"));
    assert!(f.p("a/checkpoints/student.bin").exists());
    assert!(!f.p("a/checkpoints/inter_teacher.bin").exists());
}

#[test]
fn unknown_override_lists_valid_keys() {
    let f = Fixture::new();
    let out = f.train("a", &["--set", "no_such_key=1"]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("no_such_key") && err.contains("lambda_kd"), "{err}");
}

#[test]
fn invalid_mode_is_a_config_error() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("a", &["--set", "mode=half"])), 2);
}

#[test]
fn eval_without_checkpoints_exits_3() {
    let f = Fixture::new();
    fs::create_dir_all(f.p("empty")).unwrap();
    let out = f.run(&["eval", "--run", &f.s("empty"), "--data", &f.s("data"), "--fold", "0"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn divergence_exits_4() {
    let f = Fixture::new();
    let out = f.train("a", &["--set", "mode=full", "--set", "lambda_kd=1e308"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn default_run_dir_uses_the_run_root() {
    let f = Fixture::new();
    let out = f.run(&[
        "train",
        "--config",
        &f.s("config.json"),
        "--data",
        &f.s("data"),
        "--set",
        "mode=supervised_only",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(f.p("root/supervised_only_seed0_fold0/train_log.csv").exists());
}

#[test]
fn report_on_identical_runs_is_degenerate() {
    let f = Fixture::new();
    for run in ["a", "b"] {
        assert!(f.train(run, &["--set", "mode=supervised_only"]).status.success());
        let out = f.run(&["eval", "--run", &f.s(run), "--data", &f.s("data"), "--fold", "0"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let out = f.run(&["report", "--runs", &f.s("a"), &f.s("b"), "--out", &f.s("rep")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut r = csv::Reader::from_path(f.p("rep/t_tests.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][5], "true");
    assert!(f.p("rep/bland_altman_a__b.csv").exists());
}

#[test]
fn ablate_emits_one_row_per_mode_with_recomputable_means() {
    let f = Fixture::new();
    let out = f.run(&[
        "ablate",
        "--config",
        &f.s("config.json"),
        "--data",
        &f.s("data"),
        "--modes",
        "vanilla_two_teacher,full",
        "--seeds",
        "0,1",
        "--folds",
        "0",
        "--out",
        &f.s("abl"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut r = csv::Reader::from_path(f.p("abl/report/table.csv")).unwrap();
    let table: Vec<TableRow> = r.deserialize().map(|x| x.unwrap()).collect();
    assert_eq!(table.iter().map(|t| t.mode.as_str()).collect::<Vec<_>>(), ["vanilla_two_teacher", "full"]);

    for row in &table {
        let mut run_means = Vec::new();
        for seed in 0..2 {
            let dir = f.p(&format!("abl/{}/seed{seed}_fold0", row.mode));
            let samples = read_sample_rows(&dir.join("eval/per_sample.csv")).unwrap();
            let classes: Vec<String> = read_run(&dir).unwrap().summary.class_names;
            let class_means: Vec<f64> = classes
                .iter()
                .map(|c| {
                    let v: Vec<f64> = samples.iter().filter(|s| &s.class == c).map(|s| s.dice).collect();
                    v.iter().sum::<f64>() / v.len() as f64
                })
                .collect();
            run_means.push(class_means.iter().sum::<f64>() / class_means.len() as f64);
        }
        let expected = run_means.iter().sum::<f64>() / 2.0;
        assert!((row.mean_dice - expected).abs() < 1e-9, "{} vs {expected}", row.mean_dice);
        assert_eq!(row.runs, 2);
    }

    // A second invocation keeps the evaluated runs.
    let before = fs::metadata(f.p("abl/full/seed0_fold0/eval/summary.json")).unwrap().modified().unwrap();
    let again = f.run(&[
        "ablate",
        "--config",
        &f.s("config.json"),
        "--data",
        &f.s("data"),
        "--modes",
        "vanilla_two_teacher,full",
        "--seeds",
        "0,1",
        "--folds",
        "0",
        "--out",
        &f.s("abl"),
    ]);
    assert!(again.status.success());
    let after = fs::metadata(f.p("abl/full/seed0_fold0/eval/summary.json")).unwrap().modified().unwrap();
    assert_eq!(before, after);
}

#[test]
fn resume_flag_requires_a_checkpoint() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("nothing", &["--resume"])), 3);
}
