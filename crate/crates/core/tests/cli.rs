use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use clvqa::data::load_sequence;

fn clvqa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clvqa"))
        .current_dir(dir)
        .args(args)
        .env_remove("CLVQA_SEED")
        .env_remove("CLVQA_ORDER")
        .env_remove("CLVQA_OUT")
        .env_remove("CLVQA_CONFIG")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = clvqa(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const FAST: &str = "[optim]\nlr = 1e-3\nbatch_size = 16\nsteps_per_task = 20\ntrunk_lr_scale = 1.0\n\
                    [pairwise]\nsteps = 20\nbatch_size = 16\nlr = 1e-3\n";

/// Synthetic data plus a config file `exp.toml` pointing at it.
fn workspace(tasks: usize, extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "synth",
            "--out",
            "data",
            "--tasks",
            &tasks.to_string(),
            "--samples-per-task",
            "60",
            "--eval-per-task",
            "20",
        ],
    );
    fs::write(
        dir.path().join("exp.toml"),
        format!("data = \"data/manifest.toml\"\n{extra}{FAST}"),
    )
    .unwrap();
    dir
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn synth_two_tasks_writes_task_files_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--out", "d", "--tasks", "2", "--samples-per-task", "30"]);
    let names: BTreeSet<String> = fs::read_dir(dir.path().join("d"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    for t in ["task1", "task2"] {
        for s in ["train", "val", "test"] {
            assert!(names.contains(&format!("{t}.{s}.jsonl")), "{names:?}");
        }
    }
    assert!(names.contains("manifest.toml"));
    assert_eq!(load_sequence(&dir.path().join("d/manifest.toml")).unwrap().len(), 2);
}

#[test]
fn synth_overlap_controls_class_sets() {
    let dir = tempfile::tempdir().unwrap();
    let classes = |overlap: &str| {
        let out = format!("o{overlap}");
        ok(
            dir.path(),
            &["synth", "--out", &out, "--tasks", "3", "--samples-per-task", "400", "--answer-overlap", overlap],
        );
        let seq = load_sequence(&dir.path().join(out).join("manifest.toml")).unwrap();
        seq.tasks().iter().map(|t| t.class_set().clone()).collect::<Vec<_>>()
    };
    let same = classes("1");
    assert!(same.windows(2).all(|w| w[0] == w[1]));
    let disjoint = classes("0");
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(disjoint[i].is_disjoint(&disjoint[j]));
        }
    }
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(dir.path(), &["synth", "--out", out, "--tasks", "2", "--samples-per-task", "30", "--seed", "5"]);
    }
    for f in ["task1.train.jsonl", "task2.test.jsonl", "manifest.toml"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }
}

#[test]
fn run_writes_matrix_log_and_manifest() {
    let dir = workspace(2, "");
    ok(dir.path(), &["run", "--config", "exp.toml", "--out", "r"]);
    let r = dir.path().join("r");
    let matrix = csv_rows(&r.join("accuracy_matrix.csv"));
    assert_eq!(matrix[0], ["after", "task1", "task2"]);
    assert_eq!(matrix.len(), 3);
    assert!(fs::read_to_string(r.join("predictions.jsonl")).unwrap().lines().count() > 0);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(r.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["strategy"], "finetune");
    assert_eq!(manifest["config"]["train"]["steps_per_task"], 20);
}

#[test]
fn flags_and_env_override_config() {
    let dir = workspace(3, "seed = 1\n");
    ok(dir.path(), &["run", "--config", "exp.toml", "--out", "flag", "--seed", "9", "--order", "2,0,1"]);
    let out = Command::new(env!("CARGO_BIN_EXE_clvqa"))
        .current_dir(dir.path())
        .args(["run"])
        .env("CLVQA_CONFIG", "exp.toml")
        .env("CLVQA_OUT", "env")
        .env("CLVQA_SEED", "9")
        .env("CLVQA_ORDER", "2,0,1")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let read = |d: &str| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(dir.path().join(d).join("run.json")).unwrap()).unwrap()
    };
    let (flag, env) = (read("flag"), read("env"));
    assert_eq!(flag["seed"], 9);
    assert_eq!(flag["order"], serde_json::json!([2, 0, 1]));
    assert_eq!(flag, env);
}

#[test]
fn missing_manifest_exits_2_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), "data = \"nowhere/manifest.toml\"\n").unwrap();
    let out = clvqa(dir.path(), &["run", "--config", "exp.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/manifest.toml"));
}

#[test]
fn unknown_key_exits_2() {
    let dir = workspace(2, "[optim]\nlearning_rate = 1.0\n");
    let out = clvqa(dir.path(), &["run", "--config", "exp.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--out", "data", "--tasks", "2", "--samples-per-task", "60"]);
    fs::write(
        dir.path().join("exp.toml"),
        "data = \"data/manifest.toml\"\n[optim]\noptimizer = \"sgd\"\nlr = 1e300\nbatch_size = 16\nsteps_per_task = 50\n",
    )
    .unwrap();
    let out = clvqa(dir.path(), &["run", "--config", "exp.toml"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pairwise_two_tasks_has_empty_diagonal() {
    let dir = workspace(2, "");
    ok(dir.path(), &["pairwise", "--config", "exp.toml", "--out", "p"]);
    let rows = csv_rows(&dir.path().join("p/pairwise.csv"));
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1][1], "");
    assert_eq!(rows[2][2], "");
    assert!(rows[1][2].parse::<f64>().is_ok());
    assert!(rows[2][1].parse::<f64>().is_ok());
}

fn write_run(dir: &Path, name: &str, strategy: &str, final_accuracy: f64) {
    let d = dir.join(name);
    fs::create_dir_all(&d).unwrap();
    let run = serde_json::json!({
        "strategy": strategy,
        "seed": 0,
        "order": [0, 1],
        "tasks": ["a", "b"],
        "config": serde_json::to_value(clvqa::runner::RunConfig::default()).unwrap(),
        "metrics": {
            "final_accuracy": final_accuracy,
            "learned_accuracy": 0.9,
            "bwt": -0.1,
            "sbwt": null
        }
    });
    fs::write(d.join("run.json"), run.to_string()).unwrap();
}

fn summary(path: &Path) -> Vec<(String, String, f64, f64, usize)> {
    csv_rows(path)
        .into_iter()
        .skip(1)
        .map(|r| (r[0].clone(), r[1].clone(), r[2].parse().unwrap(), r[3].parse().unwrap(), r[4].parse().unwrap()))
        .collect()
}

#[test]
fn report_single_run_has_zero_std() {
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), "r1", "er", 0.5);
    ok(dir.path(), &["report", "r1", "--out", "report.csv"]);
    for (_, _, _, std, n) in summary(&dir.path().join("report.csv")) {
        assert_eq!(std, 0.0);
        assert_eq!(n, 1);
    }
}

#[test]
fn report_matches_manual_aggregation_and_groups_strategies() {
    let dir = tempfile::tempdir().unwrap();
    let values = [0.2, 0.4, 0.5, 0.7, 0.9];
    let mut args = vec!["report".to_string()];
    for (k, v) in values.iter().enumerate() {
        write_run(dir.path(), &format!("er{k}"), "er", *v);
        args.push(format!("er{k}"));
    }
    write_run(dir.path(), "ft", "finetune", 0.1);
    args.extend(["ft".into(), "--out".into(), "report.csv".into()]);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(dir.path(), &args);
    let rows = summary(&dir.path().join("report.csv"));
    let er = rows.iter().find(|r| r.0 == "er" && r.1 == "final_accuracy").unwrap();
    let mean = values.iter().sum::<f64>() / 5.0;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
    assert!((er.2 - mean).abs() < 1e-12);
    assert!((er.3 - std).abs() < 1e-12);
    assert_eq!(er.4, 5);
    let ft = rows.iter().find(|r| r.0 == "finetune" && r.1 == "final_accuracy").unwrap();
    assert_eq!((ft.2, ft.4), (0.1, 1));
}

#[test]
fn sweep_prefixes_lines_and_writes_summary() {
    let dir = workspace(
        2,
        "[sweep]\norders = [[0, 1], [1, 0]]\nseeds = [0, 1]\nstrategies = [\"finetune\", \"er\"]\nbaselines = true\n",
    );
    let stdout = ok(dir.path(), &["sweep", "--config", "exp.toml", "--out", "s"]);
    assert!(stdout.lines().any(|l| l.starts_with("[er/order=1-0/seed=1] final_accuracy=")));
    let rows = summary(&dir.path().join("s/sweep_summary.csv"));
    let strategies: BTreeSet<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    assert_eq!(strategies, BTreeSet::from(["er", "finetune", "fixed", "joint"]));
    assert!(rows.iter().all(|r| r.4 == 4));
}

#[test]
fn analyze_emits_tables_and_cka_timeline() {
    let dir = workspace(3, "");
    ok(dir.path(), &["run", "--config", "exp.toml", "--out", "r"]);
    ok(dir.path(), &["analyze", "--config", "exp.toml", "--out", "a", "--run", "r"]);
    let a = dir.path().join("a/analysis");
    for f in ["pairwise.csv", "answer_divergence.csv", "correlation.csv", "cka.csv"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let cka = csv_rows(&a.join("cka.csv"));
    assert_eq!(cka[0], ["slice", "layer", "checkpoint", "value"]);
    // 3 slices x 1 hidden layer x 3 checkpoints
    assert_eq!(cka.len(), 1 + 9);
}
