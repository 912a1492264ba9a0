//! Command-line entry point.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 numeric
//! failure (divergence or non-finite values).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    answer_divergence_matrix, cka_timeline, correlation_csv, embedding_distance_matrix, forgetting_correlation,
    pair_matrix_csv, Modality, PairMatrix, ProbeSlice,
};
use crate::config::ExperimentConfig;
use crate::data::{load_sequence, Split, TaskSequence};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{Checkpoint, Mlp};
use crate::report::{fmt_opt, write_atomic, write_json, Csv};
use crate::runner::{
    aggregate, mean_std, pairwise_matrix, run_fixed, run_joint, run_sequence, sweep, train_first_task, Aggregate,
    RunConfig,
};
use crate::synth::{synth_sequence, write_sequence, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "clvqa", version, about = "Continual-learning experiments on multi-label answer classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic task sequence (JSONL splits plus manifest).
    Synth(SynthArgs),
    /// Train one strategy over the task sequence.
    Run(ExpArgs),
    /// Relative accuracy drop for every ordered pair of tasks.
    Pairwise(ExpArgs),
    /// Run strategies over task orders and seeds in parallel.
    Sweep(ExpArgs),
    /// Aggregate metrics of finished run directories by strategy.
    Report(ReportArgs),
    /// Task dissimilarities, their correlation with forgetting, and CKA drift.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct ExpArgs {
    #[arg(long, env = "CLVQA_CONFIG")]
    pub config: PathBuf,
    #[arg(long, env = "CLVQA_SEED")]
    pub seed: Option<u64>,
    /// Comma-separated permutation of task indices, e.g. `2,0,1`.
    #[arg(long, env = "CLVQA_ORDER", value_delimiter = ',')]
    pub order: Option<Vec<usize>>,
    #[arg(long, env = "CLVQA_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, env = "CLVQA_OUT")]
    pub out: PathBuf,
    /// TOML file with synthetic-data parameters; flags override it.
    #[arg(long, env = "CLVQA_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub samples_per_task: Option<usize>,
    #[arg(long)]
    pub eval_per_task: Option<usize>,
    #[arg(long)]
    pub classes_per_task: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub answer_overlap: Option<f64>,
    #[arg(long)]
    pub input_shift: Option<f64>,
    #[arg(long)]
    pub class_separation: Option<f64>,
    #[arg(long, env = "CLVQA_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories containing `run.json`.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, env = "CLVQA_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub exp: ExpArgs,
    /// Pairwise-drop CSV written by `pairwise`; computed afresh when absent.
    #[arg(long)]
    pub pairwise: Option<PathBuf>,
    /// Run directory whose checkpoints feed the CKA timelines.
    #[arg(long)]
    pub run: Option<PathBuf>,
}

/// Parses arguments, runs the command and maps failures to exit codes.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        4
    } else if matches!(e, Error::Config(_)) {
        2
    } else {
        3
    }
}

pub fn execute(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Run(a) => cmd_run(a),
        Command::Pairwise(a) => cmd_pairwise(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
        Command::Analyze(a) => cmd_analyze(a),
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Wall-clock information kept apart from the deterministic artifacts.
#[derive(Serialize)]
struct Sidecar<'a> {
    command: &'a str,
    started_unix: f64,
    finished_unix: f64,
    version: &'a str,
}

fn write_sidecar(out: &Path, command: &str, started: f64) -> Result<()> {
    write_json(
        &out.join("timing.json"),
        &Sidecar {
            command,
            started_unix: started,
            finished_unix: unix_now(),
            version: env!("CARGO_PKG_VERSION"),
        },
    )
}

fn load_experiment(a: &ExpArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(order) = &a.order {
        cfg.order = Some(order.clone());
    }
    if let Some(out) = &a.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn load_embeddings(cfg: &ExperimentConfig) -> Result<Option<EmbeddingTable>> {
    cfg.embeddings.path.as_deref().map(EmbeddingTable::load).transpose()
}

fn config_error(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// Loads the manifest; an unreadable manifest or permutation counts as a configuration error.
fn load_data(cfg: &ExperimentConfig) -> Result<TaskSequence> {
    let seq = load_sequence(&cfg.data).map_err(|e| match e {
        Error::Io { .. } => config_error(e),
        other => other,
    })?;
    if let Some(order) = &cfg.order {
        crate::data::check_permutation(order, seq.len())?;
    }
    Ok(seq)
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            toml::from_str::<SynthConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    set!(
        tasks,
        samples_per_task,
        eval_per_task,
        classes_per_task,
        feature_dim,
        answer_overlap,
        input_shift,
        class_separation,
        seed
    );
    let seq = synth_sequence(&cfg)?;
    let manifest = write_sequence(&a.out, &seq)?;
    write_json(&a.out.join("synth.json"), &cfg)?;
    println!("{}", manifest.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub strategy: String,
    pub seed: u64,
    /// Manifest indices in training order.
    pub order: Vec<usize>,
    pub tasks: Vec<String>,
    pub config: RunConfig,
    pub metrics: MetricsReport,
}

fn cmd_run(a: &ExpArgs) -> Result<()> {
    let started = unix_now();
    let cfg = load_experiment(a)?;
    let seq = load_data(&cfg)?;
    let table = load_embeddings(&cfg)?;
    let run = cfg.run_config()?;
    let out = run_sequence(&seq, &run)?;
    let metrics = MetricsReport::compute(&out.matrix, Some(&out.log), table.as_ref())?;
    let dir = &cfg.out;
    out.matrix.to_csv().write(&dir.join("accuracy_matrix.csv"))?;
    write_atomic(&dir.join("predictions.jsonl"), &out.log.to_jsonl()?)?;
    metrics.csv().write(&dir.join("metrics.csv"))?;
    if metrics.sbwt.is_some() {
        metrics.sbwt_csv(&out.matrix.tasks).write(&dir.join("sbwt_per_task.csv"))?;
    }
    for (t, m) in out.checkpoints.iter().enumerate() {
        write_json(&dir.join("checkpoints").join(format!("task_{}.json", t + 1)), &m.to_checkpoint())?;
    }
    write_json(
        &dir.join("run.json"),
        &RunManifest {
            strategy: run.strategy.label().to_string(),
            seed: run.seed,
            order: out.order.clone(),
            tasks: out.matrix.tasks.clone(),
            config: run,
            metrics: metrics.clone(),
        },
    )?;
    write_sidecar(dir, "run", started)?;
    println!(
        "final_accuracy={:.4} learned_accuracy={:.4} bwt={} sbwt={}",
        metrics.final_accuracy,
        metrics.learned_accuracy,
        fmt_opt(metrics.bwt),
        fmt_opt(metrics.sbwt.as_ref().map(|s| s.value))
    );
    Ok(())
}

fn drops_matrix(seq: &TaskSequence, cfg: &ExperimentConfig) -> Result<(PairMatrix, Csv)> {
    let base = cfg.run_config()?;
    let results = pairwise_matrix(seq, &base, &cfg.pairwise);
    let names: Vec<String> = seq.tasks().iter().map(|t| t.name.clone()).collect();
    let mut detail = Csv::new(&["first", "second", "a11", "a12", "drop", "error"]);
    let mut drops: PairMatrix = vec![vec![None; seq.len()]; seq.len()];
    for (i, row) in results.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            match cell {
                None => {}
                Some(Ok(r)) => {
                    drops[i][j] = Some(r.drop);
                    detail.row(&[
                        names[i].clone(),
                        names[j].clone(),
                        r.a11.to_string(),
                        r.a12.to_string(),
                        r.drop.to_string(),
                        String::new(),
                    ]);
                }
                Some(Err(e)) => {
                    log::warn!("pairwise {} -> {}: {e}", names[i], names[j]);
                    detail.row(&[names[i].clone(), names[j].clone(), String::new(), String::new(), String::new(), e.clone()]);
                }
            }
        }
    }
    Ok((drops, detail))
}

fn percent(m: &PairMatrix) -> PairMatrix {
    m.iter().map(|r| r.iter().map(|v| v.map(|d| 100.0 * d)).collect()).collect()
}

fn cmd_pairwise(a: &ExpArgs) -> Result<()> {
    let started = unix_now();
    let cfg = load_experiment(a)?;
    let seq = load_data(&cfg)?;
    let (drops, detail) = drops_matrix(&seq, &cfg)?;
    let names: Vec<String> = seq.tasks().iter().map(|t| t.name.clone()).collect();
    pair_matrix_csv(&names, &percent(&drops)).write(&cfg.out.join("pairwise.csv"))?;
    detail.write(&cfg.out.join("pairwise_detail.csv"))?;
    write_sidecar(&cfg.out, "pairwise", started)?;
    Ok(())
}

fn identity_orders(cfg: &ExperimentConfig, n: usize) -> Vec<Vec<usize>> {
    if !cfg.sweep.orders.is_empty() {
        cfg.sweep.orders.clone()
    } else {
        vec![cfg.order.clone().unwrap_or_else(|| (0..n).collect())]
    }
}

fn order_label(order: &[usize]) -> String {
    order.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

fn cmd_sweep(a: &ExpArgs) -> Result<()> {
    let started = unix_now();
    let cfg = load_experiment(a)?;
    let seq = load_data(&cfg)?;
    let table = load_embeddings(&cfg)?;
    let orders = identity_orders(&cfg, seq.len());
    for o in &orders {
        crate::data::check_permutation(o, seq.len())?;
    }
    let seeds = if a.seed.is_some() { vec![cfg.seed] } else { cfg.sweep.seeds.clone() };
    let strategies = if cfg.sweep.strategies.is_empty() {
        vec![cfg.strategy.name.clone()]
    } else {
        cfg.sweep.strategies.clone()
    };
    let mut runs = Csv::new(&["strategy", "order", "seed", "final_accuracy", "learned_accuracy", "bwt", "sbwt", "error"]);
    let mut summary = Csv::new(&["strategy", "metric", "mean", "std", "n"]);
    let mut reports = Vec::new();
    for name in &strategies {
        let base = cfg.run_config_for(name)?;
        let report = sweep(&seq, &base, &orders, &seeds, table.as_ref());
        for r in &report.runs {
            let id = format!("{name}/order={}/seed={}", order_label(&r.order).replace(' ', "-"), r.seed);
            match &r.metrics {
                Ok(m) => println!(
                    "[{id}] final_accuracy={:.4} bwt={}",
                    m.final_accuracy,
                    fmt_opt(m.bwt)
                ),
                Err(e) => println!("[{id}] failed: {e}"),
            }
            let mut fields = vec![name.clone(), order_label(&r.order), r.seed.to_string()];
            match &r.metrics {
                Ok(m) => {
                    fields.extend(m.named().iter().map(|(_, v)| fmt_opt(*v)));
                    fields.push(String::new());
                }
                Err(e) => {
                    fields.extend(std::iter::repeat_n(String::new(), 4));
                    fields.push(e.clone());
                }
            }
            runs.row(&fields);
        }
        for (metric, ag) in &report.aggregate {
            summary.row(&[name.clone(), metric.clone(), ag.mean.to_string(), ag.std.to_string(), ag.n.to_string()]);
        }
        reports.push(report);
    }
    if cfg.sweep.baselines {
        let base = cfg.run_config()?;
        for (label, joint) in [("fixed", false), ("joint", true)] {
            let mut finals = Vec::new();
            for o in &orders {
                for &seed in &seeds {
                    let run = RunConfig {
                        seed,
                        order: Some(o.clone()),
                        ..base.clone()
                    };
                    let acc = if joint { run_joint(&seq, &run)? } else { run_fixed(&seq, &run)? };
                    let fa = acc.iter().sum::<f64>() / acc.len() as f64;
                    runs.row(&[
                        label.to_string(),
                        order_label(o),
                        seed.to_string(),
                        fa.to_string(),
                        String::new(),
                        String::new(),
                        String::new(),
                        String::new(),
                    ]);
                    finals.push(fa);
                }
            }
            let (mean, std) = mean_std(&finals);
            summary.row(&[label.to_string(), "final_accuracy".into(), mean.to_string(), std.to_string(), finals.len().to_string()]);
        }
    }
    runs.write(&cfg.out.join("sweep_runs.csv"))?;
    summary.write(&cfg.out.join("sweep_summary.csv"))?;
    write_json(&cfg.out.join("sweep.json"), &reports)?;
    write_sidecar(&cfg.out, "sweep", started)?;
    print!("{}", summary.as_str());
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let mut grouped: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for dir in &a.runs {
        let path = dir.join("run.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let run: RunManifest = serde_json::from_str(&text)?;
        let entry = grouped.entry(run.strategy.clone()).or_default();
        for (k, v) in run.metrics.named() {
            if let Some(v) = v {
                entry.entry(k.to_string()).or_default().push(v);
            }
        }
    }
    let mut csv = Csv::new(&["strategy", "metric", "mean", "std", "n"]);
    for (strategy, values) in &grouped {
        let agg: BTreeMap<String, Aggregate> = aggregate(values);
        for (metric, ag) in agg {
            csv.row(&[strategy.clone(), metric, ag.mean.to_string(), ag.std.to_string(), ag.n.to_string()]);
        }
    }
    csv.write(&a.out)?;
    print!("{}", csv.as_str());
    Ok(())
}

/// Reads a task-by-task matrix written by [`pair_matrix_csv`].
pub fn read_pair_matrix(path: &Path, scale: f64) -> Result<(Vec<String>, PairMatrix)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Format {
            path: path.into(),
            line: 1,
            message: "empty file".into(),
        })?
        .split(',')
        .collect();
    let names: Vec<String> = header.iter().skip(1).map(|s| s.to_string()).collect();
    let mut m = Vec::new();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != names.len() + 1 {
            return Err(Error::Format {
                path: path.into(),
                line: n + 2,
                message: format!("expected {} fields, found {}", names.len() + 1, fields.len()),
            });
        }
        let row = fields[1..]
            .iter()
            .map(|f| {
                if f.is_empty() {
                    Ok(None)
                } else {
                    f.parse::<f64>().map(|v| Some(v / scale)).map_err(|e| Error::Format {
                        path: path.into(),
                        line: n + 2,
                        message: format!("`{f}`: {e}"),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        m.push(row);
    }
    Ok((names, m))
}

fn load_checkpoints(run: &Path) -> Result<(RunManifest, Vec<Mlp>)> {
    let path = run.join("run.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    let mut models = Vec::new();
    for t in 1..=manifest.tasks.len() {
        let p = run.join("checkpoints").join(format!("task_{t}.json"));
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))?;
        models.push(Mlp::from_checkpoint(&ck)?);
    }
    Ok((manifest, models))
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let started = unix_now();
    let cfg = load_experiment(&a.exp)?;
    let seq = load_data(&cfg)?;
    let out = cfg.out.join("analysis");
    let names: Vec<String> = seq.tasks().iter().map(|t| t.name.clone()).collect();

    let drops = match &a.pairwise {
        Some(p) => {
            let (cols, m) = read_pair_matrix(p, 100.0)?;
            if cols != names {
                return Err(Error::Config(format!(
                    "{} covers tasks {cols:?}, manifest has {names:?}",
                    p.display()
                )));
            }
            m
        }
        None => {
            let (m, detail) = drops_matrix(&seq, &cfg)?;
            detail.write(&out.join("pairwise_detail.csv"))?;
            m
        }
    };
    pair_matrix_csv(&names, &percent(&drops)).write(&out.join("pairwise.csv"))?;

    let proxy = train_first_task(&seq, &cfg.run_config()?)?;
    let mut factors = vec![("answer_divergence".to_string(), answer_divergence_matrix(&seq, cfg.analysis.alpha)?)];
    for (label, modality) in [("image", Modality::Image), ("question", Modality::Question), ("joint_proxy", Modality::Joint)] {
        match embedding_distance_matrix(&seq, modality, Some(&proxy)) {
            Ok(m) => factors.push((format!("{label}_distance"), m)),
            Err(e) => log::warn!("{label} distance unavailable: {e}"),
        }
    }
    for (name, m) in &factors {
        pair_matrix_csv(&names, m).write(&out.join(format!("{name}.csv")))?;
    }
    correlation_csv(&forgetting_correlation(&drops, &factors)).write(&out.join("correlation.csv"))?;

    if let Some(run) = &a.run {
        let (manifest, models) = load_checkpoints(run)?;
        let ordered = seq.reordered(&manifest.order)?;
        let probe = ordered.encode(0, Split::Val)?.inputs;
        let mut csv = Csv::new(&["slice", "layer", "checkpoint", "value"]);
        for slice in [ProbeSlice::All, ProbeSlice::ImageSlice, ProbeSlice::QuestionSlice] {
            cka_timeline(&models, probe.view(), ordered.image_dim(), slice)?.append_csv(&mut csv);
        }
        csv.write(&out.join("cka.csv"))?;
    }
    write_sidecar(&out, "analyze", started)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Dataset("x".into())), 3);
        assert_eq!(
            exit_code(&Error::Diverged {
                task: 0,
                step: 1,
                message: "nan".into()
            }),
            4
        );
    }

    #[test]
    fn order_flag_is_comma_separated() {
        let cli = Cli::try_parse_from(["clvqa", "run", "--config", "c.toml", "--order", "2,0,1"]).unwrap();
        match cli.command {
            Command::Run(a) => assert_eq!(a.order, Some(vec![2, 0, 1])),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pair_matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        let m = vec![vec![None, Some(-12.5)], vec![Some(3.0), None]];
        let p = dir.path().join("m.csv");
        pair_matrix_csv(&names, &m).write(&p).unwrap();
        let (cols, back) = read_pair_matrix(&p, 100.0).unwrap();
        assert_eq!(cols, names);
        assert_eq!(back, vec![vec![None, Some(-0.125)], vec![Some(0.03), None]]);
    }
}
