//! Sequential training, evaluation checkpoints, baselines, the pairwise
//! forgetting protocol and order/seed sweeps.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{concatenate, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{check_permutation, EncodedSplit, Sample, Split, TaskDataset, TaskSequence};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::loss::bce_dense;
use crate::metrics::MetricsReport;
use crate::model::{Activation, HeadInit, Mlp};
use crate::optim::{AdamParams, LrGroups, Optimizer, OptimizerKind};
use crate::report::{fmt_opt, Csv};
use crate::strategies::{Batch, Example, Finetune, Strategy, StrategyConfig, TaskContext};
use crate::synth::mix;

const STREAM_INIT: u64 = 1;
const STREAM_BATCH: u64 = 2;
const STREAM_STRATEGY: u64 = 3;
const STREAM_HEAD: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Standard deviation of new head rows; 0 gives zero rows.
    pub head_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![64],
            activation: Activation::Relu,
            head_init_std: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub steps_per_task: usize,
    /// Learning-rate multiplier of the hidden layers relative to the head.
    pub trunk_lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamParams::default();
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: 8e-5,
            batch_size: 512,
            steps_per_task: 400,
            trunk_lr_scale: 0.1,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps_per_task == 0 {
            return Err(Error::Config("batch_size and steps_per_task must be positive".into()));
        }
        for (name, v) in [("lr", self.lr), ("trunk_lr_scale", self.trunk_lr_scale)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("optim.{name}={v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    fn optimizer(&self) -> Optimizer {
        Optimizer::new(
            self.optimizer,
            self.lr,
            AdamParams {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            LrGroups {
                trunk: self.trunk_lr_scale,
                head: 1.0,
            },
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub strategy: StrategyConfig,
    pub seed: u64,
    /// Training order as a permutation of manifest indices; `None` keeps the manifest order.
    pub order: Option<Vec<usize>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            strategy: StrategyConfig::Finetune,
            seed: 0,
            order: None,
        }
    }
}

impl RunConfig {
    fn head_init(&self, t: usize) -> HeadInit {
        if self.model.head_init_std > 0.0 {
            HeadInit::Gaussian {
                std: self.model.head_init_std,
                seed: mix(self.seed, STREAM_HEAD, t as u64),
            }
        } else {
            HeadInit::Zero
        }
    }

    fn init_model(&self, input_dim: usize) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, STREAM_INIT, 0));
        Mlp::new(input_dim, &self.model.hidden, self.model.activation, &mut rng)
    }

    fn ordered(&self, seq: &TaskSequence) -> Result<TaskSequence> {
        match &self.order {
            Some(order) => seq.reordered(order),
            None => Ok(seq.clone()),
        }
    }
}

/// Cycles through a split in epochs, reshuffling each time it is exhausted.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchSampler { order, pos: 0, rng }
    }

    pub fn next_indices(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// `A[t][i]`: accuracy on task `i`'s test split after training task `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub tasks: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: Vec<String>) -> Self {
        let n = tasks.len();
        AccuracyMatrix {
            tasks,
            values: vec![vec![None; n]; n],
        }
    }

    /// Fully populated matrix from rows, with generated task names.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        AccuracyMatrix {
            tasks: (0..rows.len()).map(|i| format!("task{}", i + 1)).collect(),
            values: rows.into_iter().map(|r| r.into_iter().map(Some).collect()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.values.get(t).and_then(|r| r.get(i)).copied().flatten()
    }

    pub fn to_csv(&self) -> Csv {
        let mut header = vec!["after".to_string()];
        header.extend(self.tasks.iter().cloned());
        let mut csv = Csv::new(&header);
        for (t, row) in self.values.iter().enumerate() {
            let mut fields = vec![self.tasks[t].clone()];
            fields.extend(row.iter().map(|v| fmt_opt(*v)));
            csv.row(&fields);
        }
        csv
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    /// Position (in training order) of the task after which the model was evaluated.
    pub checkpoint: usize,
    pub task: usize,
    pub sample: String,
    pub pred: usize,
    pub answer: String,
    pub acc: f64,
}

/// Every test prediction made at every checkpoint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionLog {
    pub records: Vec<PredictionRecord>,
}

impl PredictionLog {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n").map_err(|e| Error::io("<prediction log>", e))?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(buf)
    }

    pub fn read_jsonl(path: &Path) -> Result<PredictionLog> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })?);
        }
        Ok(PredictionLog { records })
    }

    /// Records of one `(checkpoint, task)` cell keyed by sample id.
    pub fn cell(&self, checkpoint: usize, task: usize) -> BTreeMap<&str, &PredictionRecord> {
        self.records
            .iter()
            .filter(|r| r.checkpoint == checkpoint && r.task == task)
            .map(|r| (r.sample.as_str(), r))
            .collect()
    }

    pub fn checkpoints(&self) -> usize {
        self.records.iter().map(|r| r.checkpoint + 1).max().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Train,
    Eval,
}

/// One read of a task split, tagged with the task being trained at the time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Access {
    pub stage: Stage,
    pub during: usize,
    pub task: usize,
    pub split: Split,
}

pub struct RunOutput {
    /// Manifest index of each trained task, in training order.
    pub order: Vec<usize>,
    pub matrix: AccuracyMatrix,
    pub log: PredictionLog,
    /// Model after each task.
    pub checkpoints: Vec<Mlp>,
    pub access: Vec<Access>,
    /// Training loss after the last step of each task.
    pub final_losses: Vec<f64>,
}

/// Argmax per row, ties going to the lowest id, and the soft-target score of it.
pub fn predict(model: &Mlp, split: &EncodedSplit) -> Result<Vec<(usize, f64)>> {
    if model.num_classes() == 0 {
        return Err(Error::Head("cannot predict with an empty head".into()));
    }
    let logits = model.logits(split.inputs.view())?;
    Ok(logits
        .rows()
        .into_iter()
        .zip(&split.targets)
        .map(|(row, targets)| {
            let mut best = 0;
            for (c, &z) in row.iter().enumerate() {
                if z > row[best] {
                    best = c;
                }
            }
            let acc = targets.iter().find(|(id, _)| *id == best).map_or(0.0, |&(_, s)| s);
            (best, acc)
        })
        .collect())
}

struct Evaluator<'a> {
    seq: &'a TaskSequence,
    tests: Vec<EncodedSplit>,
}

impl<'a> Evaluator<'a> {
    fn new(seq: &'a TaskSequence) -> Result<Self> {
        let tests = (0..seq.len())
            .map(|i| seq.encode(i, Split::Test))
            .collect::<Result<_>>()?;
        Ok(Evaluator { seq, tests })
    }

    /// Mean accuracy on task `i`, appending per-sample records to `log`.
    fn evaluate(&self, model: &Mlp, checkpoint: usize, i: usize, log: &mut PredictionLog) -> Result<f64> {
        let preds = predict(model, &self.tests[i])?;
        let samples = self.seq.task(i).split(Split::Test);
        let mut total = 0.0;
        for (s, &(pred, acc)) in samples.iter().zip(&preds) {
            total += acc;
            log.records.push(PredictionRecord {
                checkpoint,
                task: i,
                sample: s.id.clone(),
                pred,
                answer: self.seq.vocab().answer(pred).unwrap_or_default().to_string(),
                acc,
            });
        }
        Ok(total / preds.len() as f64)
    }
}

fn train_task(
    model: &mut Mlp,
    strategy: &mut dyn Strategy,
    ctx: &TaskContext,
    train: &TrainConfig,
    sampler_seed: u64,
) -> Result<f64> {
    let samples = ctx.task.split(Split::Train);
    let mut sampler = BatchSampler::new(ctx.train.len(), sampler_seed);
    let mut optimizer = train.optimizer();
    let mut last = f64::NAN;
    strategy.begin_task(ctx, model)?;
    for step in 0..train.steps_per_task {
        let share = strategy.current_share(train.batch_size).min(train.batch_size);
        let idx = sampler.next_indices(share);
        let mut examples: Vec<Example> = idx.iter().map(|&i| Example::from_encoded(ctx.train, i)).collect();
        let current: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        strategy.augment(ctx, &current, train.batch_size - share, &mut examples)?;
        let batch = Batch::from_examples(&examples, model.input_dim(), model.num_classes())?;
        let (logits, trace) = model.forward(batch.inputs.view())?;
        let (mut loss, mut dlogits) = bce_dense(logits.view(), batch.targets.view())?;
        loss += strategy.adjust_logit_grad(ctx, &batch, &logits, &mut dlogits)?;
        let mut grad = model.backward(&trace, &dlogits)?;
        loss += strategy.adjust_param_grad(ctx, model, &mut grad)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                task: ctx.index,
                step,
                message: format!("loss is {loss}"),
            });
        }
        optimizer.step(model, &grad).map_err(|e| match e {
            Error::NonFinite { location } => Error::Diverged {
                task: ctx.index,
                step,
                message: format!("non-finite gradient at {location}"),
            },
            other => other,
        })?;
        last = loss;
    }
    strategy.end_task(ctx, model)?;
    Ok(last)
}

/// Trains tasks `0..stop` of the (reordered) sequence, evaluating every task
/// after each one.
fn run_prefix(seq: &TaskSequence, cfg: &RunConfig, stop: usize) -> Result<RunOutput> {
    cfg.train.validate()?;
    let order = cfg.order.clone().unwrap_or_else(|| (0..seq.len()).collect());
    check_permutation(&order, seq.len())?;
    let seq = cfg.ordered(seq)?;
    let vocab = seq.vocab();
    let evaluator = Evaluator::new(&seq)?;
    let mut strategy = cfg.strategy.build(mix(cfg.seed, STREAM_STRATEGY, 0))?;
    let mut model = cfg.init_model(seq.input_dim());
    let mut matrix = AccuracyMatrix::new(seq.tasks().iter().map(|t| t.name.clone()).collect());
    let mut log = PredictionLog::default();
    let mut checkpoints = Vec::new();
    let mut access = Vec::new();
    let mut final_losses = Vec::new();
    for t in 0..stop {
        let previous_classes = model.num_classes();
        model.expand_head(vocab.task_range(t).len(), cfg.head_init(t));
        access.push(Access {
            stage: Stage::Train,
            during: t,
            task: t,
            split: Split::Train,
        });
        let train = seq.encode(t, Split::Train)?;
        let ctx = TaskContext {
            index: t,
            task: seq.task(t),
            train: &train,
            vocab,
            classes: model.num_classes(),
            previous_classes,
        };
        let loss = train_task(&mut model, strategy.as_mut(), &ctx, &cfg.train, mix(cfg.seed, STREAM_BATCH, t as u64))?;
        log::info!(
            "{} task {}/{} ({}): final loss {loss:.5}",
            strategy.name(),
            t + 1,
            seq.len(),
            seq.task(t).name
        );
        final_losses.push(loss);
        for i in 0..seq.len() {
            access.push(Access {
                stage: Stage::Eval,
                during: t,
                task: i,
                split: Split::Test,
            });
            matrix.values[t][i] = Some(evaluator.evaluate(&model, t, i, &mut log)?);
        }
        checkpoints.push(model.clone());
    }
    Ok(RunOutput {
        order,
        matrix,
        log,
        checkpoints,
        access,
        final_losses,
    })
}

/// Trains every task in order with the configured strategy.
pub fn run_sequence(seq: &TaskSequence, cfg: &RunConfig) -> Result<RunOutput> {
    run_prefix(seq, cfg, seq.len())
}

/// Model after training on the first task alone.
pub fn train_first_task(seq: &TaskSequence, cfg: &RunConfig) -> Result<Mlp> {
    let mut out = run_prefix(seq, cfg, 1)?;
    Ok(out.checkpoints.remove(0))
}

/// Accuracy on every task after training on the first task only.
pub fn run_fixed(seq: &TaskSequence, cfg: &RunConfig) -> Result<Vec<f64>> {
    let out = run_prefix(seq, cfg, 1)?;
    Ok((0..seq.len()).map(|i| out.matrix.get(0, i).unwrap_or(0.0)).collect())
}

/// Trains once on the union of all training splits with the full head, for
/// `steps_per_task * T` steps, and returns per-task test accuracy.
pub fn run_joint(seq: &TaskSequence, cfg: &RunConfig) -> Result<Vec<f64>> {
    cfg.train.validate()?;
    let seq = cfg.ordered(seq)?;
    let vocab = seq.vocab();
    let mut model = cfg.init_model(seq.input_dim());
    model.expand_head(vocab.len(), cfg.head_init(0));
    let splits = (0..seq.len())
        .map(|t| seq.encode(t, Split::Train))
        .collect::<Result<Vec<_>>>()?;
    let union = EncodedSplit {
        inputs: concatenate(Axis(0), &splits.iter().map(|s| s.inputs.view()).collect::<Vec<_>>())
            .map_err(|e| Error::Dataset(format!("joint training set: {e}")))?,
        targets: splits.iter().flat_map(|s| s.targets.iter().cloned()).collect(),
    };
    let joint = TaskDataset::merged("joint", seq.tasks());
    let ctx = TaskContext {
        index: 0,
        task: &joint,
        train: &union,
        vocab,
        classes: model.num_classes(),
        previous_classes: 0,
    };
    let train = TrainConfig {
        steps_per_task: cfg.train.steps_per_task * seq.len(),
        ..cfg.train.clone()
    };
    train_task(&mut model, &mut Finetune, &ctx, &train, mix(cfg.seed, STREAM_BATCH, 0))?;
    let evaluator = Evaluator::new(&seq)?;
    let mut log = PredictionLog::default();
    (0..seq.len()).map(|i| evaluator.evaluate(&model, 0, i, &mut log)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairwiseConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PairwiseConfig {
    fn default() -> Self {
        PairwiseConfig {
            steps: 400,
            batch_size: 512,
            lr: 5e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PairwiseResult {
    pub a11: f64,
    pub a12: f64,
    pub drop: f64,
}

/// Finetunes on `first`, then on `second`, both for the pairwise step budget,
/// and reports the relative change of accuracy on `first`.
pub fn pairwise_protocol(
    first: &TaskDataset,
    second: &TaskDataset,
    base: &RunConfig,
    pw: &PairwiseConfig,
) -> Result<PairwiseResult> {
    let seq = TaskSequence::new(vec![first.clone(), second.clone()])?;
    let cfg = RunConfig {
        strategy: StrategyConfig::Finetune,
        order: None,
        train: TrainConfig {
            steps_per_task: pw.steps,
            batch_size: pw.batch_size,
            lr: pw.lr,
            ..base.train.clone()
        },
        ..base.clone()
    };
    let out = run_sequence(&seq, &cfg)?;
    let a11 = out.matrix.get(0, 0).unwrap_or(0.0);
    let a12 = out.matrix.get(1, 0).unwrap_or(0.0);
    if a11 == 0.0 {
        return Err(Error::Undefined(format!(
            "relative drop for {} -> {}: accuracy after the first task is 0",
            first.name, second.name
        )));
    }
    Ok(PairwiseResult {
        a11,
        a12,
        drop: (a12 - a11) / a11,
    })
}

/// Relative drops for every ordered pair of distinct tasks; the diagonal is `None`.
pub fn pairwise_matrix(
    seq: &TaskSequence,
    base: &RunConfig,
    pw: &PairwiseConfig,
) -> Vec<Vec<Option<Result<PairwiseResult, String>>>> {
    let n = seq.len();
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).collect();
    let results: Vec<_> = cells
        .par_iter()
        .map(|&(i, j)| pairwise_protocol(seq.task(i), seq.task(j), base, pw).map_err(|e| e.to_string()))
        .collect();
    let mut m: Vec<Vec<Option<Result<PairwiseResult, String>>>> = vec![vec![None; n]; n];
    for ((i, j), r) in cells.into_iter().zip(results) {
        m[i][j] = Some(r);
    }
    m
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRun {
    pub order: Vec<usize>,
    pub seed: u64,
    pub metrics: Result<MetricsReport, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub strategy: String,
    pub runs: Vec<SweepRun>,
    pub aggregate: BTreeMap<String, Aggregate>,
}

/// Aggregates named metric values with mean and population std.
pub fn aggregate(values: &BTreeMap<String, Vec<f64>>) -> BTreeMap<String, Aggregate> {
    values
        .iter()
        .map(|(k, v)| {
            let (mean, std) = mean_std(v);
            (k.clone(), Aggregate { mean, std, n: v.len() })
        })
        .collect()
}

/// Runs every `(order, seed)` pair in parallel. Failed runs are kept as
/// errors and left out of the aggregate.
pub fn sweep(
    seq: &TaskSequence,
    base: &RunConfig,
    orders: &[Vec<usize>],
    seeds: &[u64],
    table: Option<&EmbeddingTable>,
) -> SweepReport {
    let jobs: Vec<(Vec<usize>, u64)> = orders
        .iter()
        .flat_map(|o| seeds.iter().map(move |&s| (o.clone(), s)))
        .collect();
    let runs: Vec<SweepRun> = jobs
        .into_par_iter()
        .map(|(order, seed)| {
            let cfg = RunConfig {
                seed,
                order: Some(order.clone()),
                ..base.clone()
            };
            let metrics = run_sequence(seq, &cfg)
                .and_then(|out| MetricsReport::compute(&out.matrix, Some(&out.log), table))
                .map_err(|e| e.to_string());
            if let Err(e) = &metrics {
                log::warn!("run order={order:?} seed={seed} failed: {e}");
            }
            SweepRun { order, seed, metrics }
        })
        .collect();
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for run in &runs {
        if let Ok(m) = &run.metrics {
            for (k, v) in m.named() {
                if let Some(v) = v {
                    values.entry(k.to_string()).or_default().push(v);
                }
            }
        }
    }
    SweepReport {
        strategy: base.strategy.label().to_string(),
        runs,
        aggregate: aggregate(&values),
    }
}
