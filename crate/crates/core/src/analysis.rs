//! Task-similarity measures, their rank correlation with pairwise forgetting,
//! and layerwise representation drift measured with linear CKA.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{Split, TaskDataset, TaskSequence};
use crate::embedding::cosine;
use crate::error::{Error, Result};
use crate::model::Mlp;
use crate::report::{fmt_opt, Csv};

pub const SKEW_ALPHA: f64 = 0.99;

/// Frequencies of each sample's top answer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnswerDistribution {
    pub probs: BTreeMap<String, f64>,
}

impl AnswerDistribution {
    pub fn from_counts(counts: &BTreeMap<String, usize>) -> Result<Self> {
        let total: usize = counts.values().sum();
        if total == 0 {
            return Err(Error::Undefined("answer distribution over zero samples".into()));
        }
        Ok(AnswerDistribution {
            probs: counts
                .iter()
                .filter(|(_, &c)| c > 0)
                .map(|(a, &c)| (a.clone(), c as f64 / total as f64))
                .collect(),
        })
    }

    /// Top answers over the train and validation splits.
    pub fn from_task(task: &TaskDataset) -> Result<Self> {
        let mut counts = BTreeMap::new();
        for s in task.train.iter().chain(&task.val) {
            if let Some(a) = s.top_answer() {
                *counts.entry(a.to_string()).or_insert(0) += 1;
            }
        }
        Self::from_counts(&counts)
    }

    pub fn prob(&self, answer: &str) -> f64 {
        self.probs.get(answer).copied().unwrap_or(0.0)
    }
}

/// `sum_a P(a) ln(P(a) / ((1 - alpha) P(a) + alpha Q(a)))`.
///
/// With `alpha = 1` an answer of `P` missing from `Q` makes the result
/// `f64::INFINITY`.
pub fn skew_divergence(p: &AnswerDistribution, q: &AnswerDistribution, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Range {
            what: "skew divergence alpha (must be in (0, 1])".into(),
            value: alpha,
        });
    }
    let mut total = 0.0;
    for (a, &pa) in &p.probs {
        if pa == 0.0 {
            continue;
        }
        let m = pa + alpha * (q.prob(a) - pa);
        if m == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += pa * (pa / m).ln();
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Question,
    /// Last hidden layer of a model trained on the first task, standing in
    /// for a joint vision-language embedding.
    Joint,
}

fn task_vectors(task: &TaskDataset, modality: Modality, proxy: Option<&Mlp>) -> Result<Array2<f64>> {
    let samples = task.split(Split::Train);
    let rows: Vec<Vec<f64>> = match modality {
        Modality::Image => samples.iter().map(|s| s.image_features.clone()).collect(),
        Modality::Question => samples.iter().map(|s| s.question_features.clone()).collect(),
        Modality::Joint => samples.iter().map(|s| s.input()).collect(),
    };
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Dataset(format!("task {}: ragged feature vectors", task.name)));
    }
    let x = Array2::from_shape_vec((rows.len(), dim), rows.concat())
        .map_err(|e| Error::Dataset(e.to_string()))?;
    if modality != Modality::Joint {
        return Ok(x);
    }
    let model = proxy.ok_or_else(|| Error::Config("joint distance needs a proxy model".into()))?;
    let (_, trace) = model.forward(x.view())?;
    Ok(trace.last().clone())
}

/// Cosine distance between the mean vectors of two tasks.
pub fn mean_embedding_distance(
    a: &TaskDataset,
    b: &TaskDataset,
    modality: Modality,
    proxy: Option<&Mlp>,
) -> Result<f64> {
    let mean = |t: &TaskDataset| -> Result<Vec<f64>> {
        let x = task_vectors(t, modality, proxy)?;
        x.mean_axis(Axis(0))
            .map(|m| m.to_vec())
            .ok_or_else(|| Error::Undefined(format!("task {} has no training samples", t.name)))
    };
    let (ma, mb) = (mean(a)?, mean(b)?);
    if ma.len() != mb.len() {
        return Err(Error::Shape {
            layer: format!("{modality:?} mean of {}", b.name),
            expected: ma.len(),
            found: mb.len(),
        });
    }
    cosine(&ma, &mb)
        .map(|c| 1.0 - c)
        .ok_or_else(|| Error::Undefined(format!("zero mean vector for {} or {}", a.name, b.name)))
}

/// Fractional ranks starting at 1, ties sharing their average rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Spearman {
    pub rho: f64,
    /// Two-sided, from the t approximation with `n - 2` degrees of freedom.
    pub p: f64,
    pub n: usize,
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Spearman> {
    let n = xs.len();
    if n != ys.len() {
        return Err(Error::Undefined(format!("spearman on {} vs {} values", n, ys.len())));
    }
    if n < 3 {
        return Err(Error::Undefined(format!("spearman needs at least 3 pairs, got {n}")));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            location: "spearman input".into(),
        });
    }
    let rho = pearson(&ranks(xs), &ranks(ys))
        .ok_or_else(|| Error::Undefined("spearman of a constant input".into()))?;
    let df = (n - 2) as f64;
    let p = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Undefined(e.to_string()))?;
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(Spearman { rho, p, n })
}

/// Exact two-sided permutation p-value of Spearman's rho, for `n <= 10`.
pub fn spearman_permutation_p(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let observed = spearman(xs, ys)?.rho;
    let n = xs.len();
    if n > 10 {
        return Err(Error::Config(format!("exact permutation test limited to n <= 10, got {n}")));
    }
    let rx = ranks(xs);
    let mut ry = ranks(ys);
    let mut hits = 0u64;
    let mut total = 0u64;
    let mut count = |perm: &[f64]| {
        total += 1;
        if pearson(&rx, perm).is_some_and(|r| r.abs() >= observed.abs() - 1e-12) {
            hits += 1;
        }
    };
    // Heap's algorithm
    let mut c = vec![0usize; n];
    count(&ry);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                ry.swap(0, i);
            } else {
                ry.swap(c[i], i);
            }
            count(&ry);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

fn centered(x: ArrayView2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("at least one row");
    &x - &mean
}

/// Linear CKA of two representations of the same `n` inputs.
pub fn linear_cka(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::Shape {
            layer: "cka rows".into(),
            expected: x.nrows(),
            found: y.nrows(),
        });
    }
    if x.nrows() < 2 {
        return Err(Error::Undefined("CKA needs at least two rows".into()));
    }
    let (xc, yc) = (centered(x), centered(y));
    let fro2 = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>();
    let cross = fro2(&yc.t().dot(&xc));
    let sx = fro2(&xc.t().dot(&xc)).sqrt();
    let sy = fro2(&yc.t().dot(&yc)).sqrt();
    if sx == 0.0 || sy == 0.0 {
        return Err(Error::Undefined("CKA of a constant representation".into()));
    }
    Ok(cross / (sx * sy))
}

/// Which part of the probe input is fed to the network; the other modality is zeroed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeSlice {
    All,
    ImageSlice,
    QuestionSlice,
}

/// `values[l][t]`: CKA between hidden layer `l` at checkpoint 1 and at checkpoint `t`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CkaTimeline {
    pub slice: ProbeSlice,
    pub values: Vec<Vec<f64>>,
}

impl CkaTimeline {
    /// Long format: `slice,layer,checkpoint,value`, both indices from 1.
    pub fn to_csv(&self) -> Csv {
        let mut csv = Csv::new(&["slice", "layer", "checkpoint", "value"]);
        self.append_csv(&mut csv);
        csv
    }

    pub fn append_csv(&self, csv: &mut Csv) {
        let slice = serde_json::to_value(self.slice)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        for (l, row) in self.values.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                csv.row(&[slice.clone(), (l + 1).to_string(), (t + 1).to_string(), v.to_string()]);
            }
        }
    }
}

/// Drift of every hidden layer's representation of `probe` across checkpoints.
pub fn cka_timeline(
    checkpoints: &[Mlp],
    probe: ArrayView2<f64>,
    image_dim: usize,
    slice: ProbeSlice,
) -> Result<CkaTimeline> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::Checkpoint("no checkpoints to compare".into()))?;
    if image_dim > probe.ncols() {
        return Err(Error::Shape {
            layer: "probe image slice".into(),
            expected: probe.ncols(),
            found: image_dim,
        });
    }
    for (t, m) in checkpoints.iter().enumerate() {
        if !first.same_trunk_shape(m) {
            return Err(Error::Checkpoint(format!(
                "checkpoint {} has trunk {:?} over {} inputs, checkpoint 1 has {:?} over {}",
                t + 1,
                m.hidden_widths(),
                m.input_dim(),
                first.hidden_widths(),
                first.input_dim()
            )));
        }
    }
    let mut x = probe.to_owned();
    match slice {
        ProbeSlice::All => {}
        ProbeSlice::ImageSlice => x.columns_mut().into_iter().skip(image_dim).for_each(|mut c| c.fill(0.0)),
        ProbeSlice::QuestionSlice => x.columns_mut().into_iter().take(image_dim).for_each(|mut c| c.fill(0.0)),
    }
    let traces = checkpoints
        .iter()
        .map(|m| m.forward(x.view()).map(|(_, tr)| tr.hidden))
        .collect::<Result<Vec<_>>>()?;
    let layers = first.hidden_layers().len();
    let mut values = vec![Vec::with_capacity(checkpoints.len()); layers];
    for (l, row) in values.iter_mut().enumerate() {
        for tr in &traces {
            row.push(linear_cka(traces[0][l].view(), tr[l].view())?);
        }
    }
    Ok(CkaTimeline { slice, values })
}

/// Square task-by-task matrix with `None` on the diagonal.
pub type PairMatrix = Vec<Vec<Option<f64>>>;

/// `skew_divergence(P_i, P_j)` for every ordered pair `(i, j)`, `i != j`.
pub fn answer_divergence_matrix(seq: &TaskSequence, alpha: f64) -> Result<PairMatrix> {
    let dists = seq
        .tasks()
        .iter()
        .map(AnswerDistribution::from_task)
        .collect::<Result<Vec<_>>>()?;
    let n = dists.len();
    let mut m = vec![vec![None; n]; n];
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            m[i][j] = Some(skew_divergence(&dists[i], &dists[j], alpha)?);
        }
    }
    Ok(m)
}

pub fn embedding_distance_matrix(seq: &TaskSequence, modality: Modality, proxy: Option<&Mlp>) -> Result<PairMatrix> {
    let n = seq.len();
    let mut m = vec![vec![None; n]; n];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate().filter(|(j, _)| *j != i) {
            *cell = Some(mean_embedding_distance(seq.task(i), seq.task(j), modality, proxy)?);
        }
    }
    Ok(m)
}

pub fn pair_matrix_csv(names: &[String], m: &PairMatrix) -> Csv {
    let mut header = vec!["task".to_string()];
    header.extend(names.iter().cloned());
    let mut csv = Csv::new(&header);
    for (i, row) in m.iter().enumerate() {
        let mut fields = vec![names[i].clone()];
        fields.extend(row.iter().map(|v| fmt_opt(*v)));
        csv.row(&fields);
    }
    csv
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FactorCorrelation {
    pub factor: String,
    pub result: std::result::Result<Spearman, String>,
    /// Exact permutation p-value, present when `n <= 10`.
    pub permutation_p: Option<f64>,
}

/// Spearman correlation of off-diagonal drops against each dissimilarity factor.
pub fn forgetting_correlation(drops: &PairMatrix, factors: &[(String, PairMatrix)]) -> Vec<FactorCorrelation> {
    factors
        .iter()
        .map(|(name, f)| {
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for (i, row) in drops.iter().enumerate() {
                for (j, d) in row.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    if let (Some(d), Some(v)) = (d, f.get(i).and_then(|r| r.get(j)).copied().flatten()) {
                        xs.push(v);
                        ys.push(*d);
                    }
                }
            }
            let result = spearman(&xs, &ys).map_err(|e| e.to_string());
            let permutation_p = if result.is_ok() && xs.len() <= 10 {
                spearman_permutation_p(&xs, &ys).ok()
            } else {
                None
            };
            FactorCorrelation {
                factor: name.clone(),
                result,
                permutation_p,
            }
        })
        .collect()
}

pub fn correlation_csv(rows: &[FactorCorrelation]) -> Csv {
    let mut csv = Csv::new(&["factor", "n", "rho", "p", "permutation_p", "error"]);
    for r in rows {
        match &r.result {
            Ok(s) => csv.row(&[
                r.factor.clone(),
                s.n.to_string(),
                s.rho.to_string(),
                s.p.to_string(),
                fmt_opt(r.permutation_p),
                String::new(),
            ]),
            Err(e) => csv.row(&[r.factor.clone(), String::new(), String::new(), String::new(), String::new(), e.clone()]),
        }
    }
    csv
}
