//! Final accuracy, learned accuracy, backward transfer and its semantic
//! variant weighted by answer-embedding distance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AnswerVocabulary, Sample};
use crate::embedding::{answer_embedding, cosine, EmbeddingTable};
use crate::error::{Error, Result};
use crate::report::{fmt_opt, write_json, Csv};
use crate::runner::{AccuracyMatrix, PredictionLog};

/// Soft-target score of the predicted answer, 0 when it is not a target.
pub fn vqa_accuracy(pred_id: usize, sample: &Sample, vocab: &AnswerVocabulary) -> Result<f64> {
    let answer = vocab.answer(pred_id).ok_or(Error::Vocabulary {
        id: pred_id,
        size: vocab.len(),
    })?;
    Ok(sample.soft_targets.get(answer).copied().unwrap_or(0.0))
}

fn entry(m: &AccuracyMatrix, t: usize, i: usize) -> Result<f64> {
    m.get(t, i)
        .ok_or_else(|| Error::LogIncomplete(format!("accuracy matrix has no entry A[{}][{}]", t + 1, i + 1)))
}

fn nonempty(m: &AccuracyMatrix) -> Result<usize> {
    if m.is_empty() {
        return Err(Error::Undefined("accuracy matrix is empty".into()));
    }
    Ok(m.len())
}

/// Mean of the last row.
pub fn final_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    let t = nonempty(m)?;
    let mut sum = 0.0;
    for i in 0..t {
        sum += entry(m, t - 1, i)?;
    }
    Ok(sum / t as f64)
}

/// Mean of the diagonal.
pub fn learned_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    let t = nonempty(m)?;
    let mut sum = 0.0;
    for i in 0..t {
        sum += entry(m, i, i)?;
    }
    Ok(sum / t as f64)
}

/// Mean of `A[T][i] - A[i][i]` over `i < T`.
pub fn bwt(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.len();
    if t < 2 {
        return Err(Error::Undefined("backward transfer needs at least two tasks".into()));
    }
    let mut sum = 0.0;
    for i in 0..t - 1 {
        sum += entry(m, t - 1, i)? - entry(m, i, i)?;
    }
    Ok(sum / (t - 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SbwtTerm {
    pub value: f64,
    /// `1 - cos` of the two answer embeddings.
    pub weight: f64,
    /// Either answer had no known token.
    pub oov: bool,
}

/// `(1 - cos(e_later, e_ref)) * (acc_later - acc_ref)` for one sample.
pub fn sbwt_term(
    ref_answer: &str,
    later_answer: &str,
    acc_ref: f64,
    acc_later: f64,
    table: &EmbeddingTable,
) -> SbwtTerm {
    if ref_answer == later_answer {
        return SbwtTerm {
            value: 0.0,
            weight: 0.0,
            oov: false,
        };
    }
    let a = answer_embedding(ref_answer, table);
    let b = answer_embedding(later_answer, table);
    let oov = a.oov || b.oov;
    let cos = if oov { 0.0 } else { cosine(&a.vector, &b.vector).unwrap_or(0.0) };
    let weight = 1.0 - cos;
    SbwtTerm {
        value: weight * (acc_later - acc_ref),
        weight,
        oov,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbwtReport {
    pub value: f64,
    /// `S_{T,i}` for `i < T`.
    pub per_task: Vec<f64>,
    /// Samples whose weight came from an out-of-vocabulary answer.
    pub oov_samples: usize,
}

/// Semantic backward transfer from the predictions at checkpoint `i` and at
/// the final checkpoint, for every test sample of every task `i < T`.
pub fn sbwt(log: &PredictionLog, tasks: usize, table: &EmbeddingTable) -> Result<SbwtReport> {
    if tasks < 2 {
        return Err(Error::Undefined("semantic backward transfer needs at least two tasks".into()));
    }
    let last = tasks - 1;
    let mut per_task = Vec::with_capacity(last);
    let mut oov_samples = 0;
    for i in 0..last {
        let reference = log.cell(i, i);
        let final_ = log.cell(last, i);
        if reference.is_empty() {
            return Err(Error::LogIncomplete(format!("no predictions for task {} at checkpoint {}", i + 1, i + 1)));
        }
        if final_.len() != reference.len() {
            return Err(Error::LogIncomplete(format!(
                "task {}: {} predictions at checkpoint {}, {} at checkpoint {}",
                i + 1,
                reference.len(),
                i + 1,
                final_.len(),
                tasks
            )));
        }
        let mut sum = 0.0;
        for (id, r) in &reference {
            let f = final_.get(id).ok_or_else(|| {
                Error::LogIncomplete(format!("sample {id} missing at checkpoint {tasks}"))
            })?;
            let term = sbwt_term(&r.answer, &f.answer, r.acc, f.acc, table);
            oov_samples += term.oov as usize;
            sum += term.value;
        }
        per_task.push(sum / reference.len() as f64);
    }
    Ok(SbwtReport {
        value: per_task.iter().sum::<f64>() / last as f64,
        per_task,
        oov_samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub final_accuracy: f64,
    pub learned_accuracy: f64,
    pub bwt: Option<f64>,
    pub sbwt: Option<SbwtReport>,
}

impl MetricsReport {
    /// BWT is left out for single-task runs, SBWT when no log or table is given.
    pub fn compute(
        m: &AccuracyMatrix,
        log: Option<&PredictionLog>,
        table: Option<&EmbeddingTable>,
    ) -> Result<MetricsReport> {
        let sbwt = match (log, table) {
            (Some(log), Some(table)) if m.len() >= 2 => Some(sbwt(log, m.len(), table)?),
            _ => None,
        };
        Ok(MetricsReport {
            final_accuracy: final_accuracy(m)?,
            learned_accuracy: learned_accuracy(m)?,
            bwt: if m.len() >= 2 { Some(bwt(m)?) } else { None },
            sbwt,
        })
    }

    pub fn named(&self) -> [(&'static str, Option<f64>); 4] {
        [
            ("final_accuracy", Some(self.final_accuracy)),
            ("learned_accuracy", Some(self.learned_accuracy)),
            ("bwt", self.bwt),
            ("sbwt", self.sbwt.as_ref().map(|s| s.value)),
        ]
    }

    pub fn csv(&self) -> Csv {
        let named = self.named();
        let mut csv = Csv::new(&named.iter().map(|(k, _)| *k).collect::<Vec<_>>());
        csv.row(&named.iter().map(|(_, v)| fmt_opt(*v)).collect::<Vec<_>>());
        csv
    }

    /// `task,s` rows of the per-task semantic transfer, empty without SBWT.
    pub fn sbwt_csv(&self, task_names: &[String]) -> Csv {
        let mut csv = Csv::new(&["task", "s"]);
        if let Some(s) = &self.sbwt {
            for (i, v) in s.per_task.iter().enumerate() {
                let name = task_names.get(i).cloned().unwrap_or_else(|| format!("task{}", i + 1));
                csv.row(&[name, v.to_string()]);
            }
        }
        csv
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::PredictionRecord;

    fn table() -> EmbeddingTable {
        EmbeddingTable::from_entries([
            ("cat".to_string(), vec![1.0, 0.0]),
            ("dog".to_string(), vec![0.6, 0.8]),
            ("car".to_string(), vec![0.0, 1.0]),
        ])
        .unwrap()
    }

    fn rec(checkpoint: usize, task: usize, sample: &str, answer: &str, acc: f64) -> PredictionRecord {
        PredictionRecord {
            checkpoint,
            task,
            sample: sample.into(),
            pred: 0,
            answer: answer.into(),
            acc,
        }
    }

    #[test]
    fn matrix_metrics_by_hand() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.8, 0.1], vec![0.6, 0.7]]);
        assert!((final_accuracy(&m).unwrap() - 0.65).abs() < 1e-15);
        assert!((learned_accuracy(&m).unwrap() - 0.75).abs() < 1e-15);
        assert!((bwt(&m).unwrap() + 0.2).abs() < 1e-15);
        let one = AccuracyMatrix::from_rows(vec![vec![0.4]]);
        assert_eq!(final_accuracy(&one).unwrap(), 0.4);
        assert!(bwt(&one).is_err());
    }

    #[test]
    fn missing_entry_is_incomplete() {
        let mut m = AccuracyMatrix::from_rows(vec![vec![0.8, 0.1], vec![0.6, 0.7]]);
        m.values[1][0] = None;
        assert!(matches!(bwt(&m), Err(Error::LogIncomplete(_))));
    }

    #[test]
    fn identical_answers_weigh_nothing() {
        let t = sbwt_term("cat", "cat", 1.0, 0.0, &table());
        assert_eq!(t.value, 0.0);
        let both_unknown = sbwt_term("zzz", "zzz", 1.0, 0.0, &table());
        assert_eq!(both_unknown.value, 0.0);
    }

    #[test]
    fn oov_answer_gets_full_weight() {
        let t = sbwt_term("cat", "zebra", 1.0, 0.0, &table());
        assert!(t.oov);
        assert_eq!(t.weight, 1.0);
        assert_eq!(t.value, -1.0);
    }

    #[test]
    fn term_is_distance_times_change() {
        let t = sbwt_term("cat", "dog", 1.0, 0.3, &table());
        assert!((t.weight - 0.4).abs() < 1e-12);
        assert!((t.value - 0.4 * -0.7).abs() < 1e-12);
    }

    #[test]
    fn sbwt_averages_per_task_then_over_tasks() {
        let log = PredictionLog {
            records: vec![
                rec(0, 0, "a", "cat", 1.0),
                rec(0, 0, "b", "cat", 1.0),
                rec(1, 0, "a", "car", 0.0),
                rec(1, 0, "b", "cat", 1.0),
            ],
        };
        let r = sbwt(&log, 2, &table()).unwrap();
        assert_eq!(r.per_task, vec![-0.5]);
        assert_eq!(r.value, -0.5);
        let short = PredictionLog {
            records: log.records[..3].to_vec(),
        };
        assert!(matches!(sbwt(&short, 2, &table()), Err(Error::LogIncomplete(_))));
    }

    #[test]
    fn report_csv_has_one_row() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.5]]);
        let r = MetricsReport::compute(&m, None, None).unwrap();
        assert_eq!(r.csv().as_str(), "final_accuracy,learned_accuracy,bwt,sbwt\n0.5,0.5,,\n");
    }
}
