//! Samples, task datasets, the shared answer vocabulary and file ingestion.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::loss::TargetRow;

/// VQA soft score from the number of agreeing annotators.
pub fn vqa_score(agreeing: usize) -> f64 {
    (agreeing as f64 / 3.0).min(1.0)
}

/// Soft targets from raw annotator answers.
pub fn soft_targets_from_annotations<S: AsRef<str>>(answers: &[S]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for a in answers {
        *counts.entry(a.as_ref().to_string()).or_default() += 1;
    }
    counts.into_iter().map(|(a, n)| (a, vqa_score(n))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    #[serde(rename = "id")]
    pub id: String,
    #[serde(rename = "img")]
    pub image_features: Vec<f64>,
    #[serde(rename = "q")]
    pub question_features: Vec<f64>,
    #[serde(rename = "targets")]
    pub soft_targets: BTreeMap<String, f64>,
    #[serde(rename = "tags", default)]
    pub object_tags: BTreeSet<String>,
    #[serde(rename = "text", default, skip_serializing_if = "Option::is_none")]
    pub question_text: Option<String>,
}

impl Sample {
    /// Model input: `[image_features | question_features]`.
    pub fn input(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.image_features.len() + self.question_features.len());
        x.extend_from_slice(&self.image_features);
        x.extend_from_slice(&self.question_features);
        x
    }

    /// Highest-scoring answer; ties go to the lexicographically smallest.
    pub fn top_answer(&self) -> Option<&str> {
        let mut best: Option<(&str, f64)> = None;
        for (a, &s) in &self.soft_targets {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((a, s));
            }
        }
        best.map(|(a, _)| a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_features.is_empty() && self.question_features.is_empty() {
            return Err(Error::Dataset(format!("sample {} has no features", self.id)));
        }
        if self.soft_targets.is_empty() {
            return Err(Error::Dataset(format!("sample {} has no targets", self.id)));
        }
        for (a, &s) in &self.soft_targets {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Range {
                    what: format!("score of answer `{a}` in sample {}", self.id),
                    value: s,
                });
            }
        }
        if let Some(v) = self.input().into_iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("features of sample {} ({v})", self.id),
            });
        }
        Ok(())
    }
}

const SAMPLE_KEYS: [&str; 6] = ["id", "img", "q", "targets", "tags", "text"];

fn parse_sample_line(path: &Path, line_no: usize, line: &str) -> Result<Sample> {
    let err = |field: &str, message: String| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        field: field.to_string(),
        message,
    };
    let value: Value = serde_json::from_str(line).map_err(|e| err("<json>", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| err("<json>", "expected a JSON object".into()))?;
    if let Some(k) = obj.keys().find(|k| !SAMPLE_KEYS.contains(&k.as_str())) {
        return Err(err(k, "unknown field".into()));
    }
    let id = obj
        .get("id")
        .ok_or_else(|| err("id", "missing".into()))?
        .as_str()
        .ok_or_else(|| err("id", "expected a string".into()))?
        .to_string();
    let features = |key: &str| -> Result<Vec<f64>> {
        match obj.get(key) {
            None => Err(err(key, "missing".into())),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| v.as_f64().ok_or_else(|| err(key, "expected numbers".into())))
                .collect(),
            Some(_) => Err(err(key, "expected an array of numbers".into())),
        }
    };
    let image_features = features("img")?;
    let question_features = features("q")?;
    let targets = match obj.get("targets") {
        None => return Err(err("targets", "missing".into())),
        Some(Value::Object(m)) => m,
        Some(_) => return Err(err("targets", "expected an object of answer scores".into())),
    };
    let mut soft_targets = BTreeMap::new();
    for (answer, score) in targets {
        let s = score
            .as_f64()
            .ok_or_else(|| err("targets", format!("score of `{answer}` is not a number")))?;
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Range {
                what: format!("{}:{line_no} score of `{answer}`", path.display()),
                value: s,
            });
        }
        soft_targets.insert(answer.clone(), s);
    }
    if soft_targets.is_empty() {
        return Err(err("targets", "must not be empty".into()));
    }
    let object_tags = match obj.get("tags") {
        None => BTreeSet::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| err("tags", "expected strings".into()))
            })
            .collect::<Result<_>>()?,
        Some(_) => return Err(err("tags", "expected an array of strings".into())),
    };
    let question_text = match obj.get("text") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(err("text", "expected a string".into())),
    };
    let sample = Sample {
        id,
        image_features,
        question_features,
        soft_targets,
        object_tags,
        question_text,
    };
    if sample.image_features.is_empty() && sample.question_features.is_empty() {
        return Err(err("img", "both feature vectors are empty".into()));
    }
    Ok(sample)
}

/// Reads one sample per non-blank line.
pub fn read_samples_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(parse_sample_line(path, i + 1, &line)?);
    }
    Ok(samples)
}

pub fn write_samples_jsonl<W: Write>(mut out: W, samples: &[Sample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n").map_err(|e| Error::io("<jsonl writer>", e))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub name: String,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    class_set: BTreeSet<String>,
}

impl TaskDataset {
    pub fn new(
        name: impl Into<String>,
        train: Vec<Sample>,
        val: Vec<Sample>,
        test: Vec<Sample>,
    ) -> Result<Self> {
        let name = name.into();
        for (split, samples) in [("train", &train), ("val", &val), ("test", &test)] {
            if samples.is_empty() {
                return Err(Error::Dataset(format!("task {name}: {split} split is empty")));
            }
        }
        let mut ids = HashSet::new();
        let mut class_set = BTreeSet::new();
        for s in train.iter().chain(&val).chain(&test) {
            s.validate()?;
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Dataset(format!(
                    "task {name}: sample id {} appears more than once",
                    s.id
                )));
            }
            class_set.extend(s.soft_targets.keys().cloned());
        }
        Ok(TaskDataset {
            name,
            train,
            val,
            test,
            class_set,
        })
    }

    /// Concatenation of several tasks' splits, without re-validation.
    pub(crate) fn merged(name: &str, tasks: &[TaskDataset]) -> Self {
        let cat = |split: Split| tasks.iter().flat_map(|t| t.split(split).iter().cloned()).collect();
        TaskDataset {
            name: name.to_string(),
            train: cat(Split::Train),
            val: cat(Split::Val),
            test: cat(Split::Test),
            class_set: tasks.iter().flat_map(|t| t.class_set.iter().cloned()).collect(),
        }
    }

    pub fn load(name: &str, files: &SplitFiles) -> Result<Self> {
        TaskDataset::new(
            name,
            read_samples_jsonl(&files.train)?,
            read_samples_jsonl(&files.val)?,
            read_samples_jsonl(&files.test)?,
        )
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Union of target answers across all splits, sorted.
    pub fn class_set(&self) -> &BTreeSet<String> {
        &self.class_set
    }

    fn dims(&self) -> Result<(usize, usize)> {
        let first = &self.train[0];
        let dims = (first.image_features.len(), first.question_features.len());
        for s in self.train.iter().chain(&self.val).chain(&self.test) {
            if (s.image_features.len(), s.question_features.len()) != dims {
                return Err(Error::Dataset(format!(
                    "task {}: sample {} has feature dims ({}, {}), expected {:?}",
                    self.name,
                    s.id,
                    s.image_features.len(),
                    s.question_features.len(),
                    dims
                )));
            }
        }
        Ok(dims)
    }
}

/// Answer strings mapped to stable ids in first-seen task order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnswerVocabulary {
    answers: Vec<String>,
    index: HashMap<String, usize>,
    task_ranges: Vec<Range<usize>>,
}

impl AnswerVocabulary {
    /// Registers a task's classes; returns the id range of the new answers.
    pub fn add_task<'a>(&mut self, classes: impl IntoIterator<Item = &'a String>) -> Range<usize> {
        let start = self.answers.len();
        for a in classes {
            if !self.index.contains_key(a) {
                self.index.insert(a.clone(), self.answers.len());
                self.answers.push(a.clone());
            }
        }
        let range = start..self.answers.len();
        self.task_ranges.push(range.clone());
        range
    }

    pub fn id(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    pub fn answer(&self, id: usize) -> Option<&str> {
        self.answers.get(id).map(String::as_str)
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    /// Ids first introduced by task `t`.
    pub fn task_range(&self, t: usize) -> Range<usize> {
        self.task_ranges[t].clone()
    }

    /// Number of classes known once tasks `0..=t` have arrived.
    pub fn classes_through(&self, t: usize) -> usize {
        self.task_ranges[t].end
    }
}

/// Inputs and sparse targets of one split, ready for the model.
#[derive(Clone, Debug)]
pub struct EncodedSplit {
    pub inputs: Array2<f64>,
    pub targets: Vec<TargetRow>,
}

impl EncodedSplit {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

pub fn encode_samples(samples: &[Sample], vocab: &AnswerVocabulary, input_dim: usize) -> Result<EncodedSplit> {
    let mut inputs = Array2::zeros((samples.len(), input_dim));
    let mut targets = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let x = s.input();
        if x.len() != input_dim {
            return Err(Error::Shape {
                layer: format!("sample {}", s.id),
                expected: input_dim,
                found: x.len(),
            });
        }
        inputs.row_mut(i).iter_mut().zip(x).for_each(|(d, v)| *d = v);
        let row = s
            .soft_targets
            .iter()
            .map(|(a, &score)| {
                vocab
                    .id(a)
                    .map(|id| (id, score))
                    .ok_or_else(|| Error::Dataset(format!("answer `{a}` missing from vocabulary")))
            })
            .collect::<Result<TargetRow>>()?;
        targets.push(row);
    }
    Ok(EncodedSplit { inputs, targets })
}

/// Ordered tasks plus the vocabulary built in that order.
#[derive(Clone, Debug)]
pub struct TaskSequence {
    tasks: Vec<TaskDataset>,
    vocab: AnswerVocabulary,
    image_dim: usize,
    question_dim: usize,
}

impl TaskSequence {
    pub fn new(tasks: Vec<TaskDataset>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Dataset("task sequence is empty".into()));
        }
        let (image_dim, question_dim) = tasks[0].dims()?;
        let mut vocab = AnswerVocabulary::default();
        for t in &tasks {
            if t.dims()? != (image_dim, question_dim) {
                return Err(Error::Dataset(format!(
                    "task {} feature dims differ from task {}",
                    t.name, tasks[0].name
                )));
            }
            vocab.add_task(t.class_set());
        }
        Ok(TaskSequence {
            tasks,
            vocab,
            image_dim,
            question_dim,
        })
    }

    /// Same tasks in `order` (a permutation of task indices), vocabulary rebuilt.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        check_permutation(order, self.len())?;
        TaskSequence::new(order.iter().map(|&i| self.tasks[i].clone()).collect())
    }

    pub fn tasks(&self) -> &[TaskDataset] {
        &self.tasks
    }

    pub fn task(&self, t: usize) -> &TaskDataset {
        &self.tasks[t]
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn vocab(&self) -> &AnswerVocabulary {
        &self.vocab
    }

    /// Index where question features start in the model input.
    pub fn image_dim(&self) -> usize {
        self.image_dim
    }

    pub fn question_dim(&self) -> usize {
        self.question_dim
    }

    pub fn input_dim(&self) -> usize {
        self.image_dim + self.question_dim
    }

    pub fn encode(&self, t: usize, split: Split) -> Result<EncodedSplit> {
        encode_samples(self.tasks[t].split(split), &self.vocab, self.input_dim())
    }
}

pub fn check_permutation(order: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if order.len() != n {
        return Err(Error::Config(format!(
            "task order {order:?} has {} entries for {n} tasks",
            order.len()
        )));
    }
    for &i in order {
        if i >= n || seen[i] {
            return Err(Error::Config(format!("task order {order:?} is not a permutation")));
        }
        seen[i] = true;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFiles {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTask {
    pub name: String,
    #[serde(flatten)]
    pub files: SplitFiles,
}

/// Sequence manifest (TOML): an ordered `[[tasks]]` array with one file per split.
/// Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tasks: Vec<ManifestTask>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for t in &mut m.tasks {
            for p in [&mut t.files.train, &mut t.files.val, &mut t.files.test] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(m)
    }

    pub fn load(&self) -> Result<TaskSequence> {
        let tasks = self
            .tasks
            .iter()
            .map(|t| TaskDataset::load(&t.name, &t.files))
            .collect::<Result<Vec<_>>>()?;
        TaskSequence::new(tasks)
    }
}

pub fn load_sequence(manifest: &Path) -> Result<TaskSequence> {
    Manifest::read(manifest)?.load()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample(id: &str, answer: &str) -> Sample {
        Sample {
            id: id.into(),
            image_features: vec![1.0, 0.0],
            question_features: vec![0.5],
            soft_targets: [(answer.to_string(), 1.0)].into(),
            object_tags: BTreeSet::new(),
            question_text: None,
        }
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn reads_well_formed_file() {
        let f = write_lines(&[
            r#"{"id": "a", "img": [1, 2], "q": [3], "targets": {"yes": 1.0}, "tags": ["dog"]}"#,
            r#"{"id": "b", "img": [1, 2], "q": [3], "targets": {"no": 0.3}, "tags": [], "text": "is it?"}"#,
            r#"{"id": "c", "img": [1, 2], "q": [3], "targets": {"two": 0.6, "three": 1}}"#,
        ]);
        let samples = read_samples_jsonl(f.path()).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[1].question_text.as_deref(), Some("is it?"));
        assert_eq!(samples[2].top_answer(), Some("three"));
    }

    #[test]
    fn missing_targets_names_line_and_field() {
        let f = write_lines(&[
            r#"{"id": "a", "img": [1], "q": [], "targets": {"yes": 1.0}}"#,
            r#"{"id": "b", "img": [1], "q": []}"#,
        ]);
        match read_samples_jsonl(f.path()).unwrap_err() {
            Error::Parse { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "targets");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn out_of_range_score_is_rejected() {
        let f = write_lines(&[r#"{"id": "a", "img": [1], "q": [], "targets": {"yes": 1.5}}"#]);
        assert!(matches!(read_samples_jsonl(f.path()), Err(Error::Range { .. })));
    }

    #[test]
    fn empty_split_is_a_dataset_error() {
        let err = TaskDataset::new("t", vec![sample("a", "x")], vec![], vec![sample("b", "y")]);
        assert!(matches!(err, Err(Error::Dataset(m)) if m.contains("val")));
    }

    #[test]
    fn splits_must_be_disjoint() {
        let err = TaskDataset::new(
            "t",
            vec![sample("a", "x")],
            vec![sample("a", "x")],
            vec![sample("b", "y")],
        );
        assert!(err.is_err());
    }

    #[test]
    fn vocabulary_is_first_seen_and_contiguous() {
        let t1 = TaskDataset::new("1", vec![sample("a", "cat")], vec![sample("b", "dog")], vec![sample("c", "cat")]).unwrap();
        let t2 = TaskDataset::new("2", vec![sample("d", "dog")], vec![sample("e", "owl")], vec![sample("f", "ant")]).unwrap();
        let seq = TaskSequence::new(vec![t1.clone(), t2.clone()]).unwrap();
        let v = seq.vocab();
        assert_eq!(v.answers(), &["cat", "dog", "ant", "owl"]);
        assert_eq!(v.task_range(0), 0..2);
        assert_eq!(v.task_range(1), 2..4);
        let again = TaskSequence::new(vec![t1, t2]).unwrap();
        assert_eq!(again.vocab(), v);
        let swapped = seq.reordered(&[1, 0]).unwrap();
        assert_eq!(swapped.vocab().answers(), &["ant", "dog", "owl", "cat"]);
        assert!(seq.reordered(&[0, 0]).is_err());
    }

    #[test]
    fn vqa_score_follows_annotator_rule() {
        assert!((vqa_score(1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(vqa_score(3), 1.0);
        assert_eq!(vqa_score(10), 1.0);
        let t = soft_targets_from_annotations(&["a", "a", "b"]);
        assert!((t["a"] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        for (name, ans) in [("t1", "x"), ("t2", "y")] {
            for split in ["train", "val", "test"] {
                let s = sample(&format!("{name}-{split}"), ans);
                let f = fs::File::create(dir.path().join(format!("{name}.{split}.jsonl"))).unwrap();
                write_samples_jsonl(f, &[s]).unwrap();
            }
        }
        let manifest = r#"
[[tasks]]
name = "t1"
train = "t1.train.jsonl"
val = "t1.val.jsonl"
test = "t1.test.jsonl"

[[tasks]]
name = "t2"
train = "t2.train.jsonl"
val = "t2.val.jsonl"
test = "t2.test.jsonl"
"#;
        fs::write(dir.path().join("manifest.toml"), manifest).unwrap();
        let seq = load_sequence(&dir.path().join("manifest.toml")).unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.vocab().answers(), &["x", "y"]);
        let enc = seq.encode(1, Split::Test).unwrap();
        assert_eq!(enc.targets, vec![vec![(1, 1.0)]]);
        assert_eq!(enc.inputs.row(0).to_vec(), vec![1.0, 0.0, 0.5]);
    }
}
