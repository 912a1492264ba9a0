//! Synthetic task sequences with controllable answer overlap and input shift.
//!
//! Every answer class `c` owns a planted unit prototype `p_c`. A sample of
//! task `k` draws its class uniformly from the task's class set and gets the
//! input `center_k + separation * p_c + noise`, where `center_k` is a
//! task-specific cluster center whose distance from the origin grows with
//! `input_shift`. Ten simulated annotators each answer with the argmax of the
//! planted linear scores `p_a . (x - center_k)` plus Gaussian noise, and the
//! votes become soft targets through [`vqa_score`](crate::data::vqa_score).
//!
//! Class sets form a sliding window over the global class pool: consecutive
//! tasks share `answer_overlap * classes_per_task` classes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    soft_targets_from_annotations, write_samples_jsonl, Manifest, ManifestTask, Sample, SplitFiles,
    TaskDataset, TaskSequence,
};
use crate::error::{Error, Result};

const ANNOTATORS: usize = 10;
const CENTER_SCALE: f64 = 4.0;
const TAG_POOL: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub tasks: usize,
    /// Training samples per task.
    pub samples_per_task: usize,
    /// Validation and test samples per task (each).
    pub eval_per_task: usize,
    pub classes_per_task: usize,
    /// Width of each modality; the model input is twice this.
    pub feature_dim: usize,
    pub answer_overlap: f64,
    pub input_shift: f64,
    pub class_separation: f64,
    pub feature_noise: f64,
    pub annotator_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            tasks: 5,
            samples_per_task: 500,
            eval_per_task: 100,
            classes_per_task: 10,
            feature_dim: 16,
            answer_overlap: 0.0,
            input_shift: 0.5,
            class_separation: 2.5,
            feature_noise: 0.5,
            annotator_noise: 0.6,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<usize> {
        let positive = [
            ("tasks", self.tasks),
            ("samples_per_task", self.samples_per_task),
            ("eval_per_task", self.eval_per_task),
            ("classes_per_task", self.classes_per_task),
            ("feature_dim", self.feature_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("synth: {name} must be positive")));
        }
        for (name, v) in [("answer_overlap", self.answer_overlap), ("input_shift", self.input_shift)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("synth: {name}={v} outside [0, 1]")));
            }
        }
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("feature_noise", self.feature_noise),
            ("annotator_noise", self.annotator_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("synth: {name}={v} must be finite and >= 0")));
            }
        }
        let shared = self.answer_overlap * self.classes_per_task as f64;
        if (shared - shared.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "synth: answer_overlap {} of {} classes is not a whole number of shared classes",
                self.answer_overlap, self.classes_per_task
            )));
        }
        Ok(shared.round() as usize)
    }
}

/// Derives an independent 64-bit seed for `(stream, index)` from a base seed.
pub fn mix(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

pub fn answer_name(class: usize) -> String {
    format!("a{class:03}")
}

/// The planted generator shared by every task drawn from one seed.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    seed: u64,
    feature_dim: usize,
    input_shift: f64,
    class_separation: f64,
    feature_noise: f64,
    annotator_noise: f64,
}

impl SynthWorld {
    pub fn new(cfg: &SynthConfig) -> Self {
        SynthWorld {
            seed: cfg.seed,
            feature_dim: cfg.feature_dim,
            input_shift: cfg.input_shift,
            class_separation: cfg.class_separation,
            feature_noise: cfg.feature_noise,
            annotator_noise: cfg.annotator_noise,
        }
    }

    fn input_dim(&self) -> usize {
        2 * self.feature_dim
    }

    pub fn prototype(&self, class: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, 1, class as u64));
        unit_gaussian(&mut rng, self.input_dim())
    }

    pub fn center(&self, cluster: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, 2, cluster as u64));
        let scale = self.input_shift * CENTER_SCALE;
        unit_gaussian(&mut rng, self.input_dim())
            .into_iter()
            .map(|x| x * scale)
            .collect()
    }

    /// Draws one task whose inputs cluster around `center(cluster)`.
    pub fn task(
        &self,
        name: &str,
        cluster: usize,
        classes: &[usize],
        train: usize,
        eval: usize,
    ) -> Result<TaskDataset> {
        if classes.is_empty() {
            return Err(Error::Config(format!("synth task {name} has no classes")));
        }
        let center = self.center(cluster);
        let protos: Vec<Vec<f64>> = classes.iter().map(|&c| self.prototype(c)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, 3, cluster as u64));
        let draw = |split: &str, n: usize, rng: &mut ChaCha8Rng| -> Vec<Sample> {
            (0..n)
                .map(|i| self.sample(format!("{name}-{split}-{i}"), &center, classes, &protos, rng))
                .collect()
        };
        let train = draw("train", train, &mut rng);
        let val = draw("val", eval, &mut rng);
        let test = draw("test", eval, &mut rng);
        TaskDataset::new(name, train, val, test)
    }

    fn sample(
        &self,
        id: String,
        center: &[f64],
        classes: &[usize],
        protos: &[Vec<f64>],
        rng: &mut ChaCha8Rng,
    ) -> Sample {
        let k = rng.random_range(0..classes.len());
        let offset: Vec<f64> = protos[k]
            .iter()
            .map(|p| {
                let eps: f64 = StandardNormal.sample(rng);
                self.class_separation * p + self.feature_noise * eps
            })
            .collect();
        let planted: Vec<f64> = protos
            .iter()
            .map(|p| p.iter().zip(&offset).map(|(a, b)| a * b).sum())
            .collect();
        let votes: Vec<String> = (0..ANNOTATORS)
            .map(|_| {
                let mut best = (0, f64::NEG_INFINITY);
                for (j, s) in planted.iter().enumerate() {
                    let eps: f64 = StandardNormal.sample(rng);
                    let noisy = s + self.annotator_noise * eps;
                    if noisy > best.1 {
                        best = (j, noisy);
                    }
                }
                answer_name(classes[best.0])
            })
            .collect();
        let x: Vec<f64> = center.iter().zip(&offset).map(|(c, o)| c + o).collect();
        let d = self.feature_dim;
        let class_tag = format!("obj{}", classes[k] % TAG_POOL);
        let extra_tag = format!("obj{}", rng.random_range(0..TAG_POOL));
        Sample {
            id,
            image_features: x[..d].to_vec(),
            question_features: x[d..].to_vec(),
            soft_targets: soft_targets_from_annotations(&votes),
            object_tags: [class_tag.clone(), extra_tag].into_iter().collect(),
            question_text: Some(format!("what is the {class_tag} doing?")),
        }
    }
}

/// Class ids of task `k` under a sliding window.
pub fn window_classes(k: usize, classes_per_task: usize, stride: usize) -> Vec<usize> {
    (k * stride..k * stride + classes_per_task).collect()
}

pub fn synth_sequence(cfg: &SynthConfig) -> Result<TaskSequence> {
    let shared = cfg.validate()?;
    let world = SynthWorld::new(cfg);
    let stride = cfg.classes_per_task - shared;
    let tasks = (0..cfg.tasks)
        .map(|k| {
            world.task(
                &format!("task{}", k + 1),
                k,
                &window_classes(k, cfg.classes_per_task, stride),
                cfg.samples_per_task,
                cfg.eval_per_task,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    TaskSequence::new(tasks)
}

/// Writes each task as three JSONL files plus `manifest.toml`; returns the manifest path.
pub fn write_sequence(dir: &Path, seq: &TaskSequence) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest { tasks: Vec::new() };
    for task in seq.tasks() {
        let files = SplitFiles {
            train: format!("{}.train.jsonl", task.name).into(),
            val: format!("{}.val.jsonl", task.name).into(),
            test: format!("{}.test.jsonl", task.name).into(),
        };
        for (rel, samples) in [
            (&files.train, &task.train),
            (&files.val, &task.val),
            (&files.test, &task.test),
        ] {
            let mut buf = Vec::new();
            write_samples_jsonl(&mut buf, samples)?;
            crate::report::write_atomic(&dir.join(rel), &buf)?;
        }
        manifest.tasks.push(ManifestTask {
            name: task.name.clone(),
            files,
        });
    }
    let path = dir.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    crate::report::write_atomic(&path, text.as_bytes())?;
    Ok(path)
}
