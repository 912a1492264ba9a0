use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{er_split, Example, Strategy, TaskContext, Targets};
use crate::data::{Sample, TaskDataset};
use crate::error::{Error, Result};
use crate::loss::sigmoid;
use crate::model::Mlp;

/// A past question without its image or answer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StoredQuestion {
    pub question_features: Vec<f64>,
    pub object_tags: BTreeSet<String>,
    pub question_text: Option<String>,
    pub task: String,
}

/// Past questions indexed by object tag, plus the frozen previous model.
#[derive(Clone, Debug, Default, Serialize)]
pub struct PseudoReplayStore {
    questions: Vec<StoredQuestion>,
    #[serde(skip)]
    by_tag: BTreeMap<String, Vec<usize>>,
    #[serde(skip)]
    teacher: Option<Mlp>,
}

impl PseudoReplayStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, q: StoredQuestion) {
        let i = self.questions.len();
        for tag in &q.object_tags {
            self.by_tag.entry(tag.clone()).or_default().push(i);
        }
        self.questions.push(q);
    }

    pub fn questions(&self) -> &[StoredQuestion] {
        &self.questions
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn teacher(&self) -> Option<&Mlp> {
        self.teacher.as_ref()
    }

    pub fn set_teacher(&mut self, model: Mlp) {
        self.teacher = Some(model);
    }

    /// Indices of stored questions sharing at least one tag with `tags`.
    pub fn candidates(&self, tags: &BTreeSet<String>) -> Vec<usize> {
        let set: BTreeSet<usize> = tags
            .iter()
            .filter_map(|t| self.by_tag.get(t))
            .flatten()
            .copied()
            .collect();
        set.into_iter().collect()
    }
}

/// Pairs the current image with a uniformly chosen past question that shares
/// an object tag with it.
pub fn pseudo_retrieve<R: Rng>(current: &Sample, store: &PseudoReplayStore, rng: &mut R) -> Option<Vec<f64>> {
    let cands = store.candidates(&current.object_tags);
    if cands.is_empty() {
        return None;
    }
    let q = &store.questions[cands[rng.random_range(0..cands.len())]];
    let mut x = current.image_features.clone();
    x.extend_from_slice(&q.question_features);
    Some(x)
}

/// Sigmoid outputs of the frozen model, one row per input.
pub fn pseudo_label(prev_model: &Mlp, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(prev_model.logits(inputs)?.mapv(sigmoid))
}

/// Replay of past questions on current images, labelled by the previous model.
pub struct PseudoReplay {
    store: PseudoReplayStore,
    capacity: usize,
    ratio: usize,
    seed: u64,
    rng: ChaCha8Rng,
}

impl PseudoReplay {
    pub fn new(capacity: usize, ratio: usize, seed: u64, rng: ChaCha8Rng) -> Result<Self> {
        if capacity == 0 || ratio == 0 {
            return Err(Error::Config("pseudo-replay capacity and ratio must be positive".into()));
        }
        Ok(PseudoReplay {
            store: PseudoReplayStore::new(),
            capacity,
            ratio,
            seed,
            rng,
        })
    }

    pub fn store(&self) -> &PseudoReplayStore {
        &self.store
    }

    fn remember(&mut self, task: &TaskDataset, index_in_order: usize) {
        let n = task.train.len();
        let k = self.capacity.min(n);
        let stream = self.seed ^ (index_in_order as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
        let mut picked = index::sample(&mut ChaCha8Rng::seed_from_u64(stream), n, k).into_vec();
        picked.sort_unstable();
        for i in picked {
            let s = &task.train[i];
            self.store.push(StoredQuestion {
                question_features: s.question_features.clone(),
                object_tags: s.object_tags.clone(),
                question_text: s.question_text.clone(),
                task: task.name.clone(),
            });
        }
    }
}

impl Strategy for PseudoReplay {
    fn name(&self) -> &'static str {
        "pseudo"
    }

    fn current_share(&self, batch_size: usize) -> usize {
        er_split(batch_size, self.ratio, self.store.teacher.is_none()).0
    }

    fn augment(
        &mut self,
        _ctx: &TaskContext,
        current: &[&Sample],
        slots: usize,
        batch: &mut Vec<Example>,
    ) -> Result<()> {
        let Some(teacher) = self.store.teacher.as_ref() else {
            return Ok(());
        };
        if current.is_empty() {
            return Ok(());
        }
        let mut inputs = Vec::with_capacity(slots);
        // Images whose tags match nothing in the store leave their slot empty.
        for _ in 0..slots {
            let s = current[self.rng.random_range(0..current.len())];
            if let Some(x) = pseudo_retrieve(s, &self.store, &mut self.rng) {
                inputs.push(x);
            }
        }
        if inputs.is_empty() {
            return Ok(());
        }
        let dim = inputs[0].len();
        let flat: Vec<f64> = inputs.iter().flatten().copied().collect();
        let x = Array2::from_shape_vec((inputs.len(), dim), flat)
            .map_err(|e| Error::State(format!("pseudo batch: {e}")))?;
        let y = pseudo_label(teacher, x.view())?;
        for (input, row) in inputs.into_iter().zip(y.rows()) {
            batch.push(Example {
                input,
                targets: Targets::Dense(row.to_vec()),
            });
        }
        Ok(())
    }

    fn end_task(&mut self, ctx: &TaskContext, model: &Mlp) -> Result<()> {
        self.remember(ctx.task, ctx.index);
        self.store.set_teacher(model.clone());
        Ok(())
    }
}
