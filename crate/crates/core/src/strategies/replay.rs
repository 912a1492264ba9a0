use std::io::Write;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Example, Strategy, TaskContext};
use crate::data::{Sample, TaskDataset};
use crate::error::{Error, Result};

/// Per-task store of verbatim training samples.
#[derive(Clone, Debug)]
pub struct MemoryBuffer {
    capacity: usize,
    seed: u64,
    tasks: Vec<(String, Vec<Sample>)>,
}

impl MemoryBuffer {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("memory.capacity must be positive".into()));
        }
        Ok(MemoryBuffer {
            capacity,
            seed,
            tasks: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stores `min(capacity, |train|)` training samples chosen uniformly
    /// without replacement; the choice depends only on the seed and the
    /// number of tasks stored so far.
    pub fn update(&mut self, task: &TaskDataset) {
        let n = task.train.len();
        let k = self.capacity.min(n);
        let stream = self.seed ^ (self.tasks.len() as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut picked = index::sample(&mut ChaCha8Rng::seed_from_u64(stream), n, k).into_vec();
        picked.sort_unstable();
        let stored = picked.into_iter().map(|i| task.train[i].clone()).collect();
        self.tasks.push((task.name.clone(), stored));
    }

    pub fn tasks(&self) -> &[(String, Vec<Sample>)] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.iter().map(|(_, s)| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, mut flat: usize) -> &Sample {
        for (_, s) in &self.tasks {
            if flat < s.len() {
                return &s[flat];
            }
            flat -= s.len();
        }
        unreachable!("memory index out of range")
    }

    /// `n` samples uniform over everything stored; distinct when `n <= len`.
    pub fn draw<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<&Sample> {
        let total = self.len();
        if total == 0 || n == 0 {
            return Vec::new();
        }
        if n <= total {
            index::sample(rng, total, n).into_iter().map(|i| self.get(i)).collect()
        } else {
            (0..n).map(|_| self.get(rng.random_range(0..total))).collect()
        }
    }

    /// One JSON line per stored sample, tagged with its task name.
    pub fn dump_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            task: &'a str,
            #[serde(flatten)]
            sample: &'a Sample,
        }
        for (task, samples) in &self.tasks {
            for sample in samples {
                serde_json::to_writer(&mut out, &Line { task, sample })?;
                out.write_all(b"\n").map_err(|e| Error::io("<memory dump>", e))?;
            }
        }
        Ok(())
    }
}

/// Splits `batch_size` into `(current, memory)` slots for a `ratio:1` mix.
pub fn er_split(batch_size: usize, ratio: usize, memory_empty: bool) -> (usize, usize) {
    if memory_empty {
        return (batch_size, 0);
    }
    let current = (batch_size * ratio).div_ceil(ratio + 1);
    (current, batch_size - current)
}

pub struct ExperienceReplay {
    memory: MemoryBuffer,
    ratio: usize,
    rng: ChaCha8Rng,
}

impl ExperienceReplay {
    pub fn new(memory: MemoryBuffer, ratio: usize, rng: ChaCha8Rng) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::Config("er.ratio must be positive".into()));
        }
        Ok(ExperienceReplay { memory, ratio, rng })
    }

    pub fn memory(&self) -> &MemoryBuffer {
        &self.memory
    }
}

impl Strategy for ExperienceReplay {
    fn name(&self) -> &'static str {
        "er"
    }

    fn current_share(&self, batch_size: usize) -> usize {
        er_split(batch_size, self.ratio, self.memory.is_empty()).0
    }

    fn augment(
        &mut self,
        ctx: &TaskContext,
        _current: &[&Sample],
        slots: usize,
        batch: &mut Vec<Example>,
    ) -> Result<()> {
        for s in self.memory.draw(slots, &mut self.rng) {
            batch.push(Example::from_sample(s, ctx.vocab)?);
        }
        Ok(())
    }

    fn end_task(&mut self, ctx: &TaskContext, _model: &crate::model::Mlp) -> Result<()> {
        self.memory.update(ctx.task);
        Ok(())
    }
}
