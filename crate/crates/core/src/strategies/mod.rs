//! Continual-learning strategies behind one hook interface.
//!
//! The trainer calls, per task: [`Strategy::begin_task`] (after the head has
//! grown), then per step [`Strategy::current_share`], [`Strategy::augment`],
//! [`Strategy::adjust_logit_grad`] and [`Strategy::adjust_param_grad`], and
//! finally [`Strategy::end_task`].

mod agem;
mod ewc;
mod lwf;
mod pseudo;
mod replay;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AnswerVocabulary, EncodedSplit, Sample, TaskDataset};
use crate::error::{Error, Result};
use crate::loss::{bce_dense, TargetRow};
use crate::model::{Gradient, Mlp};

pub use agem::{agem_project, Agem};
pub use ewc::{empirical_fisher, estimate_fisher, ewc_penalty, Anchor, Ewc, EwcState};
pub use lwf::{lwf_loss, Lwf};
pub use pseudo::{pseudo_label, pseudo_retrieve, PseudoReplay, PseudoReplayStore, StoredQuestion};
pub use replay::{er_split, ExperienceReplay, MemoryBuffer};

/// Targets of one training example.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Sparse(TargetRow),
    /// Scores for classes `0..len`; remaining classes get 0.
    Dense(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: Vec<f64>,
    pub targets: Targets,
}

impl Example {
    pub fn from_sample(s: &Sample, vocab: &AnswerVocabulary) -> Result<Example> {
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
        Ok(Example {
            input: s.input(),
            targets: Targets::Sparse(row),
        })
    }

    pub fn from_encoded(split: &EncodedSplit, i: usize) -> Example {
        Example {
            input: split.inputs.row(i).to_vec(),
            targets: Targets::Sparse(split.targets[i].clone()),
        }
    }
}

/// Dense inputs and targets for one step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl Batch {
    pub fn from_examples(examples: &[Example], input_dim: usize, classes: usize) -> Result<Batch> {
        let mut inputs = Array2::zeros((examples.len(), input_dim));
        let mut targets = Array2::zeros((examples.len(), classes));
        for (i, ex) in examples.iter().enumerate() {
            if ex.input.len() != input_dim {
                return Err(Error::Shape {
                    layer: "batch input".into(),
                    expected: input_dim,
                    found: ex.input.len(),
                });
            }
            inputs.row_mut(i).iter_mut().zip(&ex.input).for_each(|(d, v)| *d = *v);
            match &ex.targets {
                Targets::Sparse(row) => {
                    for &(id, score) in row {
                        if id >= classes {
                            return Err(Error::Vocabulary { id, size: classes });
                        }
                        targets[[i, id]] = score;
                    }
                }
                Targets::Dense(scores) => {
                    if scores.len() > classes {
                        return Err(Error::Head(format!(
                            "dense target covers {} classes, head has {classes}",
                            scores.len()
                        )));
                    }
                    targets.row_mut(i).iter_mut().zip(scores).for_each(|(d, v)| *d = *v);
                }
            }
        }
        Ok(Batch { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
}

/// Mean BCE gradient of `model` on `examples`.
pub fn batch_gradient(model: &Mlp, examples: &[Example]) -> Result<(f64, Gradient)> {
    let batch = Batch::from_examples(examples, model.input_dim(), model.num_classes())?;
    let (logits, trace) = model.forward(batch.inputs.view())?;
    let (loss, dlogits) = bce_dense(logits.view(), batch.targets.view())?;
    Ok((loss, model.backward(&trace, &dlogits)?))
}

/// What a strategy sees about the task being trained.
pub struct TaskContext<'a> {
    /// Position of the task in the training order.
    pub index: usize,
    pub task: &'a TaskDataset,
    pub train: &'a EncodedSplit,
    pub vocab: &'a AnswerVocabulary,
    /// Classes in the head while training this task.
    pub classes: usize,
    /// Classes known before this task arrived.
    pub previous_classes: usize,
}

pub trait Strategy: Send {
    fn name(&self) -> &'static str;

    fn begin_task(&mut self, _ctx: &TaskContext, _model: &Mlp) -> Result<()> {
        Ok(())
    }

    /// How many of `batch_size` slots are drawn from the current task.
    fn current_share(&self, batch_size: usize) -> usize {
        batch_size
    }

    /// Adds replayed or generated examples next to the current ones.
    fn augment(
        &mut self,
        _ctx: &TaskContext,
        _current: &[&Sample],
        _slots: usize,
        _batch: &mut Vec<Example>,
    ) -> Result<()> {
        Ok(())
    }

    /// Adds loss terms defined on the logits; returns the extra loss.
    fn adjust_logit_grad(
        &mut self,
        _ctx: &TaskContext,
        _batch: &Batch,
        _logits: &Array2<f64>,
        _dlogits: &mut Array2<f64>,
    ) -> Result<f64> {
        Ok(0.0)
    }

    /// Adds parameter-space terms or rewrites the gradient; returns the extra loss.
    fn adjust_param_grad(&mut self, _ctx: &TaskContext, _model: &Mlp, _grad: &mut Gradient) -> Result<f64> {
        Ok(0.0)
    }

    fn end_task(&mut self, _ctx: &TaskContext, _model: &Mlp) -> Result<()> {
        Ok(())
    }
}

/// Plain sequential finetuning.
#[derive(Clone, Debug, Default)]
pub struct Finetune;

impl Strategy for Finetune {
    fn name(&self) -> &'static str {
        "finetune"
    }
}

/// Strategy selection and hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum StrategyConfig {
    Finetune,
    Ewc {
        lambda: f64,
        /// Training samples used for the Fisher estimate; `None` uses all.
        fisher_samples: Option<usize>,
    },
    Lwf {
        lambda: f64,
        temperature: f64,
    },
    Er {
        capacity: usize,
        ratio: usize,
    },
    Agem {
        capacity: usize,
        reference_batch: usize,
    },
    Pseudo {
        capacity: usize,
        ratio: usize,
    },
}

impl StrategyConfig {
    pub fn label(&self) -> &'static str {
        match self {
            StrategyConfig::Finetune => "finetune",
            StrategyConfig::Ewc { .. } => "ewc",
            StrategyConfig::Lwf { .. } => "lwf",
            StrategyConfig::Er { .. } => "er",
            StrategyConfig::Agem { .. } => "agem",
            StrategyConfig::Pseudo { .. } => "pseudo",
        }
    }

    pub fn build(&self, seed: u64) -> Result<Box<dyn Strategy>> {
        let rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match *self {
            StrategyConfig::Finetune => Box::new(Finetune),
            StrategyConfig::Ewc { lambda, fisher_samples } => {
                Box::new(Ewc::new(lambda, fisher_samples, seed)?)
            }
            StrategyConfig::Lwf { lambda, temperature } => Box::new(Lwf::new(lambda, temperature)?),
            StrategyConfig::Er { capacity, ratio } => {
                Box::new(ExperienceReplay::new(MemoryBuffer::new(capacity, seed)?, ratio, rng)?)
            }
            StrategyConfig::Agem {
                capacity,
                reference_batch,
            } => Box::new(Agem::new(MemoryBuffer::new(capacity, seed)?, reference_batch, rng)),
            StrategyConfig::Pseudo { capacity, ratio } => {
                Box::new(PseudoReplay::new(capacity, ratio, seed, rng)?)
            }
        })
    }
}
