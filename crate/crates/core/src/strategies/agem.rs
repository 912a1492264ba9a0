use rand_chacha::ChaCha8Rng;

use super::{batch_gradient, Example, MemoryBuffer, Strategy, TaskContext};
use crate::error::{Error, Result};
use crate::model::{Gradient, Mlp};

/// Removes the component of `g` that conflicts with `reference`.
///
/// Returns `g` unchanged when `g . reference >= 0`, otherwise
/// `g - (g . reference / reference . reference) reference`.
pub fn agem_project(g: &Gradient, reference: &Gradient) -> Result<Gradient> {
    if g.len() != reference.len() {
        return Err(Error::State(format!(
            "gradient has {} entries, reference has {}",
            g.len(),
            reference.len()
        )));
    }
    let dot = g.dot(reference);
    if dot >= 0.0 {
        return Ok(g.clone());
    }
    let norm2 = reference.dot(reference);
    let scale = dot / norm2;
    Ok(Gradient(
        g.iter().zip(reference.iter()).map(|(a, r)| a - scale * r).collect(),
    ))
}

pub struct Agem {
    memory: MemoryBuffer,
    reference_batch: usize,
    rng: ChaCha8Rng,
}

impl Agem {
    pub fn new(memory: MemoryBuffer, reference_batch: usize, rng: ChaCha8Rng) -> Self {
        Agem {
            memory,
            reference_batch,
            rng,
        }
    }
}

impl Strategy for Agem {
    fn name(&self) -> &'static str {
        "agem"
    }

    fn adjust_param_grad(&mut self, ctx: &TaskContext, model: &Mlp, grad: &mut Gradient) -> Result<f64> {
        if self.memory.is_empty() {
            return Ok(0.0);
        }
        let examples = self
            .memory
            .draw(self.reference_batch.max(1), &mut self.rng)
            .into_iter()
            .map(|s| Example::from_sample(s, ctx.vocab))
            .collect::<Result<Vec<_>>>()?;
        let (_, reference) = batch_gradient(model, &examples)?;
        *grad = agem_project(grad, &reference)?;
        Ok(0.0)
    }

    fn end_task(&mut self, ctx: &TaskContext, _model: &Mlp) -> Result<()> {
        self.memory.update(ctx.task);
        Ok(())
    }
}
