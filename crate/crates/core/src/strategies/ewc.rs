use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Strategy, TaskContext};
use crate::data::EncodedSplit;
use crate::error::{Error, Result};
use crate::loss::bce_soft_loss;
use crate::model::{FlatParams, Gradient, Mlp};

/// Parameters and diagonal Fisher saved at the end of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub params: FlatParams,
    pub fisher: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EwcState {
    pub anchors: Vec<Anchor>,
    pub lambda: f64,
}

/// `(lambda/2) sum_a sum_i F_i (theta_i - anchor_i)^2` and its gradient.
///
/// Anchors taken before the head grew are shorter than `theta`; the extra
/// coordinates are unconstrained.
pub fn ewc_penalty(theta: &[f64], state: &EwcState) -> Result<(f64, Gradient)> {
    let mut grad = Gradient::zeros(theta.len());
    let mut loss = 0.0;
    for (k, a) in state.anchors.iter().enumerate() {
        if a.params.len() != a.fisher.len() || a.params.len() > theta.len() {
            return Err(Error::State(format!(
                "anchor {k} covers {} parameters with {} Fisher entries; model has {}",
                a.params.len(),
                a.fisher.len(),
                theta.len()
            )));
        }
        for (i, (&star, &f)) in a.params.iter().zip(&a.fisher).enumerate() {
            let d = theta[i] - star;
            loss += f * d * d;
            grad[i] += state.lambda * f * d;
        }
    }
    Ok((0.5 * state.lambda * loss, grad))
}

/// Mean of squared per-example gradients.
pub fn empirical_fisher(per_example: &[Gradient]) -> Vec<f64> {
    let Some(first) = per_example.first() else {
        return Vec::new();
    };
    let mut f = vec![0.0; first.len()];
    for g in per_example {
        f.iter_mut().zip(g.iter()).for_each(|(a, x)| *a += x * x);
    }
    let n = per_example.len() as f64;
    f.iter_mut().for_each(|a| *a /= n);
    f
}

/// Empirical diagonal Fisher of the training loss on `n_samples` examples
/// drawn without replacement (all examples when `None` or when `n_samples`
/// exceeds the split).
pub fn estimate_fisher(
    model: &Mlp,
    data: &EncodedSplit,
    n_samples: Option<usize>,
    seed: u64,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot estimate Fisher on an empty split".into()));
    }
    let n = n_samples.unwrap_or(data.len()).min(data.len());
    let mut idx: Vec<usize> = if n == data.len() {
        (0..n).collect()
    } else {
        rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(seed), data.len(), n).into_vec()
    };
    idx.sort_unstable();
    let mut per_example = Vec::with_capacity(n);
    for i in idx {
        let x = data.inputs.slice(ndarray::s![i..i + 1, ..]);
        let (logits, trace) = model.forward(x)?;
        let (_, dlogits) = bce_soft_loss(logits.view(), std::slice::from_ref(&data.targets[i]))?;
        per_example.push(model.backward(&trace, &dlogits)?);
    }
    Ok(empirical_fisher(&per_example))
}

/// Multi-anchor EWC: one anchor per finished task, penalties summed.
pub struct Ewc {
    state: EwcState,
    fisher_samples: Option<usize>,
    seed: u64,
}

impl Ewc {
    pub fn new(lambda: f64, fisher_samples: Option<usize>, seed: u64) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::Config(format!("ewc.lambda={lambda} must be finite and >= 0")));
        }
        Ok(Ewc {
            state: EwcState {
                anchors: Vec::new(),
                lambda,
            },
            fisher_samples,
            seed,
        })
    }

    pub fn state(&self) -> &EwcState {
        &self.state
    }
}

impl Strategy for Ewc {
    fn name(&self) -> &'static str {
        "ewc"
    }

    fn adjust_param_grad(&mut self, _ctx: &TaskContext, model: &Mlp, grad: &mut Gradient) -> Result<f64> {
        if self.state.anchors.is_empty() || self.state.lambda == 0.0 {
            return Ok(0.0);
        }
        let (loss, g) = ewc_penalty(&model.flatten(), &self.state)?;
        grad.add_scaled(&g, 1.0);
        Ok(loss)
    }

    fn end_task(&mut self, ctx: &TaskContext, model: &Mlp) -> Result<()> {
        let fisher = estimate_fisher(
            model,
            ctx.train,
            self.fisher_samples,
            self.seed ^ (ctx.index as u64 + 1).wrapping_mul(0x2545_F491_4F6C_DD1D),
        )?;
        self.state.anchors.push(Anchor {
            params: model.flatten(),
            fisher,
        });
        Ok(())
    }
}
