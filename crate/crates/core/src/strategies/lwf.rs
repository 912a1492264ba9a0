use ndarray::{s, Array2, ArrayView2};

use super::{Batch, Strategy, TaskContext};
use crate::error::{Error, Result};
use crate::loss::{bce_with_logit, sigmoid};
use crate::model::Mlp;

/// Distillation of a frozen teacher's old-class outputs into the student.
///
/// Returns `lambda * mean_{rows, old classes} BCE(s(z/T), s(z_old/T))` and its
/// gradient w.r.t. all student logits; columns of classes the teacher does not
/// know stay zero.
pub fn lwf_loss(
    new_logits: ArrayView2<f64>,
    old_logits: ArrayView2<f64>,
    lambda: f64,
    temperature: f64,
) -> Result<(f64, Array2<f64>)> {
    let (b, c) = new_logits.dim();
    let (ob, old) = old_logits.dim();
    if ob != b || old > c {
        return Err(Error::Head(format!(
            "teacher logits {ob}x{old} do not fit student logits {b}x{c}"
        )));
    }
    let mut grad = Array2::zeros((b, c));
    if lambda == 0.0 || old == 0 || b == 0 {
        return Ok((0.0, grad));
    }
    let cells = (b * old) as f64;
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..old {
            let z = new_logits[[i, j]] / temperature;
            let p = sigmoid(old_logits[[i, j]] / temperature);
            total += bce_with_logit(z, p);
            grad[[i, j]] = lambda * (sigmoid(z) - p) / (temperature * cells);
        }
    }
    Ok((lambda * total / cells, grad))
}

pub struct Lwf {
    lambda: f64,
    temperature: f64,
    teacher: Option<Mlp>,
}

impl Lwf {
    pub fn new(lambda: f64, temperature: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::Config(format!("lwf.lambda={lambda} must be finite and >= 0")));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Config(format!("lwf.temperature={temperature} must be > 0")));
        }
        Ok(Lwf {
            lambda,
            temperature,
            teacher: None,
        })
    }
}

impl Strategy for Lwf {
    fn name(&self) -> &'static str {
        "lwf"
    }

    fn begin_task(&mut self, ctx: &TaskContext, model: &Mlp) -> Result<()> {
        self.teacher = if ctx.index == 0 {
            None
        } else {
            Some(model.truncated_head(ctx.previous_classes)?)
        };
        Ok(())
    }

    fn adjust_logit_grad(
        &mut self,
        _ctx: &TaskContext,
        batch: &Batch,
        logits: &Array2<f64>,
        dlogits: &mut Array2<f64>,
    ) -> Result<f64> {
        let Some(teacher) = &self.teacher else {
            return Ok(0.0);
        };
        let old = teacher.logits(batch.inputs.view())?;
        let (loss, grad) = lwf_loss(logits.view(), old.view(), self.lambda, self.temperature)?;
        let k = old.ncols();
        let mut cols = dlogits.slice_mut(s![.., ..k]);
        cols += &grad.slice(s![.., ..k]);
        Ok(loss)
    }
}
