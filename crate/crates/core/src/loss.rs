//! Sigmoid binary cross-entropy against soft multi-label targets.

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{Error, Result};

/// Sparse soft targets for one row: `(answer id, score)` pairs. Absent ids are 0.
pub type TargetRow = Vec<(usize, f64)>;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-(y ln s(z) + (1-y) ln(1 - s(z)))`, evaluated without overflow.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

pub fn densify(targets: &[TargetRow], classes: usize) -> Result<Array2<f64>> {
    let mut dense = Array2::zeros((targets.len(), classes));
    for (i, row) in targets.iter().enumerate() {
        for &(id, score) in row {
            if id >= classes {
                return Err(Error::Vocabulary { id, size: classes });
            }
            if !(0.0..=1.0).contains(&score) {
                return Err(Error::Range {
                    what: format!("target score of answer {id} in row {i}"),
                    value: score,
                });
            }
            dense[[i, id]] = score;
        }
    }
    Ok(dense)
}

/// Mean BCE over every cell of a `B x C` logit matrix, and its gradient.
pub fn bce_dense(logits: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    if logits.dim() != targets.dim() {
        return Err(Error::Shape {
            layer: "loss targets".into(),
            expected: logits.len(),
            found: targets.len(),
        });
    }
    let cells = logits.len();
    if cells == 0 {
        return Ok((0.0, Array2::zeros(logits.dim())));
    }
    let scale = 1.0 / cells as f64;
    let mut grad = Array2::zeros(logits.dim());
    let mut total = 0.0;
    Zip::from(&mut grad)
        .and(&logits)
        .and(&targets)
        .for_each(|g, &z, &y| {
            total += bce_with_logit(z, y);
            *g = (sigmoid(z) - y) * scale;
        });
    Ok((total * scale, grad))
}

/// Loss for sparse soft targets over the full head.
pub fn bce_soft_loss(logits: ArrayView2<f64>, targets: &[TargetRow]) -> Result<(f64, Array2<f64>)> {
    if targets.len() != logits.nrows() {
        return Err(Error::Shape {
            layer: "loss targets".into(),
            expected: logits.nrows(),
            found: targets.len(),
        });
    }
    let dense = densify(targets, logits.ncols())?;
    bce_dense(logits, dense.view())
}
