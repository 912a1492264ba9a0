//! SGD and Adam updates with separate learning-rate multipliers for the
//! trunk (hidden layers) and the head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradient, Mlp};

/// Learning-rate multipliers per parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrGroups {
    pub trunk: f64,
    pub head: f64,
}

impl Default for LrGroups {
    fn default() -> Self {
        LrGroups {
            trunk: 1.0,
            head: 1.0,
        }
    }
}

impl LrGroups {
    fn multipliers(&self, model: &Mlp) -> impl Fn(usize) -> f64 + '_ {
        let trunk = model.trunk_param_count();
        move |i| if i < trunk { self.trunk } else { self.head }
    }
}

fn check_gradient(model: &Mlp, grad: &Gradient) -> Result<()> {
    if grad.len() != model.param_count() {
        return Err(Error::Shape {
            layer: "gradient".into(),
            expected: model.param_count(),
            found: grad.len(),
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            location: format!("gradient at {}", model.locate(i)),
        });
    }
    Ok(())
}

pub fn sgd_step(model: &mut Mlp, grad: &Gradient, lr: f64, groups: LrGroups) -> Result<()> {
    check_gradient(model, grad)?;
    let scale = groups.multipliers(model);
    let mut params = model.flatten();
    for (i, (p, g)) in params.iter_mut().zip(grad.iter()).enumerate() {
        *p -= lr * scale(i) * g;
    }
    model.assign(&params)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and timestep.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    /// Zero-pads the moments after the model gained head rows.
    fn fit(&mut self, len: usize) {
        if self.m.len() < len {
            self.m.resize(len, 0.0);
            self.v.resize(len, 0.0);
        }
    }
}

pub fn adam_step(
    model: &mut Mlp,
    grad: &Gradient,
    state: &mut AdamState,
    lr: f64,
    hp: AdamParams,
    groups: LrGroups,
) -> Result<()> {
    check_gradient(model, grad)?;
    if state.m.len() > grad.len() {
        return Err(Error::State(format!(
            "Adam state covers {} parameters, model has {}",
            state.m.len(),
            grad.len()
        )));
    }
    state.fit(grad.len());
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let scale = groups.multipliers(model);
    let mut params = model.flatten();
    for (i, p) in params.iter_mut().enumerate() {
        let g = grad[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        *p -= lr * scale(i) * m_hat / (v_hat.sqrt() + hp.eps);
    }
    model.assign(&params)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Owns the optimizer state for one training phase.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    adam: AdamParams,
    groups: LrGroups,
    state: AdamState,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, adam: AdamParams, groups: LrGroups) -> Self {
        Optimizer {
            kind,
            lr,
            adam,
            groups,
            state: AdamState::default(),
        }
    }

    pub fn step(&mut self, model: &mut Mlp, grad: &Gradient) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => sgd_step(model, grad, self.lr, self.groups),
            OptimizerKind::Adam => {
                adam_step(model, grad, &mut self.state, self.lr, self.adam, self.groups)
            }
        }
    }
}
