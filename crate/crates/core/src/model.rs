//! Feed-forward multi-label classifier with a growable output head.
//!
//! The network is a stack of dense hidden layers followed by a linear head
//! with one row per answer class. Gradients are computed analytically.
//!
//! Flat parameter layout (shared by [`FlatParams`] and [`Gradient`]):
//!
//! 1. for each hidden layer in order: weight matrix row-major (`out x in`),
//!    then the bias vector;
//! 2. for each head row (answer class) in id order: the weight row followed
//!    by that class's bias.
//!
//! Head coordinates come last and are grouped per class, so growing the head
//! only appends coordinates and never shifts existing ones.

use std::ops::{Deref, DerefMut};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the post-activation value.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

/// How new head rows are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeadInit {
    #[default]
    Zero,
    Gaussian { std: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn affine(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight.t());
        z += &self.bias;
        z
    }
}

/// Per-layer activations recorded by [`Mlp::forward`].
#[derive(Clone, Debug)]
pub struct ActivationTrace {
    pub input: Array2<f64>,
    /// Post-nonlinearity output of each hidden layer, `batch x width`.
    pub hidden: Vec<Array2<f64>>,
}

impl ActivationTrace {
    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }

    /// Representation feeding the head (the input itself for a head-only model).
    pub fn last(&self) -> &Array2<f64> {
        self.hidden.last().unwrap_or(&self.input)
    }
}

macro_rules! param_vector {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub Vec<f64>);

        impl Deref for $name {
            type Target = Vec<f64>;
            fn deref(&self) -> &Vec<f64> {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut Vec<f64> {
                &mut self.0
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                $name(v)
            }
        }

        impl $name {
            pub fn zeros(len: usize) -> Self {
                $name(vec![0.0; len])
            }

            pub fn dot(&self, other: &[f64]) -> f64 {
                self.0.iter().zip(other).map(|(a, b)| a * b).sum()
            }
        }
    };
}

param_vector!(
    /// All model parameters in the documented flat order.
    FlatParams
);
param_vector!(
    /// Loss gradient laid out like [`FlatParams`].
    Gradient
);

impl Gradient {
    pub fn add_scaled(&mut self, other: &[f64], scale: f64) {
        for (g, o) in self.0.iter_mut().zip(other) {
            *g += scale * o;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    input_dim: usize,
    hidden: Vec<Dense>,
    head: Dense,
    activation: Activation,
}

impl Mlp {
    /// Glorot-uniform hidden layers and an empty head.
    pub fn new<R: Rng>(
        input_dim: usize,
        widths: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut hidden = Vec::with_capacity(widths.len());
        let mut fan_in = input_dim;
        for &w in widths {
            let limit = (6.0 / (fan_in + w) as f64).sqrt();
            let weight = Array2::from_shape_fn((w, fan_in), |_| rng.random_range(-limit..limit));
            hidden.push(Dense {
                weight,
                bias: Array1::zeros(w),
            });
            fan_in = w;
        }
        Mlp {
            input_dim,
            hidden,
            head: Dense::zeros(fan_in, 0),
            activation,
        }
    }

    pub fn from_layers(hidden: Vec<Dense>, head: Dense, activation: Activation) -> Result<Self> {
        let input_dim = hidden.first().map_or(head.inputs(), Dense::inputs);
        let mut fan_in = input_dim;
        for (k, layer) in hidden.iter().chain(std::iter::once(&head)).enumerate() {
            let name = layer_name(k, hidden.len());
            if layer.inputs() != fan_in {
                return Err(Error::Shape {
                    layer: name,
                    expected: fan_in,
                    found: layer.inputs(),
                });
            }
            if layer.bias.len() != layer.outputs() {
                return Err(Error::Shape {
                    layer: format!("{name}.bias"),
                    expected: layer.outputs(),
                    found: layer.bias.len(),
                });
            }
            fan_in = layer.outputs();
        }
        Ok(Mlp {
            input_dim,
            hidden,
            head,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.head.outputs()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn hidden_layers(&self) -> &[Dense] {
        &self.hidden
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.hidden.iter().map(Dense::outputs).collect()
    }

    fn head_input_dim(&self) -> usize {
        self.head.inputs()
    }

    /// Number of parameters outside the head.
    pub fn trunk_param_count(&self) -> usize {
        self.hidden
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.trunk_param_count() + self.num_classes() * (self.head_input_dim() + 1)
    }

    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<(Array2<f64>, ActivationTrace)> {
        if batch.ncols() != self.input_dim {
            return Err(Error::Shape {
                layer: layer_name(0, self.hidden.len()),
                expected: self.input_dim,
                found: batch.ncols(),
            });
        }
        let mut hidden = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let x = hidden.last().map_or(batch, |h: &Array2<f64>| h.view());
            let mut z = layer.affine(x);
            z.mapv_inplace(|v| self.activation.apply(v));
            hidden.push(z);
        }
        let last = hidden.last().map_or(batch, |h| h.view());
        let logits = self.head.affine(last);
        Ok((
            logits,
            ActivationTrace {
                input: batch.to_owned(),
                hidden,
            },
        ))
    }

    pub fn logits(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward(batch).map(|(logits, _)| logits)
    }

    /// Gradient of a scalar loss given its derivative w.r.t. the logits.
    pub fn backward(&self, trace: &ActivationTrace, dlogits: &Array2<f64>) -> Result<Gradient> {
        let b = trace.batch_size();
        if trace.hidden.len() != self.hidden.len() {
            return Err(Error::Trace(format!(
                "trace has {} hidden layers, model has {}",
                trace.hidden.len(),
                self.hidden.len()
            )));
        }
        if trace.input.ncols() != self.input_dim {
            return Err(Error::Trace(format!(
                "trace input width {} != model input {}",
                trace.input.ncols(),
                self.input_dim
            )));
        }
        for (k, (h, layer)) in trace.hidden.iter().zip(&self.hidden).enumerate() {
            if h.nrows() != b || h.ncols() != layer.outputs() {
                return Err(Error::Trace(format!(
                    "hidden[{k}] is {}x{}, expected {}x{}",
                    h.nrows(),
                    h.ncols(),
                    b,
                    layer.outputs()
                )));
            }
        }
        if dlogits.dim() != (b, self.num_classes()) {
            return Err(Error::Trace(format!(
                "dlogits is {:?}, expected ({b}, {})",
                dlogits.dim(),
                self.num_classes()
            )));
        }

        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.hidden.len());
        let last = trace.last();
        let head_dw = dlogits.t().dot(last);
        let head_db = dlogits.sum_axis(Axis(0));

        let mut delta = dlogits.dot(&self.head.weight);
        for k in (0..self.hidden.len()).rev() {
            let out = &trace.hidden[k];
            let act = self.activation;
            delta.zip_mut_with(out, |d, &y| *d *= act.derivative_from_output(y));
            let below = if k == 0 { &trace.input } else { &trace.hidden[k - 1] };
            let dw = delta.t().dot(below);
            let db = delta.sum_axis(Axis(0));
            if k > 0 {
                delta = delta.dot(&self.hidden[k].weight);
            }
            grads.push((dw, db));
        }
        grads.reverse();

        let mut flat = Vec::with_capacity(self.param_count());
        for (dw, db) in &grads {
            flat.extend(dw.iter());
            flat.extend(db.iter());
        }
        push_head(&mut flat, &head_dw, &head_db);
        Ok(Gradient(flat))
    }

    pub fn flatten(&self) -> FlatParams {
        let mut flat = Vec::with_capacity(self.param_count());
        for layer in &self.hidden {
            flat.extend(layer.weight.iter());
            flat.extend(layer.bias.iter());
        }
        push_head(&mut flat, &self.head.weight, &self.head.bias);
        FlatParams(flat)
    }

    pub fn assign(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape {
                layer: "flat parameters".into(),
                expected: self.param_count(),
                found: params.len(),
            });
        }
        let mut it = params.iter().copied();
        for layer in &mut self.hidden {
            layer.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            layer.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        for c in 0..self.head.outputs() {
            self.head
                .weight
                .row_mut(c)
                .iter_mut()
                .for_each(|w| *w = it.next().unwrap());
            self.head.bias[c] = it.next().unwrap();
        }
        Ok(())
    }

    /// Human-readable location of a flat parameter index.
    pub fn locate(&self, index: usize) -> String {
        let mut offset = 0;
        for (k, layer) in self.hidden.iter().enumerate() {
            let wlen = layer.weight.len();
            if index < offset + wlen {
                let local = index - offset;
                return format!(
                    "hidden[{k}].weight[{}, {}]",
                    local / layer.inputs(),
                    local % layer.inputs()
                );
            }
            offset += wlen;
            if index < offset + layer.bias.len() {
                return format!("hidden[{k}].bias[{}]", index - offset);
            }
            offset += layer.bias.len();
        }
        let row = self.head_input_dim() + 1;
        let local = index.saturating_sub(offset);
        let class = local / row;
        let col = local % row;
        if class >= self.num_classes() {
            format!("index {index} beyond {} parameters", self.param_count())
        } else if col == row - 1 {
            format!("head.bias[{class}]")
        } else {
            format!("head.weight[{class}, {col}]")
        }
    }

    /// Appends `count` answer classes to the head. Existing rows are untouched.
    pub fn expand_head(&mut self, count: usize, init: HeadInit) {
        if count == 0 {
            return;
        }
        let old = self.num_classes();
        let width = self.head_input_dim();
        let mut weight = Array2::zeros((old + count, width));
        weight.slice_mut(s![..old, ..]).assign(&self.head.weight);
        let mut bias = Array1::zeros(old + count);
        bias.slice_mut(s![..old]).assign(&self.head.bias);
        if let HeadInit::Gaussian { std, seed } = init {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (old as u64).wrapping_mul(0x9E37_79B9));
            let normal = Normal::new(0.0, std).expect("head init std must be finite and >= 0");
            weight
                .slice_mut(s![old.., ..])
                .iter_mut()
                .for_each(|w| *w = normal.sample(&mut rng));
        }
        self.head = Dense { weight, bias };
    }

    /// Copy of this model whose head keeps only the first `classes` rows.
    pub fn truncated_head(&self, classes: usize) -> Result<Mlp> {
        if classes > self.num_classes() {
            return Err(Error::Head(format!(
                "cannot keep {classes} of {} classes",
                self.num_classes()
            )));
        }
        let mut m = self.clone();
        m.head = Dense {
            weight: self.head.weight.slice(s![..classes, ..]).to_owned(),
            bias: self.head.bias.slice(s![..classes]).to_owned(),
        };
        Ok(m)
    }

    /// True when every layer except the head has identical shape.
    pub fn same_trunk_shape(&self, other: &Mlp) -> bool {
        self.input_dim == other.input_dim && self.hidden_widths() == other.hidden_widths()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            activation: self.activation,
            input_dim: self.input_dim,
            hidden: self.hidden_widths(),
            classes: self.num_classes(),
            params: self.flatten().0,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Mlp> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let mut hidden = Vec::with_capacity(ck.hidden.len());
        let mut fan_in = ck.input_dim;
        for &w in &ck.hidden {
            hidden.push(Dense::zeros(fan_in, w));
            fan_in = w;
        }
        let mut model = Mlp {
            input_dim: ck.input_dim,
            hidden,
            head: Dense::zeros(fan_in, ck.classes),
            activation: ck.activation,
        };
        model
            .assign(&ck.params)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(model)
    }
}

fn push_head(flat: &mut Vec<f64>, weight: &Array2<f64>, bias: &Array1<f64>) {
    for (row, b) in weight.rows().into_iter().zip(bias.iter()) {
        flat.extend(row.iter());
        flat.push(*b);
    }
}

fn layer_name(k: usize, hidden: usize) -> String {
    if k < hidden {
        format!("hidden[{k}]")
    } else {
        "head".to_string()
    }
}

pub const CHECKPOINT_FORMAT: &str = "clvqa-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON checkpoint: architecture header plus the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub activation: Activation,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub params: Vec<f64>,
}
